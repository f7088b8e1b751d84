use std::path::Path;

use cknn_core::calibration::data_integrator;
use cknn_core::fh::{write_fh_csv, FitMethod};
use cknn_core::frame::{load_frame, write_frame};
use cknn_core::pipeline::{run_fh_inputs, run_hybrid, FhRun, HybridConfig};
use cknn_core::rng::derive_seed;
use cknn_core::simlab::{build_scenario, write_replicates_csv, BigDataSummary};
use cknn_core::tuning::write_grid_csv;
use cknn_core::uncertainty::{assemble_report, write_report_csv, Aggregates, BiasMethod, SmallAreaReport};
use cknn_core::{
    apply_undercoverage, direct_estimates, grid_search, run_monte_carlo, CovariateDesign, Error, Experiment, FhOptions,
    GridPoint, PopulationFrame, PopulationSpec, Result, Scenario,
};
use serde::Serialize;

use crate::config::RunConfig;
use crate::output::{read_estimates, read_truth, write_estimates, write_truth, Column, Manifest, OutDir};

#[derive(Serialize)]
struct Chosen {
    k: usize,
    mask: String,
    mask_indices: Vec<usize>,
    test_error_rate: f64,
}

impl Chosen {
    fn new(best: &GridPoint, names: &[String]) -> Self {
        Chosen {
            k: best.k,
            mask: best.mask.label(names),
            mask_indices: best.mask.indices().to_vec(),
            test_error_rate: best.test_error_rate,
        }
    }
}

fn load(config: &RunConfig, input: &Path) -> Result<PopulationFrame> {
    load_frame(input, &config.mapping)
}

pub fn tune(config: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    let frame = load(config, input)?;
    let names = frame.feature_names().to_vec();
    let subsets = config.subsets.resolve(&names)?;
    let grid = grid_search(&frame, &config.ks()?, &subsets, config.folds, config.seed)?;
    let dir = OutDir::create(out)?;
    dir.write_with("grid.csv", |w| write_grid_csv(&grid.table, &names, w))?;
    dir.write_json("chosen.json", &Chosen::new(&grid.best, &names))?;
    dir.write_json(
        "manifest.json",
        &Manifest::new("tune", config)
            .seed("root", config.seed)
            .input("input", input),
    )
}

fn fh_options(config: &RunConfig) -> FhOptions {
    FhOptions {
        moments_fallback: config.fh_moments_fallback,
        ..FhOptions::default()
    }
}

/// Direct estimates with covariates degraded by the configured experiment.
fn fh_run(config: &RunConfig, frame: &PopulationFrame, truth: Option<&[f64]>) -> Result<(FhRun, Option<Vec<usize>>)> {
    let inputs = direct_estimates(frame)?;
    let experiment = Experiment::from_id(config.experiment)?;
    let (inputs, deleted) = match experiment {
        Experiment::Full => (inputs, None),
        _ => {
            let design = CovariateDesign::from_frame(frame);
            let uc = apply_undercoverage(frame, &design, experiment, undercoverage_seed(config))?;
            (inputs.with_covariates(uc.covariates)?, Some(uc.deleted))
        }
    };
    Ok((run_fh_inputs(inputs, &fh_options(config), truth)?, deleted))
}

fn undercoverage_seed(config: &RunConfig) -> u64 {
    derive_seed(config.seed, "undercoverage", 0)
}

#[derive(Serialize)]
struct HybridOutput {
    k: usize,
    mask: String,
    w: Vec<f64>,
    t_p: f64,
    t_knn: f64,
    t_cknn: f64,
    calibration_fallback: bool,
    weights_out_of_range: bool,
    bootstrap_replicates: usize,
    pilot_width_cv: Option<f64>,
    /// Areas whose bias uses the pooled estimator.
    pooled_bias_areas: usize,
    pooled_bias: f64,
    aggregates: Aggregates,
}

#[derive(Serialize)]
struct FhOutput {
    beta: Vec<f64>,
    column_names: Vec<String>,
    sigma2_u: f64,
    method: FitMethod,
    iterations: usize,
    floored_areas: usize,
    deleted_records: Option<Vec<usize>>,
    aggregates: Aggregates,
}

impl FhOutput {
    fn new(run: &FhRun, deleted: Option<Vec<usize>>) -> Self {
        FhOutput {
            beta: run.model.beta.clone(),
            column_names: run.inputs.column_names.clone(),
            sigma2_u: run.model.sigma2_u,
            method: run.model.method,
            iterations: run.model.iterations,
            floored_areas: run.inputs.floored.iter().filter(|f| **f).count(),
            deleted_records: deleted,
            aggregates: run.report.aggregates.clone(),
        }
    }
}

#[derive(Serialize)]
struct EstimateOutput {
    t_p: f64,
    experiment: u8,
    hybrid: Option<HybridOutput>,
    fh: Option<FhOutput>,
}

pub fn estimate(config: &RunConfig, input: &Path, truth_path: Option<&Path>, out: &Path) -> Result<()> {
    let frame = load(config, input)?;
    let names = frame.feature_names().to_vec();
    let truth = truth_path.map(|p| read_truth(p, frame.n_areas())).transpose()?;
    let t_p = data_integrator(&frame)?.t_p;
    let dir = OutDir::create(out)?;

    let hybrid = if config.estimators.hybrid() {
        let hc = HybridConfig {
            ks: config.ks()?,
            subsets: config.subsets.resolve(&names)?,
            folds: config.folds,
            bootstrap: config.bootstrap_plan(),
            seed: config.seed,
            chosen: config.chosen(&names)?,
        };
        let run = run_hybrid(&frame, &hc, truth.as_deref())?;
        if let Some(grid) = &run.grid {
            dir.write_with("grid.csv", |w| write_grid_csv(&grid.table, &names, w))?;
            dir.write_json("chosen.json", &Chosen::new(&grid.best, &names))?;
        }
        if run.calibration.fallback {
            eprintln!(
                "warning: calibration infeasible for k = {}; using equal donor weights, areas may not add to the national total",
                run.k
            );
        }
        Some(run)
    } else {
        None
    };
    let fh = if config.estimators.fh() {
        Some(fh_run(config, &frame, truth.as_deref())?)
    } else {
        None
    };

    let mut columns = Vec::new();
    if let Some(run) = &hybrid {
        columns.push(Column {
            suffix: "hybrid",
            report: &run.report,
        });
    }
    if let Some((run, _)) = &fh {
        columns.push(Column {
            suffix: "FH",
            report: &run.report,
        });
    }
    let fallback = hybrid.as_ref().map(|r| r.calibration.fallback);
    dir.write_with("estimates.csv", |w| {
        write_estimates(&columns, truth.as_deref(), fallback, w)
    })?;

    let summary = EstimateOutput {
        t_p,
        experiment: config.experiment,
        hybrid: hybrid.as_ref().map(|run| HybridOutput {
            k: run.k,
            mask: run.mask.label(&names),
            w: run.calibration.w.clone(),
            t_p: run.calibration.integrator.t_p,
            t_knn: run.calibration.t_knn,
            t_cknn: run.calibration.t_cknn,
            calibration_fallback: run.calibration.fallback,
            weights_out_of_range: run.calibration.out_of_range,
            bootstrap_replicates: run.bootstrap.replicates,
            pilot_width_cv: run.pilot.as_ref().map(|p| p.pooled),
            pooled_bias_areas: run.bias.method.iter().filter(|m| **m == BiasMethod::Pooled).count(),
            pooled_bias: run.bias.pooled,
            aggregates: run.report.aggregates.clone(),
        }),
        fh: fh.map(|(run, deleted)| FhOutput::new(&run, deleted)),
    };
    dir.write_json("aggregates.json", &summary)?;

    let mut manifest = Manifest::new("estimate", config)
        .seed("root", config.seed)
        .seed("bootstrap", derive_seed(config.seed, "bootstrap", 0))
        .input("input", input);
    if config.experiment != 0 {
        manifest = manifest.seed("undercoverage", undercoverage_seed(config));
    }
    if let Some(p) = truth_path {
        manifest = manifest.input("truth", p);
    }
    dir.write_json("manifest.json", &manifest)?;
    println!("national total T_p = {t_p}");
    Ok(())
}

pub fn fh(config: &RunConfig, input: &Path, truth_path: Option<&Path>, out: &Path) -> Result<()> {
    let frame = load(config, input)?;
    let truth = truth_path.map(|p| read_truth(p, frame.n_areas())).transpose()?;
    let (run, deleted) = fh_run(config, &frame, truth.as_deref())?;
    let dir = OutDir::create(out)?;
    dir.write_with("fh.csv", |w| write_fh_csv(&run.inputs, &run.model, &run.report, w))?;
    dir.write_json("fh.json", &FhOutput::new(&run, deleted))?;
    let mut manifest = Manifest::new("fh", config)
        .seed("root", config.seed)
        .input("input", input);
    if config.experiment != 0 {
        manifest = manifest.seed("undercoverage", undercoverage_seed(config));
    }
    if let Some(p) = truth_path {
        manifest = manifest.input("truth", p);
    }
    dir.write_json("manifest.json", &manifest)
}

pub fn simulate(scenario_path: &Path, replicates: Option<usize>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut scenario = Scenario::load(scenario_path)?;
    scenario.run.replicates = replicates.unwrap_or(scenario.run.replicates);
    scenario.run.seed = seed.unwrap_or(scenario.run.seed);
    let report = run_monte_carlo(&scenario.population, &scenario.run)?;
    let dir = OutDir::create(out)?;
    dir.write_json("simulation.json", &report)?;
    dir.write_with("replicates.csv", |w| write_replicates_csv(&report, w))?;
    dir.write_json(
        "manifest.json",
        &Manifest::new("simulate", &scenario)
            .seed("root", scenario.run.seed)
            .input("scenario", scenario_path),
    )
}

#[derive(Serialize)]
struct ReportOutput {
    estimator: String,
    aggregates: Aggregates,
}

/// Rebuilds the accuracy report of every estimator in an estimates table,
/// taking `T ± 1.96 RTMSE` as the interval.
pub fn report(estimates_path: &Path, truth_path: &Path, out: &Path) -> Result<()> {
    let columns = read_estimates(estimates_path)?;
    let n_areas = columns[0].estimate.len();
    let truth = read_truth(truth_path, n_areas)?;
    let zeros = vec![0.0; n_areas];
    let reports: Vec<(String, SmallAreaReport)> = columns
        .iter()
        .map(|c| {
            let mse: Vec<f64> = c.rtmse.iter().map(|r| r * r).collect();
            Ok((
                c.suffix.clone(),
                assemble_report(&c.estimate, &mse, &zeros, &zeros, Some(&truth))?,
            ))
        })
        .collect::<Result<_>>()?;
    let dir = OutDir::create(out)?;
    dir.write_with("report.csv", |w| {
        let mut w = csv::Writer::from_writer(w);
        w.write_record([
            "estimator",
            "area",
            "T_m",
            "T_hat",
            "RTMSE",
            "CI_lo",
            "CI_hi",
            "covered",
        ])?;
        for (name, r) in &reports {
            let mut buf = Vec::new();
            write_report_csv(r, &mut buf)?;
            let mut inner = csv::Reader::from_reader(buf.as_slice());
            for rec in inner.records() {
                let rec = rec?;
                let mut row = vec![name.as_str()];
                row.extend(rec.iter());
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    })?;
    let summary: Vec<ReportOutput> = reports
        .into_iter()
        .map(|(estimator, r)| ReportOutput {
            estimator,
            aggregates: r.aggregates,
        })
        .collect();
    dir.write_json("report.json", &summary)?;
    dir.write_json(
        "manifest.json",
        &Manifest::new("report", &())
            .input("estimates", estimates_path)
            .input("truth", truth_path),
    )
}

#[derive(Serialize)]
struct GenerateConfig {
    population: PopulationSpec,
    sample_size: usize,
    seed: u64,
}

#[derive(Serialize)]
struct PopulationOutput<'a> {
    n: usize,
    n_areas: usize,
    sample_size: usize,
    t_true: f64,
    big_data: &'a BigDataSummary,
    regions: &'a [u8],
}

pub fn generate(
    scenario_path: Option<&Path>,
    population: Option<usize>,
    sample_size: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let scenario = match scenario_path {
        Some(p) => Scenario::load(p)?,
        None => Scenario::default(),
    };
    let mut spec = scenario.population;
    if let Some(n) = population {
        spec.n = n;
    }
    let n = sample_size.unwrap_or(scenario.run.sample_size);
    let config = GenerateConfig {
        population: spec,
        sample_size: n,
        seed: seed.unwrap_or(scenario.run.seed),
    };
    if n == 0 {
        return Err(Error::Domain("sample size must be at least 1".into()));
    }
    let data = build_scenario(&config.population, n, config.seed)?;
    let dir = OutDir::create(out)?;
    dir.write_with("frame.csv", |w| write_frame(&data.observed(), w))?;
    dir.write_with("truth.csv", |w| write_truth(&data.truth, w))?;
    dir.write_json(
        "population.json",
        &PopulationOutput {
            n: data.frame.len(),
            n_areas: data.frame.n_areas(),
            sample_size: n,
            t_true: data.truth.iter().sum(),
            big_data: &data.big_data,
            regions: &data.regions,
        },
    )?;
    let mut manifest = Manifest::new("generate", &config).seed("root", config.seed);
    if let Some(p) = scenario_path {
        manifest = manifest.input("scenario", p);
    }
    dir.write_json("manifest.json", &manifest)
}
