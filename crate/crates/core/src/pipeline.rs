//! End-to-end runs: tune, impute, calibrate, bootstrap, bias, report.

use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate, CalibrationResult};
use crate::error::{Error, Result};
use crate::fh::{direct_estimates, fh_predict_mse, fh_report, fit_fh, FhInputs, FhModel, FhOptions, FhPrediction};
use crate::frame::PopulationFrame;
use crate::hasd::FeatureMask;
use crate::imputer::{search_neighbors, ImputedValues};
use crate::rng;
use crate::tuning::{grid_search, GridResult};
use crate::uncertainty::{
    assemble_report, bootstrap_size, estimate_bias, fixed_k_bootstrap, measure_width_cv, pseudo_values, BiasEstimate,
    BootstrapEstimate, SmallAreaReport, WidthVariability,
};

/// Pilot size used to measure interval-width variability when `B` is chosen
/// automatically.
pub const PILOT_REPLICATES: usize = 100;
pub const PILOT_BATCHES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum BootstrapPlan {
    Fixed {
        replicates: usize,
    },
    /// Size `B` for a target CV of the interval width, scaling the constant
    /// of [`bootstrap_size`] by the variability measured in a pilot run.
    Auto {
        target_cv: f64,
        /// Use the worst area instead of the mean over areas.
        #[serde(default)]
        per_area: bool,
    },
}

impl Default for BootstrapPlan {
    fn default() -> Self {
        BootstrapPlan::Fixed { replicates: 500 }
    }
}

/// `B` from a pilot: the measured CV at `r` replicates gives the constant
/// `c = CV_r √r`, and the target is met at `B = ⌈(c / target)²⌉`.
pub fn auto_bootstrap_size(pilot: &WidthVariability, target_cv: f64, per_area: bool) -> Result<usize> {
    let measured = if per_area {
        pilot.per_area.iter().flatten().copied().fold(0.0, f64::max)
    } else {
        pilot.pooled
    };
    if measured <= 0.0 {
        return Ok(2);
    }
    let c = measured * (pilot.replicates_per_batch as f64).sqrt();
    Ok(bootstrap_size(target_cv * 1.71 / c)?.max(2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    pub ks: Vec<usize>,
    pub subsets: Vec<FeatureMask>,
    pub folds: usize,
    pub bootstrap: BootstrapPlan,
    pub seed: u64,
    /// Skip tuning and use this `(k, mask)`.
    pub chosen: Option<(usize, FeatureMask)>,
}

#[derive(Debug, Clone)]
pub struct HybridRun {
    pub grid: Option<GridResult>,
    pub k: usize,
    pub mask: FeatureMask,
    pub calibration: CalibrationResult,
    pub imputed: ImputedValues,
    pub pilot: Option<WidthVariability>,
    pub bootstrap: BootstrapEstimate,
    pub bias: BiasEstimate,
    pub report: SmallAreaReport,
}

/// Runs the hybrid estimator on an analyst's frame (`y` only on `B ∪ A`).
pub fn run_hybrid(frame: &PopulationFrame, config: &HybridConfig, truth: Option<&[f64]>) -> Result<HybridRun> {
    let (grid, k, mask) = match &config.chosen {
        Some((k, mask)) => {
            mask.check(frame.n_features())?;
            (None, *k, mask.clone())
        }
        None => {
            let g = grid_search(frame, &config.ks, &config.subsets, config.folds, config.seed)?;
            let (k, mask) = (g.best.k, g.best.mask.clone());
            (Some(g), k, mask)
        }
    };
    let table = search_neighbors(frame, k, &mask)?;
    let (calibration, imputed) = calibrate(frame, &table)?;
    let psi = pseudo_values(frame, &table.usage, &calibration.w)?;
    let boot_seed = rng::derive_seed(config.seed, "bootstrap", 0);
    let (pilot, b) = match config.bootstrap {
        BootstrapPlan::Fixed { replicates } => (None, replicates),
        BootstrapPlan::Auto { target_cv, per_area } => {
            let pilot = measure_width_cv(&psi, PILOT_REPLICATES, PILOT_BATCHES, boot_seed)?;
            let b = auto_bootstrap_size(&pilot, target_cv, per_area)?;
            (Some(pilot), b)
        }
    };
    let bootstrap = fixed_k_bootstrap(&psi, b, boot_seed)?;
    let bias = estimate_bias(frame, k, &mask, &calibration.w)?;
    let report = assemble_report(
        &calibration.per_area,
        &bootstrap.variance,
        &bootstrap.expected,
        &bias.per_area,
        truth,
    )?;
    Ok(HybridRun {
        grid,
        k,
        mask,
        calibration,
        imputed,
        pilot,
        bootstrap,
        bias,
        report,
    })
}

#[derive(Debug, Clone)]
pub struct FhRun {
    pub inputs: FhInputs,
    pub model: FhModel,
    pub predictions: Vec<FhPrediction>,
    pub report: SmallAreaReport,
}

/// Fits the FH baseline on `inputs`.
pub fn run_fh_inputs(inputs: FhInputs, options: &FhOptions, truth: Option<&[f64]>) -> Result<FhRun> {
    let model = fit_fh(&inputs, options)?;
    let predictions = fh_predict_mse(&model, &inputs);
    let report = fh_report(&predictions, truth)?;
    Ok(FhRun {
        inputs,
        model,
        predictions,
        report,
    })
}

/// Direct estimates from the frame's sample, then the FH fit.
pub fn run_fh(frame: &PopulationFrame, options: &FhOptions, truth: Option<&[f64]>) -> Result<FhRun> {
    run_fh_inputs(direct_estimates(frame)?, options, truth)
}

/// True area totals of a frame carrying every `y`.
pub fn true_totals(frame: &PopulationFrame) -> Result<Vec<f64>> {
    frame
        .areas()
        .iter()
        .map(|a| {
            a.units.iter().try_fold(0.0, |acc, &r| match frame.unit(r).y {
                Some(y) => Ok(acc + y),
                None => Err(Error::Validation(format!(
                    "unit {} has no response; true totals need a complete frame",
                    frame.unit(r).unit_id
                ))),
            })
        })
        .collect()
}
