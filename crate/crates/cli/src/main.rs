use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod output;

use config::{Estimators, RunConfig, Subsets};

#[derive(Parser)]
#[command(
    name = "cknn",
    version,
    about = "Calibrated kNN small area estimation from big data and a sample"
)]
struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// TOML file with run settings; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cross-validate (k, feature subset) and write grid.csv and chosen.json.
    Tune {
        #[command(flatten)]
        io: FrameIo,
        #[command(flatten)]
        grid: GridFlags,
    },
    /// Hybrid and/or FH estimates per area with uncertainty.
    Estimate {
        #[command(flatten)]
        io: FrameIo,
        #[command(flatten)]
        grid: GridFlags,
        #[command(flatten)]
        est: EstimateFlags,
    },
    /// Fay–Herriot baseline from the sample's direct estimates.
    Fh {
        #[command(flatten)]
        io: FrameIo,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        experiment: Option<u8>,
        /// Fail instead of using the moment estimator when REML does not converge.
        #[arg(long)]
        no_moments_fallback: bool,
    },
    /// Monte Carlo study of a synthetic scenario.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Accuracy report of an estimates table against true totals.
    Report {
        #[arg(long)]
        estimates: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthetic frame with big data and a sample, plus its true totals.
    Generate {
        /// Population spec and sample size; the reference layout when absent.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Population size, keeping the reference layout.
        #[arg(long)]
        population: Option<usize>,
        #[arg(long)]
        sample_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct FrameIo {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `area,T_m` file enabling accuracy aggregates.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct GridFlags {
    #[arg(long)]
    k_min: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    /// `all` or a feature subset such as `age+sex`; repeat for several.
    #[arg(long = "subset")]
    subsets: Vec<String>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EstimateFlags {
    #[arg(long, value_enum)]
    estimators: Option<Estimators>,
    /// 0 full covariates, 1 or 2 for FH on degraded covariates.
    #[arg(long)]
    experiment: Option<u8>,
    #[arg(long)]
    bootstrap: Option<usize>,
    /// Choose the bootstrap size for this CV of the interval width.
    #[arg(long)]
    cv_target: Option<f64>,
    #[arg(long)]
    cv_per_area: bool,
    /// Fixed k; needs --mask and skips tuning.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    mask: Option<String>,
}

impl GridFlags {
    fn apply(self, c: &mut RunConfig) {
        c.k_min = self.k_min.unwrap_or(c.k_min);
        c.k_max = self.k_max.unwrap_or(c.k_max);
        c.folds = self.folds.unwrap_or(c.folds);
        c.seed = self.seed.unwrap_or(c.seed);
        match self.subsets.len() {
            0 => {}
            1 => c.subsets = Subsets::Keyword(self.subsets.into_iter().next().expect("one")),
            _ => c.subsets = Subsets::List(self.subsets),
        }
    }
}

impl EstimateFlags {
    fn apply(self, c: &mut RunConfig) {
        c.estimators = self.estimators.unwrap_or(c.estimators);
        c.experiment = self.experiment.unwrap_or(c.experiment);
        c.bootstrap = self.bootstrap.unwrap_or(c.bootstrap);
        c.cv_target = self.cv_target.or(c.cv_target);
        c.cv_per_area |= self.cv_per_area;
        c.k = self.k.or(c.k);
        c.mask = self.mask.or(c.mask.take());
    }
}

fn run(cli: Cli) -> cknn_core::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| cknn_core::Error::Validation(format!("thread pool: {e}")))?;
    }
    let config_path = cli.config.as_deref();
    match cli.command {
        Command::Tune { io, grid } => {
            let mut c = RunConfig::load(config_path)?;
            grid.apply(&mut c);
            commands::tune(&c, &io.input, &io.out)
        }
        Command::Estimate { io, grid, est } => {
            let mut c = RunConfig::load(config_path)?;
            grid.apply(&mut c);
            est.apply(&mut c);
            commands::estimate(&c, &io.input, io.truth.as_deref(), &io.out)
        }
        Command::Fh {
            io,
            seed,
            experiment,
            no_moments_fallback,
        } => {
            let mut c = RunConfig::load(config_path)?;
            c.seed = seed.unwrap_or(c.seed);
            c.experiment = experiment.unwrap_or(c.experiment);
            c.fh_moments_fallback &= !no_moments_fallback;
            commands::fh(&c, &io.input, io.truth.as_deref(), &io.out)
        }
        Command::Simulate {
            scenario,
            out,
            replicates,
            seed,
        } => commands::simulate(&scenario, replicates, seed, &out),
        Command::Report { estimates, truth, out } => commands::report(&estimates, &truth, &out),
        Command::Generate {
            scenario,
            population,
            sample_size,
            seed,
            out,
        } => commands::generate(scenario.as_deref(), population, sample_size, seed, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cknn: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
