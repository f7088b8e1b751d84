//! Run configuration: defaults, then a TOML config file, then flags.

use std::path::Path;

use cknn_core::pipeline::BootstrapPlan;
use cknn_core::tuning::all_subsets;
use cknn_core::{ColumnMapping, Error, FeatureMask, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Estimators {
    Hybrid,
    Fh,
    Both,
}

impl Estimators {
    pub fn hybrid(self) -> bool {
        matches!(self, Estimators::Hybrid | Estimators::Both)
    }

    pub fn fh(self) -> bool {
        matches!(self, Estimators::Fh | Estimators::Both)
    }
}

/// Feature subsets: `"all"` or a list of labels such as `"age+sex"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Subsets {
    Keyword(String),
    List(Vec<String>),
}

impl Default for Subsets {
    fn default() -> Self {
        Subsets::Keyword("all".into())
    }
}

impl Subsets {
    pub fn resolve(&self, names: &[String]) -> Result<Vec<FeatureMask>> {
        match self {
            Subsets::Keyword(k) if k == "all" || k == "all-subsets" => Ok(all_subsets(names.len())),
            Subsets::Keyword(k) => Ok(vec![FeatureMask::parse(k, names)?]),
            Subsets::List(labels) if labels.is_empty() => Err(Error::Validation("empty subset list".into())),
            Subsets::List(labels) => labels.iter().map(|l| FeatureMask::parse(l, names)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub subsets: Subsets,
    pub folds: usize,
    /// Explicit bootstrap size; ignored when `cv_target` is set.
    pub bootstrap: usize,
    /// Target CV of the interval width; chooses `B` from a pilot run.
    pub cv_target: Option<f64>,
    pub cv_per_area: bool,
    pub seed: u64,
    pub estimators: Estimators,
    /// 0 full covariates, 1 or 2 the under-coverage experiments.
    pub experiment: u8,
    /// Fixed `k`; with `mask`, skips tuning.
    pub k: Option<usize>,
    pub mask: Option<String>,
    pub fh_moments_fallback: bool,
    pub mapping: ColumnMapping,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            k_min: 1,
            k_max: 20,
            subsets: Subsets::default(),
            folds: 5,
            bootstrap: 500,
            cv_target: None,
            cv_per_area: false,
            seed: 1,
            estimators: Estimators::Hybrid,
            experiment: 0,
            k: None,
            mask: None,
            fh_moments_fallback: true,
            mapping: ColumnMapping::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Schema(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Validation(format!("config {}: {e}", path.display())))
    }

    pub fn ks(&self) -> Result<Vec<usize>> {
        if self.k_min == 0 || self.k_min > self.k_max {
            return Err(Error::Validation(format!(
                "k range {}..={} is empty",
                self.k_min, self.k_max
            )));
        }
        Ok((self.k_min..=self.k_max).collect())
    }

    pub fn bootstrap_plan(&self) -> BootstrapPlan {
        match self.cv_target {
            Some(target_cv) => BootstrapPlan::Auto {
                target_cv,
                per_area: self.cv_per_area,
            },
            None => BootstrapPlan::Fixed {
                replicates: self.bootstrap,
            },
        }
    }

    /// The fixed `(k, mask)` when both are given.
    pub fn chosen(&self, names: &[String]) -> Result<Option<(usize, FeatureMask)>> {
        match (self.k, &self.mask) {
            (Some(k), Some(m)) => Ok(Some((k, FeatureMask::parse(m, names)?))),
            (None, None) => Ok(None),
            _ => Err(Error::Validation("--k and --mask must be given together".into())),
        }
    }
}
