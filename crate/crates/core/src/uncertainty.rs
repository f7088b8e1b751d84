//! Uncertainty of the hybrid small-area totals.
//!
//! * Variance and expectation of the imputed part `T̂_{C_m \ D_m}` come from a
//!   fixed-k bootstrap: each sampled unit carries a pseudo-value
//!   `z_mi = y_i · K_km(i)` whose sum over the sample reproduces the imputed
//!   area total, and resampling those pseudo-values leaves the donor usage
//!   counts untouched.
//! * The relative imputation bias `e_m` is estimated by leave-one-out
//!   imputation of every donor from the rest of `D`.
//! * MSE, RTMSE, 95% intervals and the aggregate accuracy measures are
//!   assembled in [`assemble_report`].

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, Discrete};

use crate::error::{Error, Result};
use crate::frame::PopulationFrame;
use crate::hasd::FeatureMask;
use crate::imputer::{check_weights, find_neighbors_loo, DonorPool, DonorUsage};
use crate::rng;

/// Pseudo-values over the whole sample `A`, one sequence per area.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoValueSet {
    /// Frame rows of `A`, the index shared by every area's sequence.
    pub sample_rows: Vec<usize>,
    /// `ψ_m`, indexed by `area_id - 1`, each of length `|A|`.
    pub per_area: Vec<Vec<f64>>,
}

impl PseudoValueSet {
    /// `Σ_i z_mi` for each area.
    pub fn totals(&self) -> Vec<f64> {
        self.per_area.iter().map(|z| z.iter().sum()).collect()
    }
}

/// `z_mi = y_i K_km(i)` for every `i ∈ A`; units of `A \ C` are never donors
/// and carry zero.
pub fn pseudo_values(frame: &PopulationFrame, usage: &DonorUsage, w: &[f64]) -> Result<PseudoValueSet> {
    check_weights(w, usage.k())?;
    let sample_rows = frame.sample().to_vec();
    let per_area = (1..=frame.n_areas())
        .map(|area| {
            sample_rows
                .iter()
                .map(|&r| frame.observed_y(r) * usage.weighted(r, area, w))
                .collect()
        })
        .collect();
    Ok(PseudoValueSet { sample_rows, per_area })
}

/// Bootstrap moments of the imputed area totals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapEstimate {
    /// `Ê(T̂_{C_m \ D_m})`
    pub expected: Vec<f64>,
    /// `Var̂(T̂_m)` with divisor `B`.
    pub variance: Vec<f64>,
    pub replicates: usize,
}

/// Resample sums, `sums[b][m]`, for replicates `first..first + count`.
fn replicate_sums(psi: &PseudoValueSet, first: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let n = psi.sample_rows.len();
    (first..first + count)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::substream(seed, "bootstrap", b as u64);
            let mut sums = vec![0.0; psi.per_area.len()];
            for _ in 0..n {
                let i = r.random_range(0..n);
                for (s, z) in sums.iter_mut().zip(&psi.per_area) {
                    *s += z[i];
                }
            }
            sums
        })
        .collect()
}

/// Fixed-k bootstrap: `b` resamples of size `n = |A|` drawn with
/// replacement from the pseudo-values.
///
/// The same resampled units are used for every area within a replicate.
/// Replicate `b` draws from its own substream of `seed`, so results do not
/// depend on the number of worker threads.
pub fn fixed_k_bootstrap(psi: &PseudoValueSet, b: usize, seed: u64) -> Result<BootstrapEstimate> {
    if b < 2 {
        return Err(Error::Domain(format!("bootstrap needs B >= 2, got {b}")));
    }
    if psi.sample_rows.is_empty() {
        return Err(Error::Domain("bootstrap needs a non-empty sample".into()));
    }
    let sums = replicate_sums(psi, 0, b, seed);
    let m = psi.per_area.len();
    let bf = b as f64;
    let expected: Vec<f64> = (0..m).map(|a| sums.iter().map(|s| s[a]).sum::<f64>() / bf).collect();
    let variance = (0..m)
        .map(|a| sums.iter().map(|s| (s[a] - expected[a]).powi(2)).sum::<f64>() / bf)
        .collect();
    Ok(BootstrapEstimate {
        expected,
        variance,
        replicates: b,
    })
}

/// `B = ⌈(1.71 / CV_W)²⌉`, the replicate count giving a coefficient of
/// variation `cv_w` for the width of a 95% bootstrap interval.
pub fn bootstrap_size(cv_w: f64) -> Result<usize> {
    if !(cv_w > 0.0 && cv_w.is_finite()) {
        return Err(Error::Domain(format!("target CV must be positive, got {cv_w}")));
    }
    let b = (1.71 / cv_w).powi(2);
    // shave float noise so exact squares are not bumped up by one
    Ok(((b - 1e-9).ceil() as usize).max(1))
}

/// Measured variability of bootstrap interval widths.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WidthVariability {
    /// CV of the 95% percentile-interval width per area; `None` when the
    /// width is identically zero.
    pub per_area: Vec<Option<f64>>,
    /// Mean of the per-area values.
    pub pooled: f64,
    pub replicates_per_batch: usize,
    pub batches: usize,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// CV of the 95% percentile-interval width at `replicates` bootstrap
/// replicates, measured across `batches` independent pilot runs.
pub fn measure_width_cv(
    psi: &PseudoValueSet,
    replicates: usize,
    batches: usize,
    seed: u64,
) -> Result<WidthVariability> {
    if replicates < 2 || batches < 2 {
        return Err(Error::Domain("pilot needs at least 2 replicates and 2 batches".into()));
    }
    let m = psi.per_area.len();
    let mut widths = vec![Vec::with_capacity(batches); m];
    for batch in 0..batches {
        let sums = replicate_sums(psi, batch * replicates, replicates, rng::derive_seed(seed, "pilot", 0));
        for (a, wa) in widths.iter_mut().enumerate() {
            let mut col: Vec<f64> = sums.iter().map(|s| s[a]).collect();
            col.sort_by(f64::total_cmp);
            wa.push(percentile(&col, 0.975) - percentile(&col, 0.025));
        }
    }
    let per_area: Vec<Option<f64>> = widths
        .iter()
        .map(|w| {
            let n = w.len() as f64;
            let mean = w.iter().sum::<f64>() / n;
            (mean > 0.0).then(|| {
                let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
                var.sqrt() / mean
            })
        })
        .collect();
    let defined: Vec<f64> = per_area.iter().flatten().copied().collect();
    let pooled = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok(WidthVariability {
        per_area,
        pooled,
        replicates_per_batch: replicates,
        batches,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasMethod {
    PerArea,
    Pooled,
}

/// Leave-one-out relative imputation bias.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasEstimate {
    /// `ê_m`, indexed by `area_id - 1`.
    pub per_area: Vec<f64>,
    pub method: Vec<BiasMethod>,
    /// `χ_m`: `(y, ŷ)` pairs of the area's donors.
    pub pairs: Vec<Vec<(f64, f64)>>,
    /// The all-area ratio used where the per-area ratio is unstable.
    pub pooled: f64,
}

/// Imputes every donor from its `k` nearest neighbours in `D` minus itself
/// with weights `w`, then forms `ê_m = Σ(ŷ - y) / Σ ŷ` over the area's pairs.
///
/// The per-area ratio is replaced by the pooled ratio over all areas when it
/// is unstable: `Σ ŷ ≤ 5` over the area for a binary response, or
/// `n_{D_m} ≤ 5` otherwise.
pub fn estimate_bias(frame: &PopulationFrame, k: usize, mask: &FeatureMask, w: &[f64]) -> Result<BiasEstimate> {
    check_weights(w, k)?;
    let donors = frame.donors();
    if donors.len() <= k {
        return Err(Error::Capacity(format!(
            "leave-one-out needs |D| > k, have |D| = {} and k = {k}",
            donors.len()
        )));
    }
    let pool = DonorPool::new(frame, donors, mask)?;
    let predictions: Vec<f64> = donors
        .par_iter()
        .map(|&r| find_neighbors_loo(frame, r, &pool, k).map(|s| s.weighted(w)))
        .collect::<Result<_>>()?;

    let binary = donors
        .iter()
        .all(|&r| matches!(frame.observed_y(r), y if y == 0.0 || y == 1.0));
    let mut pairs = vec![Vec::new(); frame.n_areas()];
    for (&r, &yhat) in donors.iter().zip(&predictions) {
        pairs[frame.unit(r).area_id - 1].push((frame.observed_y(r), yhat));
    }
    let ratio = |ps: &mut dyn Iterator<Item = &(f64, f64)>| -> (f64, f64) {
        ps.fold((0.0, 0.0), |(num, den), &(y, yh)| (num + yh - y, den + yh))
    };
    let (num, den) = ratio(&mut pairs.iter().flatten());
    let pooled = if den != 0.0 { num / den } else { 0.0 };

    let mut per_area = Vec::with_capacity(pairs.len());
    let mut method = Vec::with_capacity(pairs.len());
    for chi in &pairs {
        let (num, den) = ratio(&mut chi.iter());
        let unstable = if binary {
            den <= 5.0
        } else {
            chi.len() <= 5 || den == 0.0
        };
        if unstable {
            per_area.push(pooled);
            method.push(BiasMethod::Pooled);
        } else {
            per_area.push(num / den);
            method.push(BiasMethod::PerArea);
        }
    }
    Ok(BiasEstimate {
        per_area,
        method,
        pairs,
        pooled,
    })
}

/// One area's row of the report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AreaReport {
    pub area_id: usize,
    pub estimate: f64,
    pub variance: f64,
    pub expected: f64,
    pub bias: f64,
    pub mse: f64,
    pub rtmse: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub truth: Option<f64>,
    pub covered: Option<bool>,
}

/// Accuracy aggregates over areas.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregates {
    /// Mean `|T̂_m - T_m|`; needs truth.
    pub aaee: Option<f64>,
    /// Mean `RTMSE_m / T̂_m` over areas with `T̂_m > 0`.
    pub arrtmse: f64,
    /// Share of areas whose interval covers the truth.
    pub coverage: Option<f64>,
    /// Two-sided exact binomial p-value of the coverage against 0.95.
    pub coverage_p_value: Option<f64>,
    /// Coverage not significantly different from 0.95 at the 5% level.
    pub coverage_consistent: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmallAreaReport {
    pub areas: Vec<AreaReport>,
    pub aggregates: Aggregates,
}

/// Normal quantile used for the 95% intervals.
pub const Z_95: f64 = 1.96;

/// Two-sided exact binomial test p-value, summing the probabilities of all
/// outcomes no more likely than the observed one.
pub fn binomial_two_sided_p(successes: u64, trials: u64, p: f64) -> f64 {
    let dist = Binomial::new(p, trials).expect("valid binomial parameters");
    let observed = dist.pmf(successes);
    let tol = observed * (1.0 + 1e-7);
    let total: f64 = (0..=trials).map(|x| dist.pmf(x)).filter(|&q| q <= tol).sum();
    total.min(1.0)
}

/// Builds per-area MSE (`Var̂ + Ê² ê²`), RTMSE, 95% intervals and, given the
/// true totals, AAEE and coverage.
pub fn assemble_report(
    estimates: &[f64],
    variances: &[f64],
    expected: &[f64],
    biases: &[f64],
    truth: Option<&[f64]>,
) -> Result<SmallAreaReport> {
    let m = estimates.len();
    let aligned =
        variances.len() == m && expected.len() == m && biases.len() == m && truth.is_none_or(|t| t.len() == m);
    if !aligned {
        return Err(Error::Alignment(format!(
            "inputs cover {m}, {}, {}, {} and {:?} areas",
            variances.len(),
            expected.len(),
            biases.len(),
            truth.map(<[f64]>::len)
        )));
    }
    let areas: Vec<AreaReport> = (0..m)
        .map(|i| {
            let mse = variances[i] + expected[i].powi(2) * biases[i].powi(2);
            let rtmse = mse.sqrt();
            let (lo, hi) = (estimates[i] - Z_95 * rtmse, estimates[i] + Z_95 * rtmse);
            let t = truth.map(|t| t[i]);
            AreaReport {
                area_id: i + 1,
                estimate: estimates[i],
                variance: variances[i],
                expected: expected[i],
                bias: biases[i],
                mse,
                rtmse,
                ci_lo: lo,
                ci_hi: hi,
                truth: t,
                covered: t.map(|t| lo <= t && t <= hi),
            }
        })
        .collect();
    let aggregates = aggregate(&areas);
    Ok(SmallAreaReport { areas, aggregates })
}

/// AAEE / ARRTMSE / coverage of a set of area rows.
pub fn aggregate(areas: &[AreaReport]) -> Aggregates {
    let m = areas.len() as f64;
    let positive: Vec<f64> = areas
        .iter()
        .filter(|a| a.estimate > 0.0)
        .map(|a| a.rtmse / a.estimate)
        .collect();
    let arrtmse = if positive.is_empty() {
        0.0
    } else {
        positive.iter().sum::<f64>() / positive.len() as f64
    };
    let has_truth = !areas.is_empty() && areas.iter().all(|a| a.truth.is_some());
    if !has_truth {
        return Aggregates {
            aaee: None,
            arrtmse,
            coverage: None,
            coverage_p_value: None,
            coverage_consistent: None,
        };
    }
    let aaee = areas.iter().map(|a| (a.estimate - a.truth.unwrap()).abs()).sum::<f64>() / m;
    let covered = areas.iter().filter(|a| a.covered == Some(true)).count() as u64;
    let p = binomial_two_sided_p(covered, areas.len() as u64, 0.95);
    Aggregates {
        aaee: Some(aaee),
        arrtmse,
        coverage: Some(covered as f64 / m),
        coverage_p_value: Some(p),
        coverage_consistent: Some(p >= 0.05),
    }
}

/// Writes `area,T_m,T_hat,RTMSE,CI_lo,CI_hi,covered`; the truth columns are
/// present only when every area has a true total.
pub fn write_report_csv<W: Write>(report: &SmallAreaReport, writer: W) -> Result<()> {
    let has_truth = report.aggregates.aaee.is_some();
    let mut w = csv::Writer::from_writer(writer);
    if has_truth {
        w.write_record(["area", "T_m", "T_hat", "RTMSE", "CI_lo", "CI_hi", "covered"])?;
    } else {
        w.write_record(["area", "T_hat", "RTMSE", "CI_lo", "CI_hi"])?;
    }
    for a in &report.areas {
        let mut row = vec![a.area_id.to_string()];
        if let Some(t) = a.truth {
            row.push(t.to_string());
        }
        row.extend([a.estimate, a.rtmse, a.ci_lo, a.ci_hi].map(|x| x.to_string()));
        if let Some(c) = a.covered {
            row.push(u8::from(c).to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
