//! Synthetic populations, big-data selection, sampling and Monte Carlo
//! evaluation against known truth.
//!
//! Every random step draws from a labelled substream of one root seed, so a
//! scenario and seed fix every number in a report regardless of thread count.

use std::io::Write;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::data_integrator;
use crate::error::{Error, Result};
use crate::fh::{CovariateDesign, FhOptions};
use crate::frame::{PopulationFrame, UnitRecord};
use crate::hasd::FeatureMask;
use crate::pipeline::{run_fh, run_fh_inputs, run_hybrid, BootstrapPlan, HybridConfig};
use crate::rng::{derive_seed, substream};
use crate::tuning::all_subsets;
use crate::uncertainty::Aggregates;

/// One categorical feature of the synthetic population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    /// Codes run `1..=categories`.
    pub categories: usize,
    /// Log-odds of `y = 1` per unit increase of the code.
    pub effect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PopulationSpec {
    pub n: usize,
    pub m: usize,
    /// Range of the per-area share of `y = 1`.
    pub rate_range: (f64, f64),
    pub features: Vec<FeatureSpec>,
    /// Population shares of the three big-data regions. Areas are split into
    /// three contiguous groups of near-equal count; without shares every area
    /// has the same expected size.
    pub region_shares: Option<[f64; 3]>,
    /// Relative spread of area sizes within a region, in `[0, 1)`.
    pub size_spread: f64,
    /// Strength of area-specific tilts of the feature distributions.
    pub area_tilt: f64,
    /// Standard deviation of an area effect on the log-odds of `y = 1` not
    /// explained by the features.
    pub area_effect_sd: f64,
}

impl Default for PopulationSpec {
    fn default() -> Self {
        PopulationSpec::reference()
    }
}

impl PopulationSpec {
    /// Census-like layout: 173,021 units in 56 areas with area rates between
    /// 11% and 31%.
    pub fn reference() -> Self {
        let feature = |name: &str, categories, effect| FeatureSpec {
            name: name.into(),
            categories,
            effect,
        };
        PopulationSpec {
            n: 173_021,
            m: 56,
            rate_range: (0.11, 0.31),
            features: vec![
                feature("age", 7, 2.1),
                feature("birth_region", 5, -1.8),
                feature("labour_force", 3, -3.6),
                feature("sex", 2, 1.8),
            ],
            region_shares: Some([0.107, 0.31, 0.583]),
            size_spread: 0.6,
            area_tilt: 0.2,
            area_effect_sd: 0.1,
        }
    }

    /// The reference layout with `n` units.
    pub fn scaled(n: usize) -> Self {
        PopulationSpec {
            n,
            ..PopulationSpec::reference()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.rate_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::Spec(format!("rate range [{lo}, {hi}] is not inside (0, 1)")));
        }
        if self.m == 0 || self.n < self.m {
            return Err(Error::Spec(format!("{} units cannot fill {} areas", self.n, self.m)));
        }
        if self.features.is_empty() || self.features.iter().any(|f| f.categories == 0 || !f.effect.is_finite()) {
            return Err(Error::Spec(
                "features need at least one category and a finite effect".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.size_spread)
            || self.area_tilt.is_nan()
            || self.area_tilt < 0.0
            || self.area_effect_sd.is_nan()
            || self.area_effect_sd < 0.0
        {
            return Err(Error::Spec(
                "size spread must lie in [0, 1); tilt and area effect must be non-negative".into(),
            ));
        }
        if let Some(s) = self.region_shares {
            if s.iter().any(|&v| v.is_nan() || v <= 0.0) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(Error::Spec(format!(
                    "region shares {s:?} must be positive and sum to 1"
                )));
            }
            if self.m < 3 {
                return Err(Error::Spec("region shares need at least 3 areas".into()));
            }
        }
        Ok(())
    }
}

/// Region `1..=3` of each area: contiguous groups, the remainder going to
/// regions 1 and 3.
pub fn contiguous_regions(m: usize) -> Vec<u8> {
    let base = m / 3;
    let counts = match m % 3 {
        0 => [base, base, base],
        1 => [base + 1, base, base],
        _ => [base + 1, base, base + 1],
    };
    counts
        .iter()
        .enumerate()
        .flat_map(|(r, &c)| std::iter::repeat_n(r as u8 + 1, c))
        .collect()
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Splits `total` into integer parts proportional to `weights` by largest
/// remainder.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut parts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    let short = total - parts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        parts[i] += 1;
    }
    parts
}

/// Synthetic population with its truth.
#[derive(Debug, Clone)]
pub struct SyntheticPopulation {
    /// Every unit carries `y`; no big data or sample yet.
    pub frame: PopulationFrame,
    pub truth: Vec<f64>,
    pub regions: Vec<u8>,
    /// Realised share of `y = 1` per area.
    pub rates: Vec<f64>,
}

/// Draws a population from `spec`.
///
/// Units get `P(y = 1)` logistic in their feature codes plus an area effect,
/// with a global intercept putting the overall rate mid-range. Each area then
/// receives exactly its expected count of positives, kept inside the rate
/// range, chosen by weighted sampling without replacement with the odds as
/// weights.
pub fn synthesize_population(spec: &PopulationSpec, seed: u64) -> Result<SyntheticPopulation> {
    spec.validate()?;
    let regions = contiguous_regions(spec.m);
    let mut rng = substream(seed, "population", 0);

    let jitter: Vec<f64> = (0..spec.m)
        .map(|_| 1.0 + spec.size_spread * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    let weights: Vec<f64> = match spec.region_shares {
        Some(shares) => {
            let mut in_region = [0.0; 3];
            for (r, j) in regions.iter().zip(&jitter) {
                in_region[*r as usize - 1] += j;
            }
            regions
                .iter()
                .zip(&jitter)
                .map(|(r, j)| shares[*r as usize - 1] * j / in_region[*r as usize - 1])
                .collect()
        }
        None => jitter,
    };
    let sizes = apportion(spec.n, &weights);
    if let Some(a) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Spec(format!("area {} receives no units; increase n", a + 1)));
    }

    struct AreaDraw {
        features: Vec<Vec<f64>>,
        /// Linear predictor without the global intercept.
        score: Vec<f64>,
        rng: rand_chacha::ChaCha8Rng,
    }
    let draws: Vec<AreaDraw> = sizes
        .iter()
        .enumerate()
        .map(|(a, &size)| {
            let mut arng = substream(seed, "population-area", a as u64);
            let cumulative: Vec<Vec<f64>> = spec
                .features
                .iter()
                .map(|f| {
                    let t = spec.area_tilt * (2.0 * arng.random::<f64>() - 1.0);
                    let mid = (f.categories as f64 + 1.0) / 2.0;
                    let w: Vec<f64> = (1..=f.categories).map(|code| (t * (code as f64 - mid)).exp()).collect();
                    let s: f64 = w.iter().sum();
                    w.iter()
                        .scan(0.0, |acc, x| {
                            *acc += x / s;
                            Some(*acc)
                        })
                        .collect()
                })
                .collect();
            let effect = spec.area_effect_sd * standard_normal(&mut arng);
            let features: Vec<Vec<f64>> = (0..size)
                .map(|_| {
                    cumulative
                        .iter()
                        .map(|cum| {
                            let u: f64 = arng.random();
                            (cum.iter().position(|&c| u < c).unwrap_or(cum.len() - 1) + 1) as f64
                        })
                        .collect()
                })
                .collect();
            let score = features
                .iter()
                .map(|x| effect + x.iter().zip(&spec.features).map(|(v, f)| v * f.effect).sum::<f64>())
                .collect();
            AreaDraw {
                features,
                score,
                rng: arng,
            }
        })
        .collect();

    // global intercept putting the expected overall rate mid-range
    let (lo, hi) = spec.rate_range;
    let target = 0.5 * (lo + hi);
    let mean_prob = |alpha: f64| {
        draws
            .iter()
            .flat_map(|d| &d.score)
            .map(|s| logistic(alpha + s))
            .sum::<f64>()
            / spec.n as f64
    };
    let (mut a_lo, mut a_hi) = (-30.0, 30.0);
    for _ in 0..100 {
        let mid = 0.5 * (a_lo + a_hi);
        if mean_prob(mid) < target {
            a_lo = mid;
        } else {
            a_hi = mid;
        }
    }
    let alpha = 0.5 * (a_lo + a_hi);

    let mut units = Vec::with_capacity(spec.n);
    let mut truth = Vec::with_capacity(spec.m);
    let mut rates = Vec::with_capacity(spec.m);
    let mut next_id = 1u64;
    for (a, mut d) in draws.into_iter().enumerate() {
        let size = d.features.len();
        let expected: f64 = d.score.iter().map(|s| logistic(alpha + s)).sum();
        let min_pos = (lo * size as f64).ceil() as usize;
        let max_pos = (hi * size as f64).floor() as usize;
        let mut positives = expected.round() as usize;
        if min_pos <= max_pos {
            positives = positives.clamp(min_pos, max_pos);
        }
        // Efraimidis–Spirakis keys ln(u) / w with odds weights, largest first
        let mut keys: Vec<(f64, usize)> = d
            .score
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let u: f64 = 1.0 - d.rng.random::<f64>();
                (u.ln() / (alpha + s).exp(), i)
            })
            .collect();
        keys.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut y = vec![0.0; size];
        for &(_, i) in keys.iter().take(positives) {
            y[i] = 1.0;
        }
        for (x, yi) in d.features.into_iter().zip(y) {
            units.push(UnitRecord {
                unit_id: next_id,
                area_id: a + 1,
                features: x,
                y: Some(yi),
                delta: false,
                in_sample: false,
                design_weight: 0.0,
            });
            next_id += 1;
        }
        truth.push(positives as f64);
        rates.push(positives as f64 / size as f64);
    }
    let names = spec.features.iter().map(|f| f.name.clone()).collect();
    let frame = PopulationFrame::new(units, spec.m, names)?;
    Ok(SyntheticPopulation {
        frame,
        truth,
        regions,
        rates,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BigDataSummary {
    pub n_b: usize,
    pub volunteers_in_b: usize,
    /// `|B| / N`
    pub share_of_population: f64,
    /// Share of all `y = 1` units that are in `B`.
    pub share_of_volunteers: f64,
}

/// Sets `δ` by the three-region scheme: region 1 keeps half of the `y = 1`
/// units of each area, region 2 half of the `y = 0` units, region 3 a random
/// 80% of all units. Region labels are not stored on the output.
pub fn select_big_data(
    frame: &PopulationFrame,
    regions: &[u8],
    seed: u64,
) -> Result<(PopulationFrame, BigDataSummary)> {
    if regions.len() != frame.n_areas() {
        return Err(Error::Region(format!(
            "{} region labels for {} areas",
            regions.len(),
            frame.n_areas()
        )));
    }
    if let Some(a) = regions.iter().position(|r| !(1..=3).contains(r)) {
        return Err(Error::Region(format!("area {} has region {}", a + 1, regions[a])));
    }
    let binary = frame
        .units()
        .iter()
        .all(|u| matches!(u.y, Some(y) if y == 0.0 || y == 1.0));
    if !binary {
        return Err(Error::Validation(
            "big-data selection needs a complete binary response".into(),
        ));
    }
    let mut units = frame.units().to_vec();
    for u in &mut units {
        u.delta = false;
    }
    for (a, slice) in frame.areas().iter().enumerate() {
        let (mut stratum, share): (Vec<usize>, f64) = match regions[a] {
            1 => (
                slice
                    .units
                    .iter()
                    .copied()
                    .filter(|&r| frame.unit(r).y == Some(1.0))
                    .collect(),
                0.5,
            ),
            2 => (
                slice
                    .units
                    .iter()
                    .copied()
                    .filter(|&r| frame.unit(r).y == Some(0.0))
                    .collect(),
                0.5,
            ),
            _ => (slice.units.clone(), 0.8),
        };
        let mut rng = substream(seed, "big-data", a as u64);
        stratum.shuffle(&mut rng);
        let take = (share * stratum.len() as f64).round() as usize;
        for &r in &stratum[..take] {
            units[r].delta = true;
        }
    }
    let n_b = units.iter().filter(|u| u.delta).count();
    let volunteers_in_b = units.iter().filter(|u| u.delta && u.y == Some(1.0)).count();
    let volunteers = units.iter().filter(|u| u.y == Some(1.0)).count();
    let out = PopulationFrame::new(units, frame.n_areas(), frame.feature_names().to_vec())?;
    let summary = BigDataSummary {
        n_b,
        volunteers_in_b,
        share_of_population: n_b as f64 / out.len() as f64,
        share_of_volunteers: if volunteers > 0 {
            volunteers_in_b as f64 / volunteers as f64
        } else {
            0.0
        },
    };
    Ok((out, summary))
}

/// Simple random sample of `n` units without replacement, each with design
/// weight `N / n`. Any previous sample is replaced.
pub fn draw_srs(frame: &PopulationFrame, n: usize, seed: u64) -> Result<PopulationFrame> {
    let big_n = frame.len();
    if n > big_n {
        return Err(Error::Capacity(format!("sample of {n} from a population of {big_n}")));
    }
    if n == 0 {
        return Err(Error::Domain("sample size must be positive".into()));
    }
    let mut rng = substream(seed, "sample", 0);
    let picked = index::sample(&mut rng, big_n, n);
    let mut units = frame.units().to_vec();
    for u in &mut units {
        u.in_sample = false;
        u.design_weight = 0.0;
    }
    let d = big_n as f64 / n as f64;
    for r in picked.iter() {
        units[r].in_sample = true;
        units[r].design_weight = d;
    }
    PopulationFrame::new(units, frame.n_areas(), frame.feature_names().to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    /// No deletion.
    Full,
    /// Block `b` loses `5(b+1)%` of its records in age group `b+1`.
    One,
    /// Block `b` loses `35 + 5b` percent of all its records.
    Two,
}

impl Experiment {
    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Experiment::Full),
            1 => Ok(Experiment::One),
            2 => Ok(Experiment::Two),
            _ => Err(Error::Domain(format!("experiment must be 0, 1 or 2, got {id}"))),
        }
    }
}

/// Covariates after record deletion.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Undercoverage {
    pub covariates: Vec<Vec<f64>>,
    /// Deleted records per area.
    pub deleted: Vec<usize>,
    /// Deletion rate applied to the targeted records of each area.
    pub rates: Vec<f64>,
}

/// Deletes records area by area and recomputes the covariate totals; the
/// response and the sample are left alone. Areas are grouped into seven
/// contiguous blocks of `⌈M/7⌉`.
pub fn apply_undercoverage(
    frame: &PopulationFrame,
    design: &CovariateDesign,
    experiment: Experiment,
    seed: u64,
) -> Result<Undercoverage> {
    let m = frame.n_areas();
    let block_size = m.div_ceil(7);
    let age = match experiment {
        Experiment::One => Some(
            frame
                .feature_names()
                .iter()
                .position(|n| n == "age")
                .ok_or_else(|| Error::Spec("experiment 1 needs an `age` feature".into()))?,
        ),
        _ => None,
    };
    let mut keep = vec![true; frame.len()];
    let mut deleted = Vec::with_capacity(m);
    let mut rates = Vec::with_capacity(m);
    for (a, slice) in frame.areas().iter().enumerate() {
        let block = a / block_size;
        let (mut targets, rate): (Vec<usize>, f64) = match experiment {
            Experiment::Full => (Vec::new(), 0.0),
            Experiment::One => {
                let j = age.expect("set for experiment 1");
                let level = design.levels[j].get(block).copied();
                let rows = slice
                    .units
                    .iter()
                    .copied()
                    .filter(|&r| Some(frame.unit(r).features[j]) == level)
                    .collect();
                (rows, 0.05 * (block + 1) as f64)
            }
            Experiment::Two => (slice.units.clone(), 0.35 + 0.05 * block as f64),
        };
        let mut rng = substream(seed, "undercoverage", a as u64);
        targets.shuffle(&mut rng);
        let drop = (rate * targets.len() as f64).round() as usize;
        for &r in &targets[..drop] {
            keep[r] = false;
        }
        deleted.push(drop);
        rates.push(rate);
    }
    let kept = frame.units().iter().zip(&keep).filter(|(_, k)| **k).map(|(u, _)| u);
    Ok(Undercoverage {
        covariates: design.totals(kept, m),
        deleted,
        rates,
    })
}

/// A population with big data and a sample, ready for estimation.
#[derive(Debug, Clone)]
pub struct ScenarioData {
    /// Complete frame: `y` on every unit.
    pub frame: PopulationFrame,
    pub truth: Vec<f64>,
    pub regions: Vec<u8>,
    pub big_data: BigDataSummary,
}

impl ScenarioData {
    /// What an analyst holds: `y` only on `B ∪ A`.
    pub fn observed(&self) -> PopulationFrame {
        self.frame.mask_unobserved()
    }
}

/// Population and big data for `seed`, then a sample of `n`.
pub fn build_scenario(spec: &PopulationSpec, n: usize, seed: u64) -> Result<ScenarioData> {
    let pop = synthesize_population(spec, derive_seed(seed, "population", 0))?;
    let (with_b, big_data) = select_big_data(&pop.frame, &pop.regions, derive_seed(seed, "big-data", 0))?;
    let frame = draw_srs(&with_b, n, derive_seed(seed, "sample", 0))?;
    Ok(ScenarioData {
        frame,
        truth: pop.truth,
        regions: pop.regions,
        big_data,
    })
}

/// Efficiency of the integrator relative to the plain expansion estimator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficiencyDiagnostics {
    /// `W_B = N_B / N`
    pub w_b: f64,
    /// Variance of `y` over `C`, divisor `N_C - 1`.
    pub s2_c: f64,
    /// Variance of `y` over `U`, divisor `N - 1`.
    pub s2: f64,
    /// Mean of `y` over `C`.
    pub ybar_c: f64,
    /// True population total.
    pub t_true: f64,
    /// `(1 - W_B) S_C² / S²`
    pub ratio_theory: f64,
    pub mean_t_p: f64,
    pub var_t_p: f64,
    pub mean_t_a: f64,
    pub var_t_a: f64,
    /// Empirical `Var(T̂_p) / Var(T̂_A)`.
    pub ratio_empirical: f64,
    /// Mean of `T̂ - T` over replicates and its Monte Carlo standard error.
    pub bias_t_p: f64,
    pub se_bias_t_p: f64,
    pub bias_t_a: f64,
    pub se_bias_t_a: f64,
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

/// Population moments behind the closed-form variance ratio. `frame` must
/// carry `y` on every unit and `δ` from the big-data selection.
pub fn population_moments(frame: &PopulationFrame) -> Result<(f64, f64, f64, f64, f64)> {
    let all: Vec<f64> = frame
        .units()
        .iter()
        .map(|u| {
            u.y.ok_or_else(|| Error::Validation(format!("unit {} has no response", u.unit_id)))
        })
        .collect::<Result<_>>()?;
    let c: Vec<f64> = frame
        .units()
        .iter()
        .zip(&all)
        .filter(|(u, _)| !u.delta)
        .map(|(_, y)| *y)
        .collect();
    let (_, s2) = mean_var(&all);
    let (ybar_c, s2_c) = if c.is_empty() { (0.0, 0.0) } else { mean_var(&c) };
    let w_b = 1.0 - c.len() as f64 / all.len() as f64;
    Ok((w_b, s2_c, s2, ybar_c, all.iter().sum()))
}

/// `(T̂_p, T̂_A)` over `replicates` independent samples of size `n` from a
/// fixed population with big data.
pub fn integrator_replicates(
    frame: &PopulationFrame,
    n: usize,
    replicates: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    (0..replicates)
        .into_par_iter()
        .map(|r| {
            let s = draw_srs(frame, n, derive_seed(seed, "sample", r as u64))?;
            let t_p = data_integrator(&s)?.t_p;
            let t_a: f64 = s
                .sample()
                .iter()
                .map(|&i| s.unit(i).design_weight * s.observed_y(i))
                .sum();
            Ok((t_p, t_a))
        })
        .collect()
}

/// Efficiency diagnostics for a fixed population from `(T̂_p, T̂_A)` pairs.
pub fn efficiency_diagnostics(frame: &PopulationFrame, estimates: &[(f64, f64)]) -> Result<EfficiencyDiagnostics> {
    if estimates.is_empty() {
        return Err(Error::Domain("no replicates".into()));
    }
    let (w_b, s2_c, s2, ybar_c, t_true) = population_moments(frame)?;
    let tp: Vec<f64> = estimates.iter().map(|e| e.0).collect();
    let ta: Vec<f64> = estimates.iter().map(|e| e.1).collect();
    let (mean_t_p, var_t_p) = mean_var(&tp);
    let (mean_t_a, var_t_a) = mean_var(&ta);
    let r = estimates.len() as f64;
    Ok(EfficiencyDiagnostics {
        w_b,
        s2_c,
        s2,
        ybar_c,
        t_true,
        ratio_theory: if s2 > 0.0 { (1.0 - w_b) * s2_c / s2 } else { 0.0 },
        mean_t_p,
        var_t_p,
        mean_t_a,
        var_t_a,
        ratio_empirical: if var_t_a > 0.0 { var_t_p / var_t_a } else { 0.0 },
        bias_t_p: mean_t_p - t_true,
        se_bias_t_p: (var_t_p / r).sqrt(),
        bias_t_a: mean_t_a - t_true,
        se_bias_t_a: (var_t_a / r).sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HybridSettings {
    pub k_min: usize,
    pub k_max: usize,
    /// Feature subsets as index lists; every non-empty subset when absent.
    pub subsets: Option<Vec<FeatureMask>>,
    pub folds: usize,
    pub bootstrap: BootstrapPlan,
    /// Fixed `(k, subset)`; skips tuning.
    pub chosen: Option<(usize, FeatureMask)>,
}

impl Default for HybridSettings {
    fn default() -> Self {
        HybridSettings {
            k_min: 1,
            k_max: 20,
            subsets: None,
            folds: 5,
            bootstrap: BootstrapPlan::Fixed { replicates: 500 },
            chosen: None,
        }
    }
}

impl HybridSettings {
    pub fn config(&self, n_features: usize, seed: u64) -> Result<HybridConfig> {
        if self.k_min == 0 || self.k_min > self.k_max {
            return Err(Error::Domain(format!(
                "k range {}..={} is empty",
                self.k_min, self.k_max
            )));
        }
        Ok(HybridConfig {
            ks: (self.k_min..=self.k_max).collect(),
            subsets: self.subsets.clone().unwrap_or_else(|| all_subsets(n_features)),
            folds: self.folds,
            bootstrap: self.bootstrap,
            seed,
            chosen: self.chosen.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonteCarloConfig {
    pub replicates: usize,
    /// Size of the probability sample.
    pub sample_size: usize,
    /// Keep one population and big data for all replicates; otherwise each
    /// replicate draws its own.
    pub fixed_population: bool,
    pub hybrid: bool,
    pub fh: bool,
    /// Also fit FH on the covariates of Experiments 1 and 2.
    pub experiments: bool,
    pub hybrid_settings: HybridSettings,
    pub fh_options: FhOptions,
    pub seed: u64,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        MonteCarloConfig {
            replicates: 1,
            sample_size: 1730,
            fixed_population: true,
            hybrid: true,
            fh: true,
            experiments: true,
            hybrid_settings: HybridSettings::default(),
            fh_options: FhOptions::default(),
            seed: 1,
        }
    }
}

/// Scenario file: population spec plus run settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Scenario {
    pub population: PopulationSpec,
    pub run: MonteCarloConfig,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Spec(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Spec(format!("cannot read scenario {}: {e}", path.display())))?;
        Scenario::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Spec(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HybridSummary {
    pub k: usize,
    pub mask: String,
    pub w: Vec<f64>,
    pub fallback: bool,
    pub bootstrap_replicates: usize,
    pub aggregates: Aggregates,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FhSummary {
    pub sigma2_u: f64,
    pub method: crate::fh::FitMethod,
    pub aggregates: Aggregates,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub t_true: f64,
    pub t_p: f64,
    pub t_a: f64,
    pub hybrid: Option<HybridSummary>,
    pub fh: Option<FhSummary>,
    pub fh_experiment1: Option<FhSummary>,
    pub fh_experiment2: Option<FhSummary>,
    /// Estimators that failed in this replicate, with their errors.
    pub errors: Vec<String>,
}

/// Mean and median of an aggregate over the replicates where it exists.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorSummary {
    pub runs: usize,
    pub mean_aaee: f64,
    pub median_aaee: f64,
    pub mean_arrtmse: f64,
    pub mean_coverage: f64,
}

impl EstimatorSummary {
    fn from_aggregates(aggs: &[&Aggregates]) -> Option<Self> {
        if aggs.is_empty() {
            return None;
        }
        let n = aggs.len() as f64;
        let mut aaee: Vec<f64> = aggs.iter().filter_map(|a| a.aaee).collect();
        aaee.sort_by(f64::total_cmp);
        let median = if aaee.is_empty() {
            f64::NAN
        } else if aaee.len() % 2 == 1 {
            aaee[aaee.len() / 2]
        } else {
            0.5 * (aaee[aaee.len() / 2 - 1] + aaee[aaee.len() / 2])
        };
        Some(EstimatorSummary {
            runs: aggs.len(),
            mean_aaee: aaee.iter().sum::<f64>() / aaee.len().max(1) as f64,
            median_aaee: median,
            mean_arrtmse: aggs.iter().map(|a| a.arrtmse).sum::<f64>() / n,
            mean_coverage: aggs.iter().filter_map(|a| a.coverage).sum::<f64>() / n,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloReport {
    pub diagnostics: EfficiencyDiagnostics,
    pub big_data: BigDataSummary,
    pub hybrid: Option<EstimatorSummary>,
    pub fh: Option<EstimatorSummary>,
    pub fh_experiment1: Option<EstimatorSummary>,
    pub fh_experiment2: Option<EstimatorSummary>,
    pub replicates: Vec<ReplicateResult>,
}

struct PreparedPopulation {
    frame: PopulationFrame,
    truth: Vec<f64>,
    big_data: BigDataSummary,
    design: CovariateDesign,
}

fn prepare(spec: &PopulationSpec, seed: u64, index: u64) -> Result<PreparedPopulation> {
    let pop = synthesize_population(spec, derive_seed(seed, "population", index))?;
    let (frame, big_data) = select_big_data(&pop.frame, &pop.regions, derive_seed(seed, "big-data", index))?;
    let design = CovariateDesign::from_frame(&frame);
    Ok(PreparedPopulation {
        frame,
        truth: pop.truth,
        big_data,
        design,
    })
}

fn fh_summary(run: &crate::pipeline::FhRun) -> FhSummary {
    FhSummary {
        sigma2_u: run.model.sigma2_u,
        method: run.model.method,
        aggregates: run.report.aggregates.clone(),
    }
}

fn run_replicate(pop: &PreparedPopulation, config: &MonteCarloConfig, r: usize) -> Result<ReplicateResult> {
    let seed = config.seed;
    let sampled = draw_srs(&pop.frame, config.sample_size, derive_seed(seed, "sample", r as u64))?;
    let observed = sampled.mask_unobserved();
    let t_true: f64 = pop.truth.iter().sum();
    let t_p = data_integrator(&observed)?.t_p;
    let t_a = observed
        .sample()
        .iter()
        .map(|&i| observed.unit(i).design_weight * observed.observed_y(i))
        .sum();
    let truth = Some(pop.truth.as_slice());
    let mut errors = Vec::new();

    let hybrid = if config.hybrid {
        let hc = config
            .hybrid_settings
            .config(observed.n_features(), derive_seed(seed, "hybrid", r as u64))?;
        match run_hybrid(&observed, &hc, truth) {
            Ok(run) => Some(HybridSummary {
                k: run.k,
                mask: run.mask.label(observed.feature_names()),
                w: run.calibration.w.clone(),
                fallback: run.calibration.fallback,
                bootstrap_replicates: run.bootstrap.replicates,
                aggregates: run.report.aggregates,
            }),
            Err(e) => {
                errors.push(format!("hybrid: {e}"));
                None
            }
        }
    } else {
        None
    };

    let mut fh = None;
    let mut exp = [None, None];
    if config.fh {
        match run_fh(&observed, &config.fh_options, truth) {
            Ok(run) => {
                fh = Some(fh_summary(&run));
                if config.experiments {
                    for (slot, (e, label)) in exp
                        .iter_mut()
                        .zip([(Experiment::One, "fh-1"), (Experiment::Two, "fh-2")])
                    {
                        let under = apply_undercoverage(
                            &pop.frame,
                            &pop.design,
                            e,
                            derive_seed(seed, "undercoverage", r as u64),
                        )?;
                        let inputs = run.inputs.with_covariates(under.covariates)?;
                        match run_fh_inputs(inputs, &config.fh_options, truth) {
                            Ok(x) => *slot = Some(fh_summary(&x)),
                            Err(err) => errors.push(format!("{label}: {err}")),
                        }
                    }
                }
            }
            Err(e) => errors.push(format!("fh: {e}")),
        }
    }
    let [fh_experiment1, fh_experiment2] = exp;
    Ok(ReplicateResult {
        replicate: r,
        t_true,
        t_p,
        t_a,
        hybrid,
        fh,
        fh_experiment1,
        fh_experiment2,
        errors,
    })
}

/// Runs `config.replicates` replicates of the scenario in parallel.
///
/// Efficiency diagnostics refer to the first population; with a fixed
/// population that is the only one.
pub fn run_monte_carlo(spec: &PopulationSpec, config: &MonteCarloConfig) -> Result<MonteCarloReport> {
    if config.replicates == 0 {
        return Err(Error::Domain("replicate count must be at least 1".into()));
    }
    let first = prepare(spec, config.seed, 0)?;
    let results: Vec<ReplicateResult> = (0..config.replicates)
        .into_par_iter()
        .map(|r| {
            if config.fixed_population || r == 0 {
                run_replicate(&first, config, r)
            } else {
                run_replicate(&prepare(spec, config.seed, r as u64)?, config, r)
            }
        })
        .collect::<Result<_>>()?;

    let diagnostics = if config.fixed_population {
        let pairs: Vec<(f64, f64)> = results.iter().map(|r| (r.t_p, r.t_a)).collect();
        efficiency_diagnostics(&first.frame, &pairs)?
    } else {
        // centre on each replicate's own truth
        let pairs: Vec<(f64, f64)> = results
            .iter()
            .map(|r| {
                (
                    r.t_p - r.t_true + results[0].t_true,
                    r.t_a - r.t_true + results[0].t_true,
                )
            })
            .collect();
        efficiency_diagnostics(&first.frame, &pairs)?
    };
    let collect = |f: fn(&ReplicateResult) -> Option<&Aggregates>| {
        let aggs: Vec<&Aggregates> = results.iter().filter_map(f).collect();
        EstimatorSummary::from_aggregates(&aggs)
    };
    Ok(MonteCarloReport {
        diagnostics,
        big_data: first.big_data,
        hybrid: collect(|r| r.hybrid.as_ref().map(|h| &h.aggregates)),
        fh: collect(|r| r.fh.as_ref().map(|h| &h.aggregates)),
        fh_experiment1: collect(|r| r.fh_experiment1.as_ref().map(|h| &h.aggregates)),
        fh_experiment2: collect(|r| r.fh_experiment2.as_ref().map(|h| &h.aggregates)),
        replicates: results,
    })
}

/// One line per replicate with the headline numbers of each estimator.
pub fn write_replicates_csv<W: Write>(report: &MonteCarloReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["replicate".to_string(), "T".into(), "T_p".into(), "T_A".into()];
    for p in ["hybrid", "fh", "fh1", "fh2"] {
        for s in ["aaee", "arrtmse", "coverage"] {
            header.push(format!("{p}_{s}"));
        }
    }
    w.write_record(&header)?;
    let cells = |a: Option<&Aggregates>| -> [String; 3] {
        match a {
            Some(a) => [
                a.aaee.map(|v| v.to_string()).unwrap_or_default(),
                a.arrtmse.to_string(),
                a.coverage.map(|v| v.to_string()).unwrap_or_default(),
            ],
            None => Default::default(),
        }
    };
    for r in &report.replicates {
        let mut row = vec![
            r.replicate.to_string(),
            r.t_true.to_string(),
            r.t_p.to_string(),
            r.t_a.to_string(),
        ];
        row.extend(cells(r.hybrid.as_ref().map(|h| &h.aggregates)));
        row.extend(cells(r.fh.as_ref().map(|h| &h.aggregates)));
        row.extend(cells(r.fh_experiment1.as_ref().map(|h| &h.aggregates)));
        row.extend(cells(r.fh_experiment2.as_ref().map(|h| &h.aggregates)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> PopulationSpec {
        PopulationSpec {
            n: 4000,
            m: 12,
            ..PopulationSpec::reference()
        }
    }

    #[test]
    fn equal_areas_without_regions() {
        let spec = PopulationSpec {
            n: 1000,
            m: 4,
            region_shares: None,
            size_spread: 0.0,
            ..PopulationSpec::reference()
        };
        let pop = synthesize_population(&spec, 1).unwrap();
        let sizes: Vec<usize> = pop.frame.areas().iter().map(|a| a.units.len()).collect();
        assert_eq!(sizes, vec![250; 4]);
    }

    #[test]
    fn population_is_reproducible_and_in_range() {
        let spec = small_spec();
        let a = synthesize_population(&spec, 5).unwrap();
        let b = synthesize_population(&spec, 5).unwrap();
        assert_eq!(a.frame.units(), b.frame.units());
        assert_eq!(a.frame.len(), 4000);
        for (slice, rate) in a.frame.areas().iter().zip(&a.rates) {
            let n = slice.units.len() as f64;
            assert!(*rate >= (0.11 * n).ceil() / n - 1e-12 && *rate <= 0.31 + 1e-12);
        }
        let c = synthesize_population(&spec, 6).unwrap();
        assert_ne!(a.frame.units(), c.frame.units());
    }

    #[test]
    fn fixed_rate_gives_that_rate() {
        let spec = PopulationSpec {
            rate_range: (0.21, 0.21),
            ..small_spec()
        };
        let pop = synthesize_population(&spec, 2).unwrap();
        let overall = pop.truth.iter().sum::<f64>() / pop.frame.len() as f64;
        assert!((overall - 0.21).abs() < 0.005);
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let bad = PopulationSpec {
            rate_range: (0.4, 0.2),
            ..small_spec()
        };
        assert!(matches!(synthesize_population(&bad, 1), Err(Error::Spec(_))));
        let tiny = PopulationSpec {
            n: 3,
            m: 12,
            ..small_spec()
        };
        assert!(matches!(synthesize_population(&tiny, 1), Err(Error::Spec(_))));
    }

    #[test]
    fn regions_are_contiguous_and_balanced() {
        let r = contiguous_regions(56);
        assert_eq!(r.iter().filter(|&&x| x == 1).count(), 19);
        assert_eq!(r.iter().filter(|&&x| x == 2).count(), 18);
        assert_eq!(r.iter().filter(|&&x| x == 3).count(), 19);
        assert!(r.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn big_data_scheme_counts() {
        let pop = synthesize_population(&small_spec(), 3).unwrap();
        let (f, summary) = select_big_data(&pop.frame, &pop.regions, 4).unwrap();
        for (a, slice) in f.areas().iter().enumerate() {
            let vol: Vec<usize> = slice
                .units
                .iter()
                .copied()
                .filter(|&r| f.unit(r).y == Some(1.0))
                .collect();
            let non: Vec<usize> = slice
                .units
                .iter()
                .copied()
                .filter(|&r| f.unit(r).y == Some(0.0))
                .collect();
            let in_b = |rows: &[usize]| rows.iter().filter(|&&r| f.unit(r).delta).count();
            let round = |share: f64, n: usize| (share * n as f64).round() as usize;
            match pop.regions[a] {
                1 => {
                    assert_eq!(in_b(&vol), round(0.5, vol.len()));
                    assert_eq!(in_b(&non), 0);
                }
                2 => {
                    assert_eq!(in_b(&vol), 0);
                    assert_eq!(in_b(&non), round(0.5, non.len()));
                }
                _ => assert_eq!(in_b(&slice.units), round(0.8, slice.units.len())),
            }
        }
        assert_eq!(summary.n_b, f.big().len());
        assert!(matches!(
            select_big_data(&pop.frame, &pop.regions[1..], 4),
            Err(Error::Region(_))
        ));
        let mut bad = pop.regions.clone();
        bad[0] = 4;
        assert!(matches!(select_big_data(&pop.frame, &bad, 4), Err(Error::Region(_))));
    }

    #[test]
    fn reference_big_data_shares() {
        // |B| near 60% of U holding near 52% of the positives
        let spec = PopulationSpec::scaled(40_000);
        let mut shares = Vec::new();
        for seed in 0..5 {
            let pop = synthesize_population(&spec, seed).unwrap();
            let (_, s) = select_big_data(&pop.frame, &pop.regions, seed).unwrap();
            shares.push((s.share_of_population, s.share_of_volunteers));
        }
        let n = shares.len() as f64;
        let pop_share = shares.iter().map(|s| s.0).sum::<f64>() / n;
        let vol_share = shares.iter().map(|s| s.1).sum::<f64>() / n;
        assert!((pop_share - 0.60).abs() < 0.02, "{pop_share}");
        assert!((vol_share - 0.52).abs() < 0.02, "{vol_share}");
    }

    #[test]
    fn srs_properties() {
        let pop = synthesize_population(&small_spec(), 3).unwrap();
        let s = draw_srs(&pop.frame, 400, 9).unwrap();
        assert_eq!(s.sample().len(), 400);
        assert!(s.sample().iter().all(|&r| s.unit(r).design_weight == 10.0));
        assert_eq!(draw_srs(&pop.frame, 400, 9).unwrap().sample(), s.sample());
        let all = draw_srs(&pop.frame, 4000, 1).unwrap();
        assert_eq!(all.sample().len(), 4000);
        assert!(all.units().iter().all(|u| u.design_weight == 1.0));
        assert!(matches!(draw_srs(&pop.frame, 4001, 1), Err(Error::Capacity(_))));
    }

    #[test]
    fn reference_sample_sizes_per_area() {
        // 1% of the reference population: single digits up to about 60 per
        // area, median in the twenties or thirties
        let pop = synthesize_population(&PopulationSpec::reference(), 21).unwrap();
        let s = draw_srs(&pop.frame, 1730, 4).unwrap();
        let mut sizes: Vec<usize> = s.areas().iter().map(|a| a.sample.len()).collect();
        sizes.sort_unstable();
        let median = (sizes[27] + sizes[28]) as f64 / 2.0;
        assert!(sizes[0] >= 1 && sizes[0] < 10, "{sizes:?}");
        assert!(sizes[55] > 40 && sizes[55] < 100, "{sizes:?}");
        assert!((15.0..=45.0).contains(&median), "{sizes:?}");
    }

    #[test]
    fn undercoverage_rates() {
        let spec = PopulationSpec::scaled(20_000);
        let pop = synthesize_population(&spec, 11).unwrap();
        let design = CovariateDesign::from_frame(&pop.frame);
        let full = apply_undercoverage(&pop.frame, &design, Experiment::Full, 1).unwrap();
        assert_eq!(full.covariates, design.totals(pop.frame.units(), 56));

        let two = apply_undercoverage(&pop.frame, &design, Experiment::Two, 1).unwrap();
        let n1 = pop.frame.areas()[0].units.len();
        assert_eq!(two.deleted[0], (0.35 * n1 as f64).round() as usize);
        assert!((two.rates[55] - 0.65).abs() < 1e-12);

        // area 20 is in block 17-24: 15% of its age-3 records
        let one = apply_undercoverage(&pop.frame, &design, Experiment::One, 1).unwrap();
        let a = &pop.frame.areas()[19];
        let age3 = a
            .units
            .iter()
            .filter(|&&r| pop.frame.unit(r).features[0] == 3.0)
            .count();
        assert_eq!(one.deleted[19], (0.15 * age3 as f64).round() as usize);
        // only age-3 counts move in area 20; the age-3 column sits at index 2
        let before = &full.covariates[19];
        let after = &one.covariates[19];
        for j in 0..before.len() {
            if j == 2 {
                assert_eq!(before[j] - after[j], one.deleted[19] as f64);
            } else if j < 7 {
                assert_eq!(before[j], after[j]);
            }
        }
    }

    #[test]
    fn integrator_is_exact_when_big_data_covers_everyone() {
        let pop = synthesize_population(&small_spec(), 3).unwrap();
        let mut units = pop.frame.units().to_vec();
        for u in &mut units {
            u.delta = true;
        }
        let f = PopulationFrame::new(units, 12, pop.frame.feature_names().to_vec()).unwrap();
        let reps = integrator_replicates(&f, 100, 20, 1).unwrap();
        let d = efficiency_diagnostics(&f, &reps).unwrap();
        assert_eq!(d.var_t_p, 0.0);
        assert_eq!(d.mean_t_p, d.t_true);
    }

    #[test]
    fn scenario_round_trip() {
        let s = Scenario::default();
        let text = s.to_toml().unwrap();
        assert_eq!(Scenario::from_toml(&text).unwrap(), s);
        let partial = Scenario::from_toml("[population]\nn = 2000\n[run]\nreplicates = 3\n").unwrap();
        assert_eq!(partial.population.m, 56);
        assert_eq!(partial.run.replicates, 3);
        assert!(matches!(Scenario::from_toml("population = 3"), Err(Error::Spec(_))));
    }

    #[test]
    fn monte_carlo_smoke() {
        let spec = PopulationSpec {
            n: 3000,
            m: 8,
            ..PopulationSpec::reference()
        };
        let config = MonteCarloConfig {
            replicates: 2,
            sample_size: 300,
            hybrid_settings: HybridSettings {
                k_min: 2,
                k_max: 4,
                subsets: Some(vec![FeatureMask::all(4).unwrap()]),
                folds: 3,
                bootstrap: BootstrapPlan::Fixed { replicates: 30 },
                chosen: None,
            },
            ..MonteCarloConfig::default()
        };
        let a = run_monte_carlo(&spec, &config).unwrap();
        assert_eq!(a.replicates.len(), 2);
        assert!(a.hybrid.is_some());
        let b = run_monte_carlo(&spec, &config).unwrap();
        assert_eq!(a, b);
        let zero = MonteCarloConfig {
            replicates: 0,
            ..config
        };
        assert!(matches!(run_monte_carlo(&spec, &zero), Err(Error::Domain(_))));
    }
}
