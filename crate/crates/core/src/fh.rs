//! Fay–Herriot area-level baseline.
//!
//! Sampling model `T̂_m^PR = T_m + ε_m` with known `σ_m²`, linking model
//! `T_m = x_mᵀβ + u_m` with `u_m ~ (0, σ_u²)`. The EBLUP shrinks the direct
//! estimate towards the synthetic fit, `γ_m T̂_m^PR + (1-γ_m) x_mᵀβ̂`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{PopulationFrame, UnitRecord};
use crate::uncertainty::{assemble_report, SmallAreaReport};

/// Area-level inputs of the model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FhInputs {
    /// `T̂_m^PR`
    pub direct: Vec<f64>,
    /// Known sampling variances `σ_m²`.
    pub variance: Vec<f64>,
    /// `x_m`, one row per area.
    pub covariates: Vec<Vec<f64>>,
    pub column_names: Vec<String>,
    /// Areas whose variance was replaced by the pooled floor.
    pub floored: Vec<bool>,
}

impl FhInputs {
    pub fn new(
        direct: Vec<f64>,
        variance: Vec<f64>,
        covariates: Vec<Vec<f64>>,
        column_names: Vec<String>,
    ) -> Result<Self> {
        let m = direct.len();
        if variance.len() != m || covariates.len() != m {
            return Err(Error::Alignment(format!(
                "{m} direct estimates, {} variances, {} covariate rows",
                variance.len(),
                covariates.len()
            )));
        }
        let p = column_names.len();
        if let Some(row) = covariates.iter().position(|x| x.len() != p) {
            return Err(Error::Validation(format!(
                "area {} has {} covariates, expected {p}",
                row + 1,
                covariates[row].len()
            )));
        }
        if let Some(i) = variance.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Validation(format!(
                "sampling variance of area {} is {}",
                i + 1,
                variance[i]
            )));
        }
        let finite = direct.iter().chain(covariates.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Validation("non-finite direct estimate or covariate".into()));
        }
        Ok(FhInputs {
            direct,
            variance,
            covariates,
            column_names,
            floored: vec![false; m],
        })
    }

    pub fn n_areas(&self) -> usize {
        self.direct.len()
    }

    /// Same direct estimates with different covariates.
    pub fn with_covariates(&self, covariates: Vec<Vec<f64>>) -> Result<Self> {
        let mut out = FhInputs::new(
            self.direct.clone(),
            self.variance.clone(),
            covariates,
            self.column_names.clone(),
        )?;
        out.floored.clone_from(&self.floored);
        Ok(out)
    }
}

/// Area-level covariates built from categorical unit features: an intercept
/// and, per feature, the count of units in each category except the lowest,
/// which serves as the reference level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateDesign {
    pub feature_names: Vec<String>,
    /// Sorted distinct codes per feature; the first is the reference.
    pub levels: Vec<Vec<f64>>,
}

impl CovariateDesign {
    pub fn from_frame(frame: &PopulationFrame) -> Self {
        let levels = (0..frame.n_features())
            .map(|j| {
                let mut v: Vec<f64> = frame.units().iter().map(|u| u.features[j]).collect();
                v.sort_by(f64::total_cmp);
                v.dedup();
                v
            })
            .collect();
        CovariateDesign {
            feature_names: frame.feature_names().to_vec(),
            levels,
        }
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names = vec!["intercept".to_string()];
        for (name, lv) in self.feature_names.iter().zip(&self.levels) {
            names.extend(lv.iter().skip(1).map(|l| format!("{name}={l}")));
        }
        names
    }

    /// Per-area covariate rows over the given units.
    pub fn totals<'a>(&self, units: impl IntoIterator<Item = &'a UnitRecord>, n_areas: usize) -> Vec<Vec<f64>> {
        let width = self.column_names().len();
        let mut offsets = Vec::with_capacity(self.levels.len());
        let mut next = 1;
        for lv in &self.levels {
            offsets.push(next);
            next += lv.len() - 1;
        }
        let mut x = vec![vec![0.0; width]; n_areas];
        for row in x.iter_mut() {
            row[0] = 1.0;
        }
        for u in units {
            let row = &mut x[u.area_id - 1];
            for (j, lv) in self.levels.iter().enumerate() {
                if let Ok(pos) = lv.binary_search_by(|l| l.total_cmp(&u.features[j])) {
                    if pos > 0 {
                        row[offsets[j] + pos - 1] += 1.0;
                    }
                }
            }
        }
        x
    }
}

/// Expansion estimates `T̂_m^PR = (N/n) Σ_{A_m} y_i` with SRS domain-total
/// variances, and covariates from the full frame.
///
/// The variance of a domain total under SRS is `N²(1-f)/n · s_z²` with
/// `z_i = y_i 1(i ∈ m)` over the whole sample. Areas with fewer than two
/// sampled units or constant `y` within the area get the variance implied by
/// the national mean and variance of `y` and the area's population share.
pub fn direct_estimates(frame: &PopulationFrame) -> Result<FhInputs> {
    let sample = frame.sample();
    let n = sample.len();
    if n == 0 {
        return Err(Error::DegenerateDesign("the sample is empty".into()));
    }
    let big_n = frame.len() as f64;
    let nf = n as f64;
    let m = frame.n_areas();
    let f = nf / big_n;

    let mut sum = vec![0.0; m];
    let mut sum2 = vec![0.0; m];
    let mut count = vec![0usize; m];
    let mut lo = vec![f64::INFINITY; m];
    let mut hi = vec![f64::NEG_INFINITY; m];
    for &r in sample {
        let a = frame.unit(r).area_id - 1;
        let y = frame.observed_y(r);
        sum[a] += y;
        sum2[a] += y * y;
        count[a] += 1;
        lo[a] = lo[a].min(y);
        hi[a] = hi[a].max(y);
    }
    let ybar = sum.iter().sum::<f64>() / nf;
    let s2_y = if n > 1 {
        (sum2.iter().sum::<f64>() - nf * ybar * ybar).max(0.0) / (nf - 1.0)
    } else {
        0.0
    };
    let scale = big_n * big_n * (1.0 - f) / nf;

    let mut direct = Vec::with_capacity(m);
    let mut variance = Vec::with_capacity(m);
    let mut floored = Vec::with_capacity(m);
    for a in 0..m {
        direct.push(big_n / nf * sum[a]);
        let degenerate = count[a] < 2 || hi[a] == lo[a];
        let s2_z = if degenerate {
            let share = frame.areas()[a].units.len() as f64 / big_n;
            share * (s2_y + ybar * ybar) - (share * ybar).powi(2)
        } else {
            let zbar = sum[a] / nf;
            (sum2[a] - nf * zbar * zbar).max(0.0) / (nf - 1.0)
        };
        variance.push(scale * s2_z.max(0.0));
        floored.push(degenerate);
    }

    let design = CovariateDesign::from_frame(frame);
    let covariates = design.totals(frame.units(), m);
    let mut inputs = FhInputs::new(direct, variance, covariates, design.column_names())?;
    inputs.floored = floored;
    Ok(inputs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMethod {
    Reml,
    Moments,
    /// `σ_u²` supplied by the caller.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FhOptions {
    pub max_iterations: usize,
    /// Relative change in `σ_u²` at which scoring stops.
    pub tolerance: f64,
    /// Fall back to the moment estimator instead of failing when scoring
    /// does not converge.
    pub moments_fallback: bool,
}

impl Default for FhOptions {
    fn default() -> Self {
        FhOptions {
            max_iterations: 100,
            tolerance: 1e-8,
            moments_fallback: true,
        }
    }
}

/// Fitted model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FhModel {
    pub beta: Vec<f64>,
    pub sigma2_u: f64,
    /// `γ_m = σ_u² / (σ_u² + σ_m²)`, taken as 1 when `σ_m² = 0`.
    pub gamma: Vec<f64>,
    pub method: FitMethod,
    pub iterations: usize,
    /// `σ_u²` after each scoring step.
    pub trace: Vec<f64>,
    /// `(Σ_m x_m x_mᵀ / (σ_u² + σ_m²))⁻¹` in the original column scale.
    pub beta_cov: Vec<Vec<f64>>,
}

/// Column-scaled design for numerically stable GLS.
struct Design {
    x: DMatrix<f64>,
    scale: Vec<f64>,
    y: DVector<f64>,
    psi: Vec<f64>,
}

impl Design {
    fn new(inputs: &FhInputs) -> Result<Self> {
        let m = inputs.n_areas();
        let p = inputs.column_names.len();
        if m <= p {
            return Err(Error::DegenerateDesign(format!(
                "{m} areas cannot identify {p} coefficients"
            )));
        }
        let mut x = DMatrix::from_fn(m, p, |i, j| inputs.covariates[i][j]);
        let mut scale = Vec::with_capacity(p);
        for j in 0..p {
            let s = x.column(j).amax();
            let s = if s > 0.0 { s } else { 1.0 };
            x.column_mut(j).scale_mut(1.0 / s);
            scale.push(s);
        }
        check_rank(&x, &inputs.column_names)?;
        Ok(Design {
            x,
            scale,
            y: DVector::from_column_slice(&inputs.direct),
            psi: inputs.variance.clone(),
        })
    }

    /// `(X'V⁻¹X)⁻¹` and `β` at the given `σ_u²`; `None` if `V` is singular.
    fn gls(&self, sigma2: f64) -> Option<(DMatrix<f64>, DVector<f64>)> {
        let vinv = self.vinv(sigma2)?;
        let xt_vinv = self.x.transpose() * DMatrix::from_diagonal(&vinv);
        let info = &xt_vinv * &self.x;
        let cov = info.try_inverse()?;
        let beta = &cov * (&xt_vinv * &self.y);
        Some((cov, beta))
    }

    fn vinv(&self, sigma2: f64) -> Option<DVector<f64>> {
        let v: Vec<f64> = self.psi.iter().map(|p| sigma2 + p).collect();
        if v.iter().any(|&v| v <= 0.0) {
            return None;
        }
        Some(DVector::from_iterator(v.len(), v.iter().map(|v| 1.0 / v)))
    }

    /// REML score and Fisher information for `σ_u²`.
    fn score(&self, sigma2: f64) -> Option<(f64, f64)> {
        let vinv = self.vinv(sigma2)?;
        let (cov, _) = self.gls(sigma2)?;
        let vx = DMatrix::from_diagonal(&vinv) * &self.x;
        let p = DMatrix::from_diagonal(&vinv) - &vx * cov * vx.transpose();
        let py = &p * &self.y;
        let score = -0.5 * p.trace() + 0.5 * py.dot(&py);
        let info = 0.5 * p.component_mul(&p).sum();
        Some((score, info))
    }

    /// Prasad–Rao moment estimator from OLS residuals.
    fn moments(&self) -> Option<f64> {
        let xtx_inv = (self.x.transpose() * &self.x).try_inverse()?;
        let hat = &self.x * xtx_inv * self.x.transpose();
        let resid = &self.y - &hat * &self.y;
        let (m, p) = self.x.shape();
        let adj: f64 = (0..m).map(|i| self.psi[i] * (1.0 - hat[(i, i)])).sum();
        Some(((resid.norm_squared() - adj) / (m - p) as f64).max(0.0))
    }

    fn unscale(&self, cov: &DMatrix<f64>, beta: &DVector<f64>) -> (Vec<f64>, Vec<Vec<f64>>) {
        let p = self.scale.len();
        let b = (0..p).map(|j| beta[j] / self.scale[j]).collect();
        let c = (0..p)
            .map(|i| (0..p).map(|j| cov[(i, j)] / (self.scale[i] * self.scale[j])).collect())
            .collect();
        (b, c)
    }
}

/// Modified Gram–Schmidt; columns whose residual norm vanishes relative to
/// their own norm are reported as dependent on the preceding ones.
fn check_rank(x: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for (col, name) in x.column_iter().zip(names) {
        let col = col.into_owned();
        let norm = col.norm();
        let mut r = col;
        for q in &basis {
            let c = q.dot(&r);
            r -= q * c;
        }
        let rn = r.norm();
        if norm == 0.0 || rn <= 1e-10 * norm {
            dependent.push(name.clone());
        } else {
            basis.push(r / rn);
        }
    }
    if dependent.is_empty() {
        Ok(())
    } else {
        Err(Error::Collinearity { columns: dependent })
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn finish(design: &Design, sigma2: f64, method: FitMethod, iterations: usize, trace: Vec<f64>) -> Result<FhModel> {
    let (cov, beta) = match design.gls(sigma2) {
        Some(g) => g,
        // V singular: every σ_m² and σ_u² zero, where GLS is OLS
        None => {
            let cov = (design.x.transpose() * &design.x)
                .try_inverse()
                .ok_or_else(|| Error::DegenerateDesign("X'X is singular".into()))?;
            let beta = &cov * (design.x.transpose() * &design.y);
            (cov * 0.0, beta)
        }
    };
    let (beta, beta_cov) = design.unscale(&cov, &beta);
    let gamma = design
        .psi
        .iter()
        .map(|&p| if p == 0.0 { 1.0 } else { sigma2 / (sigma2 + p) })
        .collect();
    Ok(FhModel {
        beta,
        sigma2_u: sigma2,
        gamma,
        method,
        iterations,
        trace,
        beta_cov,
    })
}

/// Fits `σ_u²` by REML Fisher scoring (truncated at 0) and `β` by GLS.
pub fn fit_fh(inputs: &FhInputs, options: &FhOptions) -> Result<FhModel> {
    let design = Design::new(inputs)?;
    let start = {
        let med = median(&design.psi);
        if med > 0.0 {
            med
        } else {
            design.moments().unwrap_or(0.0)
        }
    };
    if start == 0.0 && design.psi.iter().all(|&p| p == 0.0) {
        // exact fit with no sampling error: nothing to estimate
        return finish(&design, 0.0, FitMethod::Reml, 0, vec![0.0]);
    }

    let mut sigma2 = start;
    let mut trace = Vec::new();
    for it in 1..=options.max_iterations {
        let Some((score, info)) = design.score(sigma2) else {
            break;
        };
        if !(score.is_finite() && info.is_finite() && info > 0.0) {
            break;
        }
        let next = (sigma2 + score / info).max(0.0);
        trace.push(next);
        let converged = (next - sigma2).abs() <= options.tolerance * sigma2.max(next).max(f64::MIN_POSITIVE);
        let stuck_at_zero = next == 0.0 && sigma2 == 0.0;
        sigma2 = next;
        if converged || stuck_at_zero {
            return finish(&design, sigma2, FitMethod::Reml, it, trace);
        }
        if sigma2 == 0.0 && design.psi.contains(&0.0) {
            // V turns singular at the boundary
            return finish(&design, 0.0, FitMethod::Reml, it, trace);
        }
    }
    if options.moments_fallback {
        if let Some(s) = design.moments() {
            let iterations = trace.len();
            return finish(&design, s, FitMethod::Moments, iterations, trace);
        }
    }
    Err(Error::Convergence {
        iterations: trace.len(),
        trace,
    })
}

/// GLS fit at a given `σ_u²`.
pub fn fit_fh_fixed(inputs: &FhInputs, sigma2_u: f64) -> Result<FhModel> {
    if !(sigma2_u >= 0.0 && sigma2_u.is_finite()) {
        return Err(Error::Domain(format!("σ_u² must be non-negative, got {sigma2_u}")));
    }
    let design = Design::new(inputs)?;
    finish(&design, sigma2_u, FitMethod::Fixed, 0, Vec::new())
}

/// EBLUP and its MSE for one area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FhPrediction {
    pub eblup: f64,
    pub synthetic: f64,
    /// `g1 + g2 + 2 g3`
    pub mse: f64,
    pub g1: f64,
    pub g2: f64,
    pub g3: f64,
}

/// EBLUP with the Prasad–Rao MSE approximation for REML fits.
///
/// `g1 = γψ`, `g2 = (1-γ)² xᵀ(XᵀV⁻¹X)⁻¹x` and
/// `g3 = ψ²/(σ_u²+ψ)³ · 2/Σ(σ_u²+ψ)⁻²`, the last being the leading term of
/// the variance of `σ̂_u²`.
pub fn fh_predict_mse(model: &FhModel, inputs: &FhInputs) -> Vec<FhPrediction> {
    let s2 = model.sigma2_u;
    let sum_inv_sq: f64 = inputs
        .variance
        .iter()
        .map(|&p| s2 + p)
        .filter(|&v| v > 0.0)
        .map(|v| v.powi(-2))
        .sum();
    let var_sigma2 = if sum_inv_sq > 0.0 { 2.0 / sum_inv_sq } else { 0.0 };
    (0..inputs.n_areas())
        .map(|m| {
            let x = &inputs.covariates[m];
            let psi = inputs.variance[m];
            let g = model.gamma[m];
            let synthetic: f64 = x.iter().zip(&model.beta).map(|(a, b)| a * b).sum();
            let quad: f64 = (0..x.len())
                .map(|i| (0..x.len()).map(|j| x[i] * model.beta_cov[i][j] * x[j]).sum::<f64>())
                .sum();
            let g1 = g * psi;
            let g2 = (1.0 - g).powi(2) * quad.max(0.0);
            let v = s2 + psi;
            let g3 = if v > 0.0 {
                psi * psi / v.powi(3) * var_sigma2
            } else {
                0.0
            };
            FhPrediction {
                eblup: g * inputs.direct[m] + (1.0 - g) * synthetic,
                synthetic,
                mse: g1 + g2 + 2.0 * g3,
                g1,
                g2,
                g3,
            }
        })
        .collect()
}

/// Per-area FH report with `±1.96 √MSE` intervals.
pub fn fh_report(predictions: &[FhPrediction], truth: Option<&[f64]>) -> Result<SmallAreaReport> {
    let est: Vec<f64> = predictions.iter().map(|p| p.eblup).collect();
    let mse: Vec<f64> = predictions.iter().map(|p| p.mse).collect();
    let zeros = vec![0.0; est.len()];
    assemble_report(&est, &mse, &zeros, &zeros, truth)
}

/// Writes `area,T_PR,sigma2,floored,gamma,T_FH,RTMSE,CI_lo,CI_hi` with
/// `T_m,covered` appended when truth is known.
pub fn write_fh_csv<W: Write>(inputs: &FhInputs, model: &FhModel, report: &SmallAreaReport, writer: W) -> Result<()> {
    let has_truth = report.aggregates.aaee.is_some();
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![
        "area", "T_PR", "sigma2", "floored", "gamma", "T_FH", "RTMSE", "CI_lo", "CI_hi",
    ];
    if has_truth {
        header.extend(["T_m", "covered"]);
    }
    w.write_record(&header)?;
    for (i, a) in report.areas.iter().enumerate() {
        let mut row = vec![
            a.area_id.to_string(),
            inputs.direct[i].to_string(),
            inputs.variance[i].to_string(),
            u8::from(inputs.floored[i]).to_string(),
            model.gamma[i].to_string(),
            a.estimate.to_string(),
            a.rtmse.to_string(),
            a.ci_lo.to_string(),
            a.ci_hi.to_string(),
        ];
        if let (Some(t), Some(c)) = (a.truth, a.covered) {
            row.push(t.to_string());
            row.push(u8::from(c).to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imputer::tests::{random_frame, unit};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Box–Muller standard normal.
    fn normal<R: Rng>(rng: &mut R) -> f64 {
        let u1: f64 = 1.0 - rng.random::<f64>();
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    fn inputs(direct: &[f64], psi: &[f64], x: &[&[f64]]) -> FhInputs {
        let p = x[0].len();
        FhInputs::new(
            direct.to_vec(),
            psi.to_vec(),
            x.iter().map(|r| r.to_vec()).collect(),
            (0..p).map(|j| format!("x{j}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn expansion_estimate() {
        // 100 units, 10 sampled, two in area 1 with y = 1, 0
        let mut units = Vec::new();
        for i in 0..100u64 {
            let area = if i < 50 { 1 } else { 2 };
            let smp = i % 10 == 0 || i == 1;
            let smp = smp && i != 90;
            let y = if smp {
                Some(if i == 0 { 1.0 } else { 0.0 })
            } else {
                None
            };
            units.push(unit(i, area, &[(i % 3) as f64], y, false, smp));
        }
        for u in units.iter_mut().filter(|u| u.in_sample) {
            u.design_weight = 10.0;
        }
        let f = PopulationFrame::new(units, 2, vec!["x".into()]).unwrap();
        assert_eq!(f.sample().len(), 10);
        let d = direct_estimates(&f).unwrap();
        assert_eq!(d.direct[0], 10.0);
        assert_eq!(d.direct[1], 0.0);
        // area 2 has constant y: floored
        assert!(d.floored[1]);
        assert!(d.variance.iter().all(|v| *v > 0.0));
        assert_eq!(d.column_names, vec!["intercept", "x=1", "x=2"]);
        assert_eq!(d.covariates[0][0], 1.0);
        assert_eq!(d.covariates[0][1] + d.covariates[1][1], 33.0);
    }

    #[test]
    fn direct_totals_add_up() {
        let f = random_frame(5, 2000, 5, 2);
        let d = direct_estimates(&f).unwrap();
        let n = f.sample().len() as f64;
        let want = f.len() as f64 / n * f.total(f.sample());
        let got: f64 = d.direct.iter().sum();
        assert!((got - want).abs() < 1e-9 * want);
    }

    #[test]
    fn empty_area_is_zero_and_floored() {
        let units = vec![
            unit(1, 1, &[0.0], Some(1.0), false, true),
            unit(2, 1, &[1.0], Some(0.0), false, true),
            unit(3, 2, &[0.0], None, false, false),
        ];
        let f = PopulationFrame::new(units, 2, vec!["x".into()]).unwrap();
        let d = direct_estimates(&f).unwrap();
        assert_eq!(d.direct[1], 0.0);
        assert!(d.floored[1]);
        assert!(!d.floored[0]);
    }

    #[test]
    fn domain_variance_formula() {
        // area 1 sample y = (1, 0, 1), area 2 sample y = (0, 1); N = 50
        let mut units = Vec::new();
        let ys = [(1, 1.0), (1, 0.0), (1, 1.0), (2, 0.0), (2, 1.0)];
        for (i, &(a, y)) in ys.iter().enumerate() {
            units.push(unit(i as u64, a, &[0.0], Some(y), false, true));
        }
        for i in 5..50u64 {
            units.push(unit(i, if i < 30 { 1 } else { 2 }, &[0.0], None, false, false));
        }
        let f = PopulationFrame::new(units, 2, vec!["x".into()]).unwrap();
        let d = direct_estimates(&f).unwrap();
        // z for area 1 over the sample: 1, 0, 1, 0, 0
        let z = [1.0, 0.0, 1.0, 0.0, 0.0];
        let zbar = 0.4;
        let s2: f64 = z.iter().map(|v: &f64| (v - zbar).powi(2)).sum::<f64>() / 4.0;
        let want = 50.0 * 50.0 * (1.0 - 0.1) / 5.0 * s2;
        assert!((d.variance[0] - want).abs() < 1e-9);
        assert_eq!(d.direct[0], 20.0);
    }

    #[test]
    fn hand_eblup_two_areas() {
        let inp = inputs(&[10.0, 20.0], &[1.0, 4.0], &[&[1.0], &[1.0]]);
        let model = fit_fh_fixed(&inp, 1.0).unwrap();
        // β = (10/2 + 20/5) / (1/2 + 1/5)
        let beta = 9.0 / 0.7;
        assert!((model.beta[0] - beta).abs() < 1e-12);
        assert_eq!(model.gamma, vec![0.5, 0.2]);
        let pred = fh_predict_mse(&model, &inp);
        assert!((pred[0].eblup - (5.0 + 0.5 * beta)).abs() < 1e-12);
        assert!((pred[1].eblup - (4.0 + 0.8 * beta)).abs() < 1e-12);
        // g1 = γψ, g2 = (1-γ)²/Σ(1/v), g3 = ψ²/v³ · 2/Σv⁻²
        let g2 = 0.25 / 0.7;
        let g3 = 1.0 / 8.0 * 2.0 / (0.25 + 0.04);
        assert!((pred[0].mse - (0.5 + g2 + 2.0 * g3)).abs() < 1e-12);
    }

    #[test]
    fn zero_sampling_variance_is_ols_and_direct() {
        let x: Vec<Vec<f64>> = (0..8).map(|i| vec![1.0, i as f64]).collect();
        let direct: Vec<f64> = (0..8)
            .map(|i| 3.0 + 2.0 * i as f64 + if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let inp = FhInputs::new(direct.clone(), vec![0.0; 8], x, vec!["1".into(), "t".into()]).unwrap();
        let model = fit_fh(&inp, &FhOptions::default()).unwrap();
        assert!(model.sigma2_u > 0.0);
        assert!(model.gamma.iter().all(|&g| g == 1.0));
        // OLS slope and intercept of the alternating residual pattern
        let tbar = 3.5;
        let ybar: f64 = direct.iter().sum::<f64>() / 8.0;
        let sxy: f64 = (0..8).map(|i| (i as f64 - tbar) * (direct[i] - ybar)).sum();
        let sxx: f64 = (0..8).map(|i| (i as f64 - tbar).powi(2)).sum();
        assert!((model.beta[1] - sxy / sxx).abs() < 1e-9);
        let pred = fh_predict_mse(&model, &inp);
        for (p, d) in pred.iter().zip(&direct) {
            assert_eq!(p.eblup, *d);
        }
    }

    #[test]
    fn zero_linking_variance_is_synthetic() {
        let inp = inputs(&[10.0, 20.0, 13.0], &[1.0, 4.0, 2.0], &[&[1.0], &[1.0], &[1.0]]);
        let model = fit_fh_fixed(&inp, 0.0).unwrap();
        assert!(model.gamma.iter().all(|&g| g == 0.0));
        for p in fh_predict_mse(&model, &inp) {
            assert_eq!(p.eblup, p.synthetic);
            assert_eq!(p.g1, 0.0);
        }
    }

    #[test]
    fn reml_truncates_at_zero() {
        // direct estimates much closer to the line than their variances allow
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0, i as f64]).collect();
        let direct: Vec<f64> = (0..10).map(|i| 1.0 + i as f64 + 0.01 * ((i * 7) % 3) as f64).collect();
        let inp = FhInputs::new(direct, vec![100.0; 10], x, vec!["1".into(), "t".into()]).unwrap();
        let model = fit_fh(&inp, &FhOptions::default()).unwrap();
        assert_eq!(model.sigma2_u, 0.0);
        assert_eq!(model.method, FitMethod::Reml);
    }

    #[test]
    fn collinear_columns_are_named() {
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![1.0, i as f64, 2.0 * i as f64 + 1.0]).collect();
        let inp = FhInputs::new(vec![1.0; 6], vec![1.0; 6], x, vec!["a".into(), "b".into(), "c".into()]).unwrap();
        match fit_fh(&inp, &FhOptions::default()) {
            Err(Error::Collinearity { columns }) => assert_eq!(columns, vec!["c".to_string()]),
            other => panic!("expected collinearity, got {other:?}"),
        }
        let few = inputs(&[1.0, 2.0], &[1.0, 1.0], &[&[1.0, 0.0], &[1.0, 1.0]]);
        assert!(matches!(
            fit_fh(&few, &FhOptions::default()),
            Err(Error::DegenerateDesign(_))
        ));
    }

    #[test]
    fn convergence_error_without_fallback() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0, i as f64]).collect();
        let direct: Vec<f64> = (0..10).map(|i| (i * i) as f64).collect();
        let inp = FhInputs::new(direct, vec![1.0; 10], x, vec!["1".into(), "t".into()]).unwrap();
        let opts = FhOptions {
            max_iterations: 1,
            tolerance: 0.0,
            moments_fallback: false,
        };
        match fit_fh(&inp, &opts) {
            Err(e @ Error::Convergence { .. }) => assert_eq!(e.exit_code(), 4),
            other => panic!("expected convergence error, got {other:?}"),
        }
        let fallback = fit_fh(
            &inp,
            &FhOptions {
                moments_fallback: true,
                ..opts
            },
        )
        .unwrap();
        assert_eq!(fallback.method, FitMethod::Moments);
    }

    #[test]
    fn recovers_simulated_parameters() {
        // 40 replicates at M = 200; the full 100-replicate check is in the
        // acceptance suite
        let beta = [50.0, 3.0];
        let s2u: f64 = 25.0;
        let m = 200;
        let reps = 40;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x: Vec<Vec<f64>> = (0..m).map(|i| vec![1.0, (i % 20) as f64]).collect();
        let psi: Vec<f64> = (0..m).map(|i| 5.0 + (i % 7) as f64 * 5.0).collect();
        let mut sig = Vec::new();
        let mut slope = Vec::new();
        for _ in 0..reps {
            let direct: Vec<f64> = (0..m)
                .map(|i| beta[0] + beta[1] * x[i][1] + s2u.sqrt() * normal(&mut rng) + psi[i].sqrt() * normal(&mut rng))
                .collect();
            let inp = FhInputs::new(direct, psi.clone(), x.clone(), vec!["1".into(), "t".into()]).unwrap();
            let model = fit_fh(&inp, &FhOptions::default()).unwrap();
            assert_eq!(model.method, FitMethod::Reml);
            sig.push(model.sigma2_u);
            slope.push(model.beta[1]);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean(&sig) - s2u).abs() < 0.15 * s2u);
        let sd = (slope.iter().map(|b| (b - mean(&slope)).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        assert!((mean(&slope) - beta[1]).abs() < 3.0 * sd / (reps as f64).sqrt());
    }

    proptest! {
        #[test]
        fn eblup_is_convex_combination(
            direct in prop::collection::vec(-100.0..100.0f64, 6),
            psi in prop::collection::vec(0.0..50.0f64, 6),
            s2 in 0.0..50.0f64,
        ) {
            let x: Vec<Vec<f64>> = (0..6).map(|i| vec![1.0, (i * i % 5) as f64]).collect();
            let inp = FhInputs::new(direct.clone(), psi, x, vec!["1".into(), "t".into()]).unwrap();
            let model = fit_fh_fixed(&inp, s2).unwrap();
            for (p, d) in fh_predict_mse(&model, &inp).iter().zip(&direct) {
                let (lo, hi) = (p.synthetic.min(*d), p.synthetic.max(*d));
                prop_assert!(p.eblup >= lo - 1e-9 && p.eblup <= hi + 1e-9);
            }
            prop_assert!(model.gamma.iter().all(|g| (0.0..=1.0).contains(g)));
        }

        #[test]
        fn gamma_decreases_in_sampling_variance(s2 in 0.1..10.0f64, a in 0.0..10.0f64, b in 0.0..10.0f64) {
            let (lo, hi) = (a.min(b), a.max(b));
            let inp = inputs(&[1.0, 2.0, 4.0], &[lo, hi, 1.0], &[&[1.0], &[1.0], &[1.0]]);
            let model = fit_fh_fixed(&inp, s2).unwrap();
            prop_assert!(model.gamma[0] >= model.gamma[1]);
        }
    }

    #[test]
    fn shrinking_variances_converge_to_direct() {
        let x: Vec<Vec<f64>> = (0..8).map(|i| vec![1.0, i as f64]).collect();
        let direct: Vec<f64> = (0..8).map(|i| (i * i) as f64).collect();
        let mut prev = f64::INFINITY;
        for scale in [1.0, 1e-2, 1e-4, 1e-6] {
            let inp = FhInputs::new(direct.clone(), vec![scale; 8], x.clone(), vec!["1".into(), "t".into()]).unwrap();
            let model = fit_fh(&inp, &FhOptions::default()).unwrap();
            let gap: f64 = fh_predict_mse(&model, &inp)
                .iter()
                .zip(&direct)
                .map(|(p, d)| (p.eblup - d).abs())
                .sum();
            assert!(gap <= prev);
            prev = gap;
        }
        assert!(prev < 1e-4);
    }
}
