//! Data integrator, calibrated donor weights and hybrid small-area totals.
//!
//! The national total of the hybrid estimator is pinned to the integrator
//! `T̂_p`: donor weights `w_1..w_k` are perturbed from `1/k` by the smallest
//! chi-square amount such that `T_B + T_D + Σ_j w_j T̂^(j) = T̂_p` and
//! `Σ_j w_j = 1`. Both constraints are linear, so the minimiser has a closed
//! form in the rank totals `T̂^(j)`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::frame::PopulationFrame;
use crate::imputer::{ImputedValues, NeighborTable};

/// Components of the integrator `T̂_p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntegratorEstimate {
    pub t_p: f64,
    /// `Σ_{i∈B} y_i`
    pub t_b: f64,
    /// `Σ_{i∈D} y_i`
    pub t_d: f64,
    /// `N_C = |C|`
    pub n_c: usize,
}

/// `T̂_p = Σ_U δ_i y_i + N_C · Σ_A d_i(1-δ_i) y_i / Σ_A d_i(1-δ_i)`.
///
/// When `B = U` the second term vanishes and `T̂_p` is the exact total.
pub fn data_integrator(frame: &PopulationFrame) -> Result<IntegratorEstimate> {
    let t_b = frame.total(frame.big());
    let t_d = frame.total(frame.donors());
    let n_c = frame.missing().len();
    if n_c == 0 {
        return Ok(IntegratorEstimate {
            t_p: t_b,
            t_b,
            t_d,
            n_c,
        });
    }
    let (num, den) = frame.donors().iter().fold((0.0, 0.0), |(num, den), &r| {
        let d = frame.unit(r).design_weight;
        (num + d * frame.observed_y(r), den + d)
    });
    if den <= 0.0 {
        return Err(Error::DegenerateDesign(
            "no sampled unit outside the big data; the integrator is undefined".into(),
        ));
    }
    Ok(IntegratorEstimate {
        t_p: t_b + n_c as f64 * num / den,
        t_b,
        t_d,
        n_c,
    })
}

/// Calibrated donor weights.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationWeights {
    pub w: Vec<f64>,
    /// Calibration was infeasible and uniform weights were returned.
    pub fallback: bool,
    /// `T̂_p - (T_B + T_D + Σ_j w_j T̂^(j))` left after calibration.
    pub residual: f64,
    /// Some weight lies outside `[0, 1]`.
    pub out_of_range: bool,
}

/// Chi-square distance `Σ_j k (w_j - 1/k)²` from uniform weights.
pub fn chi_square_distance(w: &[f64]) -> f64 {
    let k = w.len() as f64;
    w.iter().map(|wj| k * (wj - 1.0 / k).powi(2)).sum()
}

/// Closed-form minimiser of the chi-square distance subject to `Σ w_j = 1`
/// and `Σ_j w_j T̂^(j) = t_p - t_b - t_d`.
///
/// When the rank totals carry no spread (always the case for `k = 1`) the
/// second constraint can only hold if it already holds for uniform weights;
/// otherwise uniform weights are returned with `fallback` set.
pub fn calibration_weights(rank_totals: &[f64], t_p: f64, t_b: f64, t_d: f64) -> Result<CalibrationWeights> {
    let k = rank_totals.len();
    if k == 0 {
        return Err(Error::Domain("k must be at least 1".into()));
    }
    if !rank_totals.iter().all(|t| t.is_finite()) || !(t_p.is_finite() && t_b.is_finite() && t_d.is_finite()) {
        return Err(Error::Domain("non-finite totals".into()));
    }
    let kf = k as f64;
    let sum: f64 = rank_totals.iter().sum();
    let mean = sum / kf;
    let t_knn = t_b + t_d + mean;
    let gap = t_p - t_knn;
    // Σ(T^(j))² - (ΣT^(j))²/k, computed in centred form
    let spread: f64 = rank_totals.iter().map(|t| (t - mean).powi(2)).sum();
    let eps = 1e-9 * sum.powi(2).max(1.0);

    let uniform = vec![1.0 / kf; k];
    if spread < eps {
        let fallback = gap.abs() > 1e-9 * t_p.abs().max(1.0);
        return Ok(CalibrationWeights {
            w: uniform,
            fallback,
            residual: if fallback { gap } else { 0.0 },
            out_of_range: false,
        });
    }
    let w: Vec<f64> = rank_totals
        .iter()
        .map(|t| 1.0 / kf + (t - mean) / spread * gap)
        .collect();
    let achieved = t_b + t_d + w.iter().zip(rank_totals).map(|(a, b)| a * b).sum::<f64>();
    Ok(CalibrationWeights {
        out_of_range: w.iter().any(|x| !(0.0..=1.0).contains(x)),
        residual: t_p - achieved,
        fallback: false,
        w,
    })
}

/// `T̂_m = T_{B_m} + Σ_{i∈C_m} ŷ_i` for every area (observed `y` on `D_m`,
/// imputed values on `C_m \ D_m`).
pub fn small_area_totals(frame: &PopulationFrame, imputed: &ImputedValues) -> Vec<f64> {
    frame
        .areas()
        .iter()
        .map(|a| frame.total(&a.big) + imputed.total(&a.missing))
        .collect()
}

/// Full calibration of a neighbour table.
#[derive(Debug, Clone, Serialize)]
pub struct CalibrationResult {
    pub w: Vec<f64>,
    pub rank_totals: Vec<f64>,
    pub integrator: IntegratorEstimate,
    /// Uncalibrated `T̂_kNN = T_B + T_D + (1/k) Σ_j T̂^(j)`.
    pub t_knn: f64,
    /// `T̂_CkNN = T_B + T_D + Σ_j w_j T̂^(j)`.
    pub t_cknn: f64,
    /// `T̂_m`, indexed by `area_id - 1`.
    pub per_area: Vec<f64>,
    pub fallback: bool,
    pub residual: f64,
    pub out_of_range: bool,
}

/// Calibrates `table` to the integrator of `frame` and assembles the hybrid
/// per-area totals.
pub fn calibrate(frame: &PopulationFrame, table: &NeighborTable) -> Result<(CalibrationResult, ImputedValues)> {
    let integrator = data_integrator(frame)?;
    let rank_totals = table.rank_totals();
    let cw = calibration_weights(&rank_totals, integrator.t_p, integrator.t_b, integrator.t_d)?;
    let imputed = table.impute(frame, &cw.w)?;
    let per_area = small_area_totals(frame, &imputed);
    let base = integrator.t_b + integrator.t_d;
    let result = CalibrationResult {
        t_knn: base + rank_totals.iter().sum::<f64>() / table.k as f64,
        t_cknn: base + cw.w.iter().zip(&rank_totals).map(|(a, b)| a * b).sum::<f64>(),
        w: cw.w,
        rank_totals,
        integrator,
        per_area,
        fallback: cw.fallback,
        residual: cw.residual,
        out_of_range: cw.out_of_range,
    };
    Ok((result, imputed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::UnitRecord;
    use crate::hasd::FeatureMask;
    use crate::imputer::{search_neighbors, tests::random_frame};
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn u(id: u64, y: f64, delta: bool, smp: bool, d: f64) -> UnitRecord {
        UnitRecord {
            unit_id: id,
            area_id: 1,
            features: vec![0.0],
            y: Some(y),
            delta,
            in_sample: smp,
            design_weight: d,
        }
    }

    #[test]
    fn integrator_hand_example() {
        let f = PopulationFrame::new(
            vec![
                u(1, 1.0, true, false, 0.0),
                u(2, 0.0, true, false, 0.0),
                u(3, 1.0, false, true, 4.0),
                u(4, 1.0, false, false, 0.0),
            ],
            1,
            vec!["x".into()],
        )
        .unwrap();
        let e = data_integrator(&f).unwrap();
        assert_eq!(e.t_p, 3.0);
        assert_eq!(e.t_b, 1.0);
        assert_eq!(e.t_d, 1.0);
        assert_eq!(e.n_c, 2);
    }

    #[test]
    fn integrator_exact_when_big_data_is_everything() {
        let ys = [1.0, 0.0, 3.5, 2.0];
        let units = ys
            .iter()
            .enumerate()
            .map(|(i, &y)| u(i as u64, y, true, i == 0, 5.0))
            .collect();
        let f = PopulationFrame::new(units, 1, vec!["x".into()]).unwrap();
        assert_eq!(data_integrator(&f).unwrap().t_p, ys.iter().sum::<f64>());
    }

    #[test]
    fn integrator_without_donors_is_degenerate() {
        let f = PopulationFrame::new(
            vec![u(1, 1.0, true, true, 2.0), u(2, 0.0, false, false, 0.0)],
            1,
            vec!["x".into()],
        )
        .unwrap();
        let e = data_integrator(&f).unwrap_err();
        assert!(matches!(e, Error::DegenerateDesign(_)));
        assert_eq!(e.exit_code(), 3);
    }

    #[test]
    fn already_calibrated_gives_uniform() {
        let t = [10.0, 6.0, 8.0];
        let cw = calibration_weights(&t, 8.0 + 5.0, 2.0, 3.0).unwrap();
        for w in &cw.w {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(!cw.fallback);
    }

    #[test]
    fn two_rank_hand_example() {
        let cw = calibration_weights(&[10.0, 6.0], 9.0, 0.0, 0.0).unwrap();
        assert!((cw.w[0] - 0.75).abs() < 1e-15);
        assert!((cw.w[1] - 0.25).abs() < 1e-15);
        assert!((0.75 * 10.0 + 0.25 * 6.0 - 9.0f64).abs() < 1e-15);
    }

    /// Solves the stationarity conditions of the Lagrangian directly.
    fn lagrange_solution(t: &[f64], target: f64) -> Vec<f64> {
        let k = t.len();
        let n = k + 2;
        let mut a = DMatrix::<f64>::zeros(n, n);
        let mut b = DVector::<f64>::zeros(n);
        for j in 0..k {
            // 2k(w_j - 1/k) - λ1 T_j - λ2 = 0
            a[(j, j)] = 2.0 * k as f64;
            a[(j, k)] = -t[j];
            a[(j, k + 1)] = -1.0;
            b[j] = 2.0;
            a[(k, j)] = t[j];
            a[(k + 1, j)] = 1.0;
        }
        b[k] = target;
        b[k + 1] = 1.0;
        let x = a.lu().solve(&b).unwrap();
        x.iter().take(k).copied().collect()
    }

    #[test]
    fn matches_lagrange_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let k = rng.random_range(2..8);
            let t: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..500.0)).collect();
            let tb = rng.random_range(0.0..100.0);
            let tp = tb + t.iter().sum::<f64>() / k as f64 + rng.random_range(-40.0..40.0);
            let cw = calibration_weights(&t, tp, tb, 0.0).unwrap();
            let lg = lagrange_solution(&t, tp - tb);
            for (a, b) in cw.w.iter().zip(&lg) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn degenerate_spread_falls_back() {
        let cw = calibration_weights(&[7.0], 9.0, 1.0, 0.0).unwrap();
        assert_eq!(cw.w, vec![1.0]);
        assert!(cw.fallback);
        assert_eq!(cw.residual, 1.0);
        let cw = calibration_weights(&[7.0], 8.0, 1.0, 0.0).unwrap();
        assert!(!cw.fallback);
        let cw = calibration_weights(&[4.0, 4.0, 4.0], 10.0, 0.0, 0.0).unwrap();
        assert!(cw.fallback);
        assert!(calibration_weights(&[], 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn negative_weights_flagged_not_clamped() {
        let cw = calibration_weights(&[10.0, 0.0], 12.0, 0.0, 0.0).unwrap();
        assert!(cw.out_of_range);
        assert!((cw.w[0] - 1.2).abs() < 1e-12 && (cw.w[1] + 0.2).abs() < 1e-12);
    }

    #[test]
    fn weights_approach_uniform_continuously() {
        let t = [30.0, 20.0, 12.0, 5.0];
        let base = t.iter().sum::<f64>() / 4.0;
        let mut last = f64::INFINITY;
        for e in [1.0, 1e-2, 1e-4, 1e-8] {
            let cw = calibration_weights(&t, base + e, 0.0, 0.0).unwrap();
            let dev = cw.w.iter().map(|w| (w - 0.25).abs()).fold(0.0, f64::max);
            assert!(dev < last);
            last = dev;
        }
        assert!(last < 1e-9);
    }

    #[test]
    fn area_totals_sum_to_integrator() {
        for seed in 0..5 {
            let f = random_frame(seed, 1500, 3, 3).mask_unobserved();
            let table = search_neighbors(&f, 5, &FeatureMask::all(3).unwrap()).unwrap();
            let (res, _) = calibrate(&f, &table).unwrap();
            assert!(!res.fallback);
            let s: f64 = res.per_area.iter().sum();
            assert!((s - res.integrator.t_p).abs() <= 1e-9 * res.integrator.t_p.abs());
            assert!((res.t_cknn - res.integrator.t_p).abs() <= 1e-6 * res.integrator.t_p.abs());
            assert!((res.w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_area_total_is_national() {
        let f = random_frame(8, 800, 1, 2).mask_unobserved();
        let table = search_neighbors(&f, 3, &FeatureMask::all(2).unwrap()).unwrap();
        let (res, _) = calibrate(&f, &table).unwrap();
        assert!((res.per_area[0] - res.t_cknn).abs() < 1e-9 * res.t_cknn);
    }

    #[test]
    fn fully_observed_area_is_exact() {
        // area 2 has no units to impute
        let mut units: Vec<UnitRecord> = random_frame(2, 400, 1, 2).into_units();
        units.push(UnitRecord {
            area_id: 2,
            features: vec![0.0, 0.0],
            ..u(90_001, 1.0, true, false, 0.0)
        });
        units.push(UnitRecord {
            area_id: 2,
            features: vec![0.0, 0.0],
            ..u(90_002, 1.0, false, true, 4.0)
        });
        units.push(UnitRecord {
            area_id: 2,
            features: vec![0.0, 0.0],
            ..u(90_003, 0.0, true, false, 0.0)
        });
        let f = PopulationFrame::new(units, 2, vec!["f0".into(), "f1".into()])
            .unwrap()
            .mask_unobserved();
        let table = search_neighbors(&f, 3, &FeatureMask::all(2).unwrap()).unwrap();
        let (res, _) = calibrate(&f, &table).unwrap();
        assert_eq!(res.per_area[1], 2.0);
    }
}
