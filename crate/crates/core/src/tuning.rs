//! K-fold cross-validation on the donor set and grid search over the number
//! of neighbours and the feature subset.
//!
//! The objective is the per-area *net* prediction error: within each fold the
//! signed losses of held-out points are summed per area, the absolute values
//! of those sums are added up over areas and folds, and the total is divided
//! by `|D|`. Errors in one area never offset errors in another.
//!
//! Prediction uses the unweighted mean of the `k` nearest donors drawn from
//! `D` minus the held-out fold. For a binary response the mean is classified
//! as 1 when it exceeds 0.5, so each loss is +1 (false positive), -1 (false
//! negative) or 0.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::PopulationFrame;
use crate::hasd::FeatureMask;
use crate::imputer::DonorPool;
use crate::rng;

/// Balanced random assignment of the donors `D` to folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    /// Fold (0-based) of each donor, aligned with [`PopulationFrame::donors`].
    pub fold_of: Vec<usize>,
    pub n_folds: usize,
    pub seed: u64,
}

impl FoldAssignment {
    /// Sizes of the folds.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.n_folds];
        self.fold_of.iter().for_each(|&f| s[f] += 1);
        s
    }
}

/// Randomly partitions `n_donors` points into `n_folds` folds whose sizes
/// differ by at most one.
pub fn assign_folds(n_donors: usize, n_folds: usize, seed: u64) -> Result<FoldAssignment> {
    if n_folds == 0 || n_folds > n_donors {
        return Err(Error::Capacity(format!(
            "cannot split {n_donors} donors into {n_folds} folds"
        )));
    }
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n_donors).collect();
    order.shuffle(&mut rng::substream(seed, "folds", 0));
    let mut fold_of = vec![0; n_donors];
    for (i, &pos) in order.iter().enumerate() {
        fold_of[pos] = i % n_folds;
    }
    Ok(FoldAssignment { fold_of, n_folds, seed })
}

fn is_binary(frame: &PopulationFrame) -> bool {
    frame
        .donors()
        .iter()
        .all(|&r| matches!(frame.observed_y(r), y if y == 0.0 || y == 1.0))
}

/// Test error rates for several `k` sharing one neighbour search per fold.
///
/// Returns one value per entry of `ks`, in the same order.
pub fn cv_objective_path(
    frame: &PopulationFrame,
    ks: &[usize],
    mask: &FeatureMask,
    folds: &FoldAssignment,
) -> Result<Vec<f64>> {
    let donors = frame.donors();
    if folds.fold_of.len() != donors.len() {
        return Err(Error::Alignment(format!(
            "fold assignment covers {} points, |D| = {}",
            folds.fold_of.len(),
            donors.len()
        )));
    }
    let k_max = match ks.iter().max() {
        Some(&k) if k > 0 && ks.iter().all(|&k| k > 0) => k,
        _ => return Err(Error::Domain("k values must be positive and non-empty".into())),
    };
    let binary = is_binary(frame);
    let n_areas = frame.n_areas();
    let mut totals = vec![0.0; ks.len()];

    for fold in 0..folds.n_folds {
        let held: Vec<usize> = (0..donors.len())
            .filter(|&pos| folds.fold_of[pos] == fold)
            .map(|pos| donors[pos])
            .collect();
        let train: Vec<usize> = (0..donors.len())
            .filter(|&pos| folds.fold_of[pos] != fold)
            .map(|pos| donors[pos])
            .collect();
        if train.len() < k_max {
            return Err(Error::Capacity(format!(
                "fold {}: {} training donors cannot supply k = {k_max}",
                fold + 1,
                train.len()
            )));
        }
        let pool = DonorPool::new(frame, &train, mask)?;
        let neighbours: Vec<Vec<f64>> = held
            .par_iter()
            .map(|&row| {
                let q = pool.project(&frame.unit(row).features);
                pool.nearest(&q, k_max, None)
                    .map(|nb| nb.into_iter().map(|n| n.y).collect())
            })
            .collect::<Result<_>>()?;

        // net[k index][area]
        let mut net = vec![vec![0.0; n_areas]; ks.len()];
        for (&row, ys) in held.iter().zip(&neighbours) {
            let y = frame.observed_y(row);
            let area = frame.unit(row).area_id - 1;
            for (ki, &k) in ks.iter().enumerate() {
                let mean = ys[..k].iter().sum::<f64>() / k as f64;
                let pred = if binary { f64::from(u8::from(mean > 0.5)) } else { mean };
                net[ki][area] += pred - y;
            }
        }
        for (t, per_area) in totals.iter_mut().zip(&net) {
            *t += per_area.iter().map(|e| e.abs()).sum::<f64>();
        }
    }
    let n_d = donors.len() as f64;
    Ok(totals.into_iter().map(|t| t / n_d).collect())
}

/// Estimated test error rate of the `k`-NN predictor on `mask`.
pub fn cv_objective(frame: &PopulationFrame, k: usize, mask: &FeatureMask, folds: &FoldAssignment) -> Result<f64> {
    Ok(cv_objective_path(frame, &[k], mask, folds)?[0])
}

/// One evaluated hyper-parameter combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub k: usize,
    pub mask: FeatureMask,
    pub test_error_rate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridResult {
    pub best: GridPoint,
    /// Every point, subsets outermost and `k` innermost.
    pub table: Vec<GridPoint>,
    pub folds: FoldAssignment,
}

/// Every non-empty subset of `p` features, ordered by binary counting with
/// the last feature as the lowest bit.
///
/// For features `(age, birth_region, labour_force, sex)` this yields `sex`,
/// `labour_force`, `labour_force+sex`, `birth_region`, ... , all four.
pub fn all_subsets(p: usize) -> Vec<FeatureMask> {
    (1u32..(1 << p))
        .map(|bits| {
            FeatureMask::new((0..p).filter(|b| bits & (1 << b) != 0).map(|b| p - 1 - b))
                .expect("non-empty by construction")
        })
        .collect()
}

/// Evaluates every `(k, subset)` on one shared fold assignment and returns
/// the minimiser; ties go to the smaller `k`, then the lexicographically
/// smaller subset.
pub fn grid_search(
    frame: &PopulationFrame,
    ks: &[usize],
    subsets: &[FeatureMask],
    n_folds: usize,
    seed: u64,
) -> Result<GridResult> {
    if ks.is_empty() || subsets.is_empty() {
        return Err(Error::Domain("grid needs at least one k and one feature subset".into()));
    }
    let folds = assign_folds(frame.donors().len(), n_folds, seed)?;
    let rows: Vec<Vec<f64>> = subsets
        .par_iter()
        .map(|mask| cv_objective_path(frame, ks, mask, &folds))
        .collect::<Result<_>>()?;
    let table: Vec<GridPoint> = subsets
        .iter()
        .zip(rows)
        .flat_map(|(mask, errs)| {
            ks.iter().zip(errs).map(move |(&k, e)| GridPoint {
                k,
                mask: mask.clone(),
                test_error_rate: e,
            })
        })
        .collect();
    let best = table
        .iter()
        .min_by(|a, b| {
            a.test_error_rate
                .total_cmp(&b.test_error_rate)
                .then(a.k.cmp(&b.k))
                .then(a.mask.cmp(&b.mask))
        })
        .cloned()
        .expect("non-empty grid");
    Ok(GridResult { best, table, folds })
}

/// Writes the grid as `k,mask,test_error_rate`.
pub fn write_grid_csv<W: Write>(table: &[GridPoint], names: &[String], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["k", "mask", "test_error_rate"])?;
    for g in table {
        w.write_record([g.k.to_string(), g.mask.label(names), g.test_error_rate.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::UnitRecord;
    use crate::imputer::tests::random_frame;

    fn donor(id: u64, area: usize, x: f64, y: f64) -> UnitRecord {
        UnitRecord {
            unit_id: id,
            area_id: area,
            features: vec![x],
            y: Some(y),
            delta: false,
            in_sample: true,
            design_weight: 1.0,
        }
    }

    #[test]
    fn fold_sizes_balanced_and_reproducible() {
        let f = assign_folds(10, 5, 1).unwrap();
        assert_eq!(f.sizes(), vec![2; 5]);
        let g = assign_folds(11, 5, 1).unwrap();
        let mut s = g.sizes();
        s.sort_unstable();
        assert_eq!(s, vec![2, 2, 2, 2, 3]);
        assert_eq!(assign_folds(11, 5, 1).unwrap(), g);
        assert_ne!(assign_folds(40, 5, 1).unwrap(), assign_folds(40, 5, 2).unwrap());
        assert!(matches!(assign_folds(3, 5, 0), Err(Error::Capacity(_))));
    }

    #[test]
    fn perfect_predictor_scores_zero() {
        // every point has an identical twin in the other fold
        let units: Vec<UnitRecord> = (0..8u64)
            .map(|i| donor(i, 1 + (i as usize % 2), (i / 2) as f64, ((i / 2) % 2) as f64))
            .collect();
        let f = PopulationFrame::new(units, 2, vec!["x".into()]).unwrap();
        let folds = FoldAssignment {
            fold_of: (0..8).map(|i| i % 2).collect(),
            n_folds: 2,
            seed: 0,
        };
        assert_eq!(cv_objective(&f, 1, &FeatureMask::all(1).unwrap(), &folds).unwrap(), 0.0);
    }

    /// Two held-out points: one false positive, one false negative.
    fn fp_fn_frame(area_of_second: usize) -> PopulationFrame {
        let units = vec![
            donor(1, 1, 0.0, 0.0),               // held out, neighbour says 1 -> FP
            donor(2, area_of_second, 10.0, 1.0), // held out, neighbour says 0 -> FN
            donor(3, 1, 0.0, 1.0),
            donor(4, 1, 10.0, 0.0),
        ];
        PopulationFrame::new(units, 2, vec!["x".into()]).unwrap()
    }

    #[test]
    fn same_area_errors_cancel() {
        let f = fp_fn_frame(1);
        let folds = FoldAssignment {
            fold_of: vec![0, 0, 1, 1],
            n_folds: 2,
            seed: 0,
        };
        let mask = FeatureMask::all(1).unwrap();
        // fold 0 nets to zero; fold 1 (points 3,4) are predicted from 1,2: both wrong, also cancel
        assert_eq!(cv_objective(&f, 1, &mask, &folds).unwrap(), 0.0);
    }

    #[test]
    fn cross_area_errors_do_not_cancel() {
        let f = fp_fn_frame(2);
        let folds = FoldAssignment {
            fold_of: vec![0, 0, 1, 1],
            n_folds: 2,
            seed: 0,
        };
        let mask = FeatureMask::all(1).unwrap();
        // fold 0 contributes 2; fold 1: point 3 (area 1) predicted 0 -> FN, point 4 (area 1) predicted 1 -> FP, cancel
        assert_eq!(cv_objective(&f, 1, &mask, &folds).unwrap(), 2.0 / 4.0);
    }

    #[test]
    fn donor_shortage_names_fold() {
        let f = fp_fn_frame(1);
        let folds = FoldAssignment {
            fold_of: vec![0, 0, 1, 1],
            n_folds: 2,
            seed: 0,
        };
        let e = cv_objective(&f, 3, &FeatureMask::all(1).unwrap(), &folds).unwrap_err();
        assert!(e.to_string().contains("fold 1"));
    }

    #[test]
    fn relabelling_folds_is_invariant() {
        let f = random_frame(31, 400, 4, 3).mask_unobserved();
        let folds = assign_folds(f.donors().len(), 4, 9).unwrap();
        let relabelled = FoldAssignment {
            fold_of: folds.fold_of.iter().map(|&x| (x + 1) % 4).collect(),
            ..folds.clone()
        };
        let mask = FeatureMask::new([0, 2]).unwrap();
        let a = cv_objective_path(&f, &[1, 3, 5], &mask, &folds).unwrap();
        let b = cv_objective_path(&f, &[1, 3, 5], &mask, &relabelled).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn path_agrees_with_single_k() {
        let f = random_frame(32, 400, 3, 3).mask_unobserved();
        let folds = assign_folds(f.donors().len(), 5, 3).unwrap();
        let mask = FeatureMask::all(3).unwrap();
        let path = cv_objective_path(&f, &[2, 7, 4], &mask, &folds).unwrap();
        for (k, e) in [2, 7, 4].into_iter().zip(path) {
            assert_eq!(cv_objective(&f, k, &mask, &folds).unwrap(), e);
        }
    }

    #[test]
    fn duplicating_donors_cannot_hurt_one_nn() {
        // distinct feature vectors so a twin is the unique nearest neighbour
        let units: Vec<UnitRecord> = (0..60u64)
            .map(|i| UnitRecord {
                features: vec![i as f64, ((i * 7) % 13) as f64],
                ..donor(i, 1 + (i as usize % 3), 0.0, f64::from(u8::from(i % 5 < 2)))
            })
            .collect();
        let f = PopulationFrame::new(units.clone(), 3, vec!["a".into(), "b".into()]).unwrap();
        let mask = FeatureMask::all(2).unwrap();
        let folds = assign_folds(f.donors().len(), 3, 5).unwrap();
        let base = cv_objective(&f, 1, &mask, &folds).unwrap();

        let mut doubled_units = units.clone();
        doubled_units.extend(units.iter().map(|u| UnitRecord {
            unit_id: u.unit_id + 1000,
            ..u.clone()
        }));
        let g = PopulationFrame::new(doubled_units, 3, vec!["a".into(), "b".into()]).unwrap();
        let mut fold_of = folds.fold_of.clone();
        fold_of.extend(folds.fold_of.iter().map(|&x| (x + 1) % 3));
        let doubled = FoldAssignment { fold_of, ..folds };
        let dup = cv_objective(&g, 1, &mask, &doubled).unwrap();
        assert_eq!(dup, 0.0);
        assert!(dup <= base);
    }

    #[test]
    fn subsets_follow_binary_counting() {
        let s = all_subsets(4);
        assert_eq!(s.len(), 15);
        let names: Vec<String> = ["age", "br", "lfs", "sex"].iter().map(|s| s.to_string()).collect();
        let labels: Vec<String> = s.iter().map(|m| m.label(&names)).collect();
        assert_eq!(
            labels,
            [
                "sex",
                "lfs",
                "lfs+sex",
                "br",
                "br+sex",
                "br+lfs",
                "br+lfs+sex",
                "age",
                "age+sex",
                "age+lfs",
                "age+lfs+sex",
                "age+br",
                "age+br+sex",
                "age+br+lfs",
                "age+br+lfs+sex"
            ]
        );
    }

    #[test]
    fn grid_search_shape_and_tie_rule() {
        let f = random_frame(34, 600, 3, 3).mask_unobserved();
        let ks: Vec<usize> = (1..=6).collect();
        let subsets = all_subsets(3);
        let g = grid_search(&f, &ks, &subsets, 5, 1).unwrap();
        assert_eq!(g.table.len(), 42);
        let min = g.table.iter().map(|p| p.test_error_rate).fold(f64::INFINITY, f64::min);
        assert_eq!(g.best.test_error_rate, min);
        let first = g
            .table
            .iter()
            .filter(|p| p.test_error_rate == min)
            .min_by_key(|p| (p.k, p.mask.clone()))
            .unwrap();
        assert_eq!(&g.best, first);

        let one = grid_search(&f, &[3], &subsets[..1], 5, 1).unwrap();
        assert_eq!(one.table.len(), 1);
        assert_eq!(one.best, one.table[0]);
        assert!(grid_search(&f, &[], &subsets, 5, 1).is_err());
    }

    #[test]
    fn grid_csv_layout() {
        let t = vec![GridPoint {
            k: 5,
            mask: FeatureMask::new([0, 1]).unwrap(),
            test_error_rate: 0.25,
        }];
        let mut buf = Vec::new();
        write_grid_csv(&t, &["age".into(), "sex".into()], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "k,mask,test_error_rate\n5,age+sex,0.25\n"
        );
    }
}
