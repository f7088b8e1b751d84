//! Exact kNN donor search under HasD, donor-usage bookkeeping and imputed
//! value assembly.
//!
//! Donors always come from `D = A ∩ C`. Neighbours are ranked by
//! `(distance, donor unit_id)` so the search is deterministic under ties.

use std::cmp::Ordering;
use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::frame::PopulationFrame;
use crate::hasd::{self, FeatureMask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Neighbor {
    pub unit_id: u64,
    pub row: usize,
    pub distance: f64,
    pub y: f64,
}

/// The `k` ranked donors of one target.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NeighborSet {
    pub target_id: u64,
    pub target_row: usize,
    pub area_id: usize,
    pub donors: Vec<Neighbor>,
}

impl NeighborSet {
    /// `Σ_j w_j y_{i(j)}`
    pub fn weighted(&self, w: &[f64]) -> f64 {
        self.donors.iter().zip(w).map(|(d, wj)| wj * d.y).sum()
    }
}

/// A donor pool with its features projected onto a mask, stored row-major.
#[derive(Debug, Clone)]
pub struct DonorPool {
    mask: FeatureMask,
    rows: Vec<usize>,
    ids: Vec<u64>,
    y: Vec<f64>,
    features: Vec<f64>,
}

impl DonorPool {
    /// Pool over `rows` of `frame`; every row must carry an observed `y`.
    pub fn new(frame: &PopulationFrame, rows: &[usize], mask: &FeatureMask) -> Result<Self> {
        mask.check(frame.n_features())?;
        let mut rows = rows.to_vec();
        rows.sort_unstable();
        let p = mask.len();
        let mut features = Vec::with_capacity(rows.len() * p);
        for &r in &rows {
            let x = &frame.unit(r).features;
            features.extend(mask.indices().iter().map(|&l| x[l]));
        }
        Ok(DonorPool {
            mask: mask.clone(),
            ids: rows.iter().map(|&r| frame.unit(r).unit_id).collect(),
            y: rows.iter().map(|&r| frame.observed_y(r)).collect(),
            rows,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn mask(&self) -> &FeatureMask {
        &self.mask
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn contains_row(&self, row: usize) -> bool {
        self.rows.binary_search(&row).is_ok()
    }

    /// Projects a full feature row onto the pool's mask.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.mask.indices().iter().map(|&l| x[l]).collect()
    }

    /// The `k` nearest pool members to `query` (already projected), skipping
    /// the member at frame row `exclude`.
    pub fn nearest(&self, query: &[f64], k: usize, exclude: Option<usize>) -> Result<Vec<Neighbor>> {
        let p = self.mask.len();
        let mut cand: Vec<(f64, u64, usize)> = self
            .features
            .chunks_exact(p)
            .enumerate()
            .filter(|&(i, _)| Some(self.rows[i]) != exclude)
            .map(|(i, x)| (hasd::distance_dense(query, x), self.ids[i], i))
            .collect();
        if k == 0 || cand.len() < k {
            return Err(Error::Capacity(format!(
                "donor pool of {} cannot supply k = {k} neighbours",
                cand.len()
            )));
        }
        let cmp =
            |a: &(f64, u64, usize), b: &(f64, u64, usize)| -> Ordering { a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)) };
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, cmp);
            cand.truncate(k);
        }
        cand.sort_unstable_by(cmp);
        Ok(cand
            .into_iter()
            .map(|(distance, unit_id, i)| Neighbor {
                unit_id,
                row: self.rows[i],
                distance,
                y: self.y[i],
            })
            .collect())
    }
}

/// The `k` nearest donors of the unit at `target_row`.
///
/// The target must not be a member of `pool`.
pub fn find_neighbors(frame: &PopulationFrame, target_row: usize, pool: &DonorPool, k: usize) -> Result<NeighborSet> {
    if pool.contains_row(target_row) {
        return Err(Error::Domain(format!(
            "target {} is a member of its own donor pool",
            frame.unit(target_row).unit_id
        )));
    }
    let u = frame.unit(target_row);
    Ok(NeighborSet {
        target_id: u.unit_id,
        target_row,
        area_id: u.area_id,
        donors: pool.nearest(&pool.project(&u.features), k, None)?,
    })
}

/// Leave-one-out neighbours of a pool member, drawn from the pool minus
/// itself.
pub fn find_neighbors_loo(frame: &PopulationFrame, row: usize, pool: &DonorPool, k: usize) -> Result<NeighborSet> {
    let u = frame.unit(row);
    Ok(NeighborSet {
        target_id: u.unit_id,
        target_row: row,
        area_id: u.area_id,
        donors: pool.nearest(&pool.project(&u.features), k, Some(row))?,
    })
}

/// Per-donor, per-area, per-rank usage counts `n_km^(j)(i)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DonorUsage {
    donor_rows: Vec<usize>,
    position: HashMap<usize, usize>,
    n_areas: usize,
    k: usize,
    counts: Vec<u32>,
}

impl DonorUsage {
    pub fn empty(donor_rows: &[usize], n_areas: usize, k: usize) -> Self {
        DonorUsage {
            donor_rows: donor_rows.to_vec(),
            position: donor_rows.iter().enumerate().map(|(i, &r)| (r, i)).collect(),
            n_areas,
            k,
            counts: vec![0; donor_rows.len() * n_areas * k],
        }
    }

    fn slot(&self, pos: usize, area_id: usize, rank: usize) -> usize {
        (pos * self.n_areas + area_id - 1) * self.k + rank
    }

    /// Tallies one neighbour set (its target's area, each donor's rank).
    pub fn record(&mut self, set: &NeighborSet) {
        for (rank, d) in set.donors.iter().enumerate() {
            let pos = self.position[&d.row];
            let s = self.slot(pos, set.area_id, rank);
            self.counts[s] += 1;
        }
    }

    /// Adds another tally over the same donors.
    pub fn merge(mut self, other: &DonorUsage) -> Self {
        debug_assert_eq!(self.donor_rows, other.donor_rows);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn donor_rows(&self) -> &[usize] {
        &self.donor_rows
    }

    /// `n_km^(j)(i)` for the donor at frame `row`, `rank` counted from 0.
    /// Zero for rows that are not donors.
    pub fn count(&self, row: usize, area_id: usize, rank: usize) -> u32 {
        self.position
            .get(&row)
            .map_or(0, |&pos| self.counts[self.slot(pos, area_id, rank)])
    }

    /// `K_km(i) = Σ_j n_km^(j)(i) w_j`.
    pub fn weighted(&self, row: usize, area_id: usize, w: &[f64]) -> f64 {
        match self.position.get(&row) {
            None => 0.0,
            Some(&pos) => {
                let s = self.slot(pos, area_id, 0);
                self.counts[s..s + self.k]
                    .iter()
                    .zip(w)
                    .map(|(&c, wj)| f64::from(c) * wj)
                    .sum()
            }
        }
    }

    /// Total uses of rank `rank` across donors and areas.
    pub fn rank_uses(&self, rank: usize) -> u64 {
        self.counts
            .iter()
            .skip(rank)
            .step_by(self.k)
            .map(|&c| u64::from(c))
            .sum()
    }

    /// Uses of rank `rank` by targets of `area_id`.
    pub fn rank_uses_in_area(&self, rank: usize, area_id: usize) -> u64 {
        (0..self.donor_rows.len())
            .map(|pos| u64::from(self.counts[self.slot(pos, area_id, rank)]))
            .sum()
    }

    /// Hash of the full tally, for checking it is left untouched.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.donor_rows.hash(&mut h);
        self.n_areas.hash(&mut h);
        self.k.hash(&mut h);
        self.counts.hash(&mut h);
        h.finish()
    }
}

/// Neighbour sets for every target in `C \ D` plus the donor tally.
#[derive(Debug, Clone)]
pub struct NeighborTable {
    pub k: usize,
    pub mask: FeatureMask,
    pub sets: Vec<NeighborSet>,
    pub usage: DonorUsage,
}

/// Searches the `k` nearest donors in `D` for every unit of `C \ D`.
pub fn search_neighbors(frame: &PopulationFrame, k: usize, mask: &FeatureMask) -> Result<NeighborTable> {
    let pool = DonorPool::new(frame, frame.donors(), mask)?;
    if pool.len() < k || k == 0 {
        return Err(Error::Capacity(format!(
            "|D| = {} cannot supply k = {k} neighbours",
            pool.len()
        )));
    }
    let sets: Vec<NeighborSet> = frame
        .targets()
        .par_iter()
        .map(|&row| find_neighbors(frame, row, &pool, k))
        .collect::<Result<_>>()?;
    let empty = DonorUsage::empty(frame.donors(), frame.n_areas(), k);
    let usage = sets
        .par_chunks(4096)
        .fold(
            || empty.clone(),
            |mut acc, chunk| {
                chunk.iter().for_each(|s| acc.record(s));
                acc
            },
        )
        .reduce(|| empty.clone(), |a, b| a.merge(&b));
    Ok(NeighborTable {
        k,
        mask: mask.clone(),
        sets,
        usage,
    })
}

/// `T̂^(j) = Σ_{i ∈ C\D} y_{i(j)}` for `j = 1..k`.
pub fn rank_totals(sets: &[NeighborSet], k: usize) -> Vec<f64> {
    let mut t = vec![0.0; k];
    for s in sets {
        for (tj, d) in t.iter_mut().zip(&s.donors) {
            *tj += d.y;
        }
    }
    t
}

/// Imputed values `ŷ_i` for every unit of `C`, indexed by frame row.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputedValues {
    values: Vec<Option<f64>>,
}

impl ImputedValues {
    pub fn by_row(&self, row: usize) -> Option<f64> {
        self.values[row]
    }

    pub fn get(&self, frame: &PopulationFrame, unit_id: u64) -> Option<f64> {
        frame.row_of(unit_id).and_then(|r| self.values[r])
    }

    /// `(unit_id, ŷ)` pairs in frame order.
    pub fn iter<'a>(&'a self, frame: &'a PopulationFrame) -> impl Iterator<Item = (u64, f64)> + 'a {
        self.values
            .iter()
            .enumerate()
            .filter_map(move |(r, v)| v.map(|v| (frame.unit(r).unit_id, v)))
    }

    /// `Σ_{i ∈ rows} ŷ_i`, skipping rows without an imputed value.
    pub fn total(&self, rows: &[usize]) -> f64 {
        rows.iter().filter_map(|&r| self.values[r]).sum()
    }
}

pub(crate) fn check_weights(w: &[f64], k: usize) -> Result<()> {
    if w.len() != k {
        return Err(Error::Domain(format!("{} weights for k = {k}", w.len())));
    }
    let s: f64 = w.iter().sum();
    if !w.iter().all(|x| x.is_finite()) || (s - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("weights must be finite and sum to 1 (sum {s})")));
    }
    Ok(())
}

impl NeighborTable {
    /// Observed `y` on `D`, `Σ_j w_j y_{i(j)}` on `C \ D`.
    pub fn impute(&self, frame: &PopulationFrame, w: &[f64]) -> Result<ImputedValues> {
        check_weights(w, self.k)?;
        let mut values = vec![None; frame.len()];
        for &r in frame.donors() {
            values[r] = Some(frame.observed_y(r));
        }
        for s in &self.sets {
            values[s.target_row] = Some(s.weighted(w));
        }
        Ok(ImputedValues { values })
    }

    pub fn rank_totals(&self) -> Vec<f64> {
        rank_totals(&self.sets, self.k)
    }
}

/// Result of [`impute_all`].
#[derive(Debug, Clone)]
pub struct Imputation {
    pub values: ImputedValues,
    pub table: NeighborTable,
}

/// Searches neighbours and imputes every unit of `C` with donor weights `w`.
pub fn impute_all(frame: &PopulationFrame, k: usize, mask: &FeatureMask, w: &[f64]) -> Result<Imputation> {
    check_weights(w, k)?;
    let table = search_neighbors(frame, k, mask)?;
    let values = table.impute(frame, w)?;
    Ok(Imputation { values, table })
}
