//! Hassanat distance (HasD).
//!
//! Each coordinate contributes a bounded ratio distance in `[0, 1)`; the
//! distance between two vectors is the mean over the selected coordinates.
//! No scaling is applied to the inputs.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A non-empty, sorted set of feature indices.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct FeatureMask(Vec<usize>);

impl FeatureMask {
    /// Builds a mask from any index list; duplicates are dropped.
    pub fn new(indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut v: Vec<usize> = indices.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        if v.is_empty() {
            return Err(Error::Domain("feature mask is empty".into()));
        }
        Ok(FeatureMask(v))
    }

    /// All of `0..p`.
    pub fn all(p: usize) -> Result<Self> {
        Self::new(0..p)
    }

    /// Checks that every index is below `p_max`.
    pub fn check(&self, p_max: usize) -> Result<()> {
        match self.0.last() {
            Some(&last) if last < p_max => Ok(()),
            _ => Err(Error::Domain(format!("feature mask {self} exceeds {p_max} features"))),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    /// Number of features used, the `p` of the HasD average.
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Human-readable label using `names`, e.g. `age+labour_force`.
    pub fn label(&self, names: &[String]) -> String {
        self.0
            .iter()
            .map(|&i| names.get(i).cloned().unwrap_or_else(|| i.to_string()))
            .collect::<Vec<_>>()
            .join("+")
    }

    /// Parses `age+sex` style labels (names or indices).
    pub fn parse(label: &str, names: &[String]) -> Result<Self> {
        let idx = label
            .split(['+', ','])
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| {
                names
                    .iter()
                    .position(|n| n == t)
                    .or_else(|| t.parse().ok())
                    .ok_or_else(|| Error::Domain(format!("unknown feature {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mask = Self::new(idx)?;
        mask.check(names.len())?;
        Ok(mask)
    }
}

impl fmt::Display for FeatureMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        write!(f, "{}", parts.join("+"))
    }
}

impl TryFrom<Vec<usize>> for FeatureMask {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<FeatureMask> for Vec<usize> {
    fn from(m: FeatureMask) -> Self {
        m.0
    }
}

/// Per-coordinate distance without the finiteness check.
#[inline]
pub(crate) fn component(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    if lo >= 0.0 {
        1.0 - (1.0 + lo) / (1.0 + hi)
    } else {
        let shift = lo.abs();
        1.0 - (1.0 + lo + shift) / (1.0 + hi + shift)
    }
}

/// HasD component `D(a, b)`, in `[0, 1]`.
///
/// `D(0, 0) = 0` by definition, and more generally `D(a, a) = 0`.
pub fn hasd_component(a: f64, b: f64) -> Result<f64> {
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::Domain(format!("non-finite HasD input ({a}, {b})")));
    }
    Ok(component(a, b))
}

/// Masked distance without validation; `x` and `y` are full feature rows.
#[inline]
pub(crate) fn distance_masked(x: &[f64], y: &[f64], mask: &[usize]) -> f64 {
    let s: f64 = mask.iter().map(|&l| component(x[l], y[l])).sum();
    s / mask.len() as f64
}

/// Distance between two already-projected rows of equal length.
#[inline]
pub(crate) fn distance_dense(x: &[f64], y: &[f64]) -> f64 {
    let s: f64 = x.iter().zip(y).map(|(&a, &b)| component(a, b)).sum();
    s / x.len() as f64
}

/// Mean HasD component over the coordinates in `mask`.
pub fn hasd_distance(x: &[f64], y: &[f64], mask: &FeatureMask) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Domain(format!(
            "vector lengths differ ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    mask.check(x.len())?;
    for &l in mask.indices() {
        if !x[l].is_finite() || !y[l].is_finite() {
            return Err(Error::Domain("non-finite HasD input".into()));
        }
    }
    Ok(distance_masked(x, y, mask.indices()))
}
