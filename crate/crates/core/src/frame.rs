//! Population frame: unit records, validation, CSV ingestion and the derived
//! index sets.
//!
//! A frame partitions the population `U` into the big-data stratum `B`
//! (`delta = 1`) and its complement `C`. The probability sample `A` is
//! recorded independently of `delta`, so `A ∩ B` and `A ∩ C` both fall out of
//! the set algebra. `D = A ∩ C` is the donor/training set and `C \ D` holds
//! the units that must be imputed.
//!
//! All index sets hold row positions into [`PopulationFrame::units`], in
//! ascending order.

use std::collections::HashMap;
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One population unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub unit_id: u64,
    /// Small area, `1..=M`.
    pub area_id: usize,
    /// Categorical variables are stored as their integer codes.
    pub features: Vec<f64>,
    /// Response. Always present on `B` and `A`; may be absent elsewhere.
    pub y: Option<f64>,
    pub delta: bool,
    pub in_sample: bool,
    /// Inverse inclusion probability; only meaningful when `in_sample`.
    pub design_weight: f64,
}

/// Row positions of one small area's slices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AreaSlice {
    pub area_id: usize,
    pub units: Vec<usize>,
    /// `B_m`
    pub big: Vec<usize>,
    /// `C_m`
    pub missing: Vec<usize>,
    /// `A_m`
    pub sample: Vec<usize>,
    /// `D_m = A_m ∩ C_m`
    pub donors: Vec<usize>,
    /// `C_m \ D_m`
    pub targets: Vec<usize>,
}

/// Validated population frame with derived index sets.
///
/// Immutable after construction.
#[derive(Debug, Clone)]
pub struct PopulationFrame {
    units: Vec<UnitRecord>,
    n_areas: usize,
    feature_names: Vec<String>,
    position: HashMap<u64, usize>,
    big: Vec<usize>,
    missing: Vec<usize>,
    sample: Vec<usize>,
    donors: Vec<usize>,
    targets: Vec<usize>,
    areas: Vec<AreaSlice>,
}

impl PopulationFrame {
    /// Validates `units` and builds the index sets.
    ///
    /// `n_areas` is the declared `M`; every `area_id` must lie in `1..=M`.
    pub fn new(units: Vec<UnitRecord>, n_areas: usize, feature_names: Vec<String>) -> Result<Self> {
        if n_areas == 0 {
            return Err(Error::Validation("frame declares zero areas".into()));
        }
        if feature_names.is_empty() {
            return Err(Error::Schema("frame has no feature columns".into()));
        }
        let p = feature_names.len();
        let mut position = HashMap::with_capacity(units.len());
        for (row, u) in units.iter().enumerate() {
            if position.insert(u.unit_id, row).is_some() {
                return Err(Error::Schema(format!("duplicate unit_id {}", u.unit_id)));
            }
            if u.area_id == 0 || u.area_id > n_areas {
                return Err(Error::Validation(format!(
                    "unit {}: area_id {} outside 1..={n_areas}",
                    u.unit_id, u.area_id
                )));
            }
            if u.features.len() != p {
                return Err(Error::Validation(format!(
                    "unit {}: {} features, frame declares {p}",
                    u.unit_id,
                    u.features.len()
                )));
            }
            if u.features.iter().any(|x| !x.is_finite()) {
                return Err(Error::Validation(format!("unit {}: non-finite feature", u.unit_id)));
            }
            if let Some(y) = u.y {
                if !y.is_finite() {
                    return Err(Error::Validation(format!("unit {}: non-finite y", u.unit_id)));
                }
            }
            if u.in_sample {
                if !(u.design_weight > 0.0 && u.design_weight.is_finite()) {
                    return Err(Error::Validation(format!(
                        "unit {}: sampled unit needs a positive design weight",
                        u.unit_id
                    )));
                }
                if u.y.is_none() {
                    return Err(Error::Validation(format!("unit {}: sampled unit without y", u.unit_id)));
                }
            }
            if u.delta && u.y.is_none() {
                return Err(Error::Validation(format!(
                    "unit {}: big-data unit without y",
                    u.unit_id
                )));
            }
        }

        let mut frame = PopulationFrame {
            units,
            n_areas,
            feature_names,
            position,
            big: Vec::new(),
            missing: Vec::new(),
            sample: Vec::new(),
            donors: Vec::new(),
            targets: Vec::new(),
            areas: Vec::new(),
        };
        for (row, u) in frame.units.iter().enumerate() {
            if u.delta {
                frame.big.push(row);
            } else {
                frame.missing.push(row);
                if u.in_sample {
                    frame.donors.push(row);
                } else {
                    frame.targets.push(row);
                }
            }
            if u.in_sample {
                frame.sample.push(row);
            }
        }
        frame.areas = partition_by_area(&frame);
        Ok(frame)
    }

    pub fn units(&self) -> &[UnitRecord] {
        &self.units
    }

    pub fn into_units(self) -> Vec<UnitRecord> {
        self.units
    }

    pub fn unit(&self, row: usize) -> &UnitRecord {
        &self.units[row]
    }

    /// Row position of `unit_id`.
    pub fn row_of(&self, unit_id: u64) -> Option<usize> {
        self.position.get(&unit_id).copied()
    }

    /// `N`
    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// `M`
    pub fn n_areas(&self) -> usize {
        self.n_areas
    }

    /// `p_max`
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// `B`
    pub fn big(&self) -> &[usize] {
        &self.big
    }

    /// `C`
    pub fn missing(&self) -> &[usize] {
        &self.missing
    }

    /// `A`
    pub fn sample(&self) -> &[usize] {
        &self.sample
    }

    /// `D = A ∩ C`
    pub fn donors(&self) -> &[usize] {
        &self.donors
    }

    /// `C \ D`
    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    /// Per-area slices, indexed by `area_id - 1`.
    pub fn areas(&self) -> &[AreaSlice] {
        &self.areas
    }

    /// The observed response of a row in `B ∪ A`.
    ///
    /// Panics if called on a row whose response is not observed; the
    /// constructor guarantees `y` on `B` and `A`.
    pub fn observed_y(&self, row: usize) -> f64 {
        self.units[row]
            .y
            .unwrap_or_else(|| panic!("unit {} has no observed response", self.units[row].unit_id))
    }

    /// Sum of observed responses over `rows`.
    pub fn total(&self, rows: &[usize]) -> f64 {
        rows.iter().map(|&r| self.observed_y(r)).sum()
    }

    /// True when every observed response on `B ∪ A` is 0 or 1.
    pub fn is_binary_response(&self) -> bool {
        self.units
            .iter()
            .filter(|u| u.delta || u.in_sample)
            .all(|u| matches!(u.y, Some(y) if y == 0.0 || y == 1.0))
    }

    /// Copy of the frame with `y` removed outside `B ∪ A`, i.e. exactly what
    /// an analyst would hold.
    pub fn mask_unobserved(&self) -> PopulationFrame {
        let mut out = self.clone();
        for u in &mut out.units {
            if !(u.delta || u.in_sample) {
                u.y = None;
            }
        }
        out
    }
}

/// Builds the per-area slice table of `frame`.
///
/// Empty areas yield empty slices.
pub fn partition_by_area(frame: &PopulationFrame) -> Vec<AreaSlice> {
    let mut areas: Vec<AreaSlice> = (1..=frame.n_areas)
        .map(|area_id| AreaSlice {
            area_id,
            ..AreaSlice::default()
        })
        .collect();
    for (row, u) in frame.units.iter().enumerate() {
        let s = &mut areas[u.area_id - 1];
        s.units.push(row);
        if u.delta {
            s.big.push(row);
        } else {
            s.missing.push(row);
            if u.in_sample {
                s.donors.push(row);
            } else {
                s.targets.push(row);
            }
        }
        if u.in_sample {
            s.sample.push(row);
        }
    }
    areas
}

/// Column names used when reading a frame from delimited text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMapping {
    pub unit_id: String,
    pub area_id: String,
    pub delta: String,
    pub in_sample: String,
    pub design_weight: String,
    pub y: String,
    /// Feature columns in order. `None` takes every remaining column.
    pub features: Option<Vec<String>>,
    /// Declared number of areas. `None` uses the largest `area_id` present.
    pub n_areas: Option<usize>,
    pub delimiter: u8,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        ColumnMapping {
            unit_id: "unit_id".into(),
            area_id: "area_id".into(),
            delta: "delta".into(),
            in_sample: "in_sample".into(),
            design_weight: "design_weight".into(),
            y: "y".into(),
            features: None,
            n_areas: None,
            delimiter: b',',
        }
    }
}

fn parse_flag(field: &str, column: &str, line: u64) -> Result<bool> {
    match field.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::Validation(format!(
            "line {line}: column {column} must be 0 or 1, got {other:?}"
        ))),
    }
}

fn parse_num<T: std::str::FromStr>(field: &str, column: &str, line: u64) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Validation(format!("line {line}: cannot parse {column} value {field:?}")))
}

/// Reads and validates a frame from a delimited text file with a header row.
pub fn load_frame(path: impl AsRef<Path>, mapping: &ColumnMapping) -> Result<PopulationFrame> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::Schema(format!("cannot open {}: {e}", path.display())))?;
    read_frame(file, mapping)
}

/// [`load_frame`] over any reader.
pub fn read_frame<R: std::io::Read>(reader: R, mapping: &ColumnMapping) -> Result<PopulationFrame> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(mapping.delimiter)
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("missing column {name:?}")))
    };
    let c_id = find(&mapping.unit_id)?;
    let c_area = find(&mapping.area_id)?;
    let c_delta = find(&mapping.delta)?;
    let c_sample = find(&mapping.in_sample)?;
    let c_weight = find(&mapping.design_weight)?;
    let c_y = find(&mapping.y)?;
    let fixed = [c_id, c_area, c_delta, c_sample, c_weight, c_y];

    let (feature_cols, feature_names): (Vec<usize>, Vec<String>) = match &mapping.features {
        Some(names) => {
            let cols = names.iter().map(|n| find(n)).collect::<Result<Vec<_>>>()?;
            (cols, names.clone())
        }
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| !fixed.contains(i))
            .map(|(i, h)| (i, h.trim().to_string()))
            .unzip(),
    };
    if feature_cols.is_empty() {
        return Err(Error::Schema("no feature columns".into()));
    }

    let mut units = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let get = |c: usize| rec.get(c).unwrap_or("");
        let y_field = get(c_y).trim();
        let weight_field = get(c_weight).trim();
        units.push(UnitRecord {
            unit_id: parse_num(get(c_id), &mapping.unit_id, line)?,
            area_id: parse_num(get(c_area), &mapping.area_id, line)?,
            features: feature_cols
                .iter()
                .zip(&feature_names)
                .map(|(&c, n)| parse_num::<f64>(get(c), n, line))
                .collect::<Result<_>>()?,
            y: if y_field.is_empty() {
                None
            } else {
                Some(parse_num(y_field, &mapping.y, line)?)
            },
            delta: parse_flag(get(c_delta), &mapping.delta, line)?,
            in_sample: parse_flag(get(c_sample), &mapping.in_sample, line)?,
            design_weight: if weight_field.is_empty() {
                0.0
            } else {
                parse_num(weight_field, &mapping.design_weight, line)?
            },
        });
    }
    let n_areas = match mapping.n_areas {
        Some(m) => m,
        None => units.iter().map(|u| u.area_id).max().unwrap_or(0).max(1),
    };
    PopulationFrame::new(units, n_areas, feature_names)
}

/// Writes `frame` with the default column names; [`load_frame`] with the
/// default mapping and the same `n_areas` reads it back unchanged.
pub fn write_frame<W: std::io::Write>(frame: &PopulationFrame, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["unit_id", "area_id", "delta", "in_sample", "design_weight", "y"];
    header.extend(frame.feature_names.iter().map(String::as_str));
    w.write_record(&header)?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for u in &frame.units {
        row.clear();
        row.push(u.unit_id.to_string());
        row.push(u.area_id.to_string());
        row.push(u8::from(u.delta).to_string());
        row.push(u8::from(u.in_sample).to_string());
        row.push(u.design_weight.to_string());
        row.push(u.y.map(|y| y.to_string()).unwrap_or_default());
        row.extend(u.features.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// [`write_frame`] to a file path.
pub fn save_frame(frame: &PopulationFrame, path: impl AsRef<Path>) -> Result<()> {
    write_frame(frame, File::create(path)?)
}
