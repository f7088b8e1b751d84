//! Files written and read by the subcommands.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cknn_core::uncertainty::SmallAreaReport;
use cknn_core::{Error, Result};
use serde::Serialize;

pub struct OutDir(PathBuf);

impl OutDir {
    pub fn create(path: &Path) -> Result<Self> {
        std::fs::create_dir_all(path)?;
        Ok(OutDir(path.to_path_buf()))
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }

    pub fn write_with(&self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let mut w = BufWriter::new(File::create(self.path(name))?);
        f(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        self.write_with(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w)?;
            Ok(())
        })
    }
}

/// Everything needed to rerun a command: the resolved configuration, the
/// seeds and the inputs. Output location and thread count are left out so
/// that reruns elsewhere produce identical files.
#[derive(Serialize)]
pub struct Manifest<'a, C: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub config: &'a C,
    pub seeds: Vec<(&'static str, u64)>,
    pub inputs: Vec<(&'static str, String)>,
}

impl<'a, C: Serialize> Manifest<'a, C> {
    pub fn new(command: &'static str, config: &'a C) -> Self {
        Manifest {
            tool: "cknn",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config,
            seeds: Vec::new(),
            inputs: Vec::new(),
        }
    }

    pub fn seed(mut self, label: &'static str, seed: u64) -> Self {
        self.seeds.push((label, seed));
        self
    }

    pub fn input(mut self, label: &'static str, path: &Path) -> Self {
        self.inputs.push((label, path.display().to_string()));
        self
    }
}

/// Reads true area totals from `area,T_m`, one row per area `1..=M`.
pub fn read_truth(path: &Path, n_areas: usize) -> Result<Vec<f64>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Schema(format!("cannot read truth file {}: {e}", path.display())))?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("truth file lacks column {name}")))
    };
    let (area_col, total_col) = (col("area")?, col("T_m")?);
    let mut truth = vec![None; n_areas];
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let parse = |c: usize| record.get(c).map(str::trim).unwrap_or_default();
        let area: usize = parse(area_col)
            .parse()
            .map_err(|_| Error::Validation(format!("truth line {}: bad area id", line + 2)))?;
        let total: f64 = parse(total_col)
            .parse()
            .map_err(|_| Error::Validation(format!("truth line {}: bad total", line + 2)))?;
        if area == 0 || area > n_areas {
            return Err(Error::Alignment(format!("truth area {area} outside 1..={n_areas}")));
        }
        if truth[area - 1].replace(total).is_some() {
            return Err(Error::Alignment(format!("truth area {area} listed twice")));
        }
    }
    truth
        .into_iter()
        .enumerate()
        .map(|(a, t)| t.ok_or_else(|| Error::Alignment(format!("truth lacks area {}", a + 1))))
        .collect()
}

pub fn write_truth<W: Write>(truth: &[f64], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["area", "T_m"])?;
    for (a, t) in truth.iter().enumerate() {
        w.write_record([(a + 1).to_string(), t.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// One estimator's columns in the side-by-side estimates table.
pub struct Column<'a> {
    pub suffix: &'static str,
    pub report: &'a SmallAreaReport,
}

/// Writes `area[,T_m]` followed by `T,RTMSE,CI_lo,CI_hi[,covered]` for each
/// estimator, suffixed with its name, and the calibration fallback flag when
/// the hybrid estimator ran.
pub fn write_estimates<W: Write>(
    columns: &[Column<'_>],
    truth: Option<&[f64]>,
    fallback: Option<bool>,
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["area".to_string()];
    if truth.is_some() {
        header.push("T_m".into());
    }
    for c in columns {
        for name in ["T", "RTMSE", "CI_lo", "CI_hi"] {
            header.push(format!("{name}_{}", c.suffix));
        }
        if truth.is_some() {
            header.push(format!("covered_{}", c.suffix));
        }
    }
    if fallback.is_some() {
        header.push("calibration_fallback".into());
    }
    w.write_record(&header)?;
    let n_areas = columns.first().map_or(0, |c| c.report.areas.len());
    for a in 0..n_areas {
        let mut row = vec![(a + 1).to_string()];
        if let Some(t) = truth {
            row.push(t[a].to_string());
        }
        for c in columns {
            let r = &c.report.areas[a];
            row.extend([r.estimate, r.rtmse, r.ci_lo, r.ci_hi].map(|x| x.to_string()));
            if let Some(covered) = r.covered {
                row.push(u8::from(covered).to_string());
            }
        }
        if let Some(f) = fallback {
            row.push(u8::from(f).to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-estimator `(T, RTMSE)` columns read back from an estimates table.
pub struct EstimateColumns {
    pub suffix: String,
    pub estimate: Vec<f64>,
    pub rtmse: Vec<f64>,
}

pub fn read_estimates(path: &Path) -> Result<Vec<EstimateColumns>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Schema(format!("cannot read estimates file {}: {e}", path.display())))?;
    let headers = reader.headers()?.clone();
    let area_col = headers
        .iter()
        .position(|h| h == "area")
        .ok_or_else(|| Error::Schema("estimates file lacks column area".into()))?;
    let mut pairs = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        if let Some(suffix) = h.strip_prefix("T_").filter(|s| *s != "m") {
            let rtmse = headers
                .iter()
                .position(|g| g == format!("RTMSE_{suffix}"))
                .ok_or_else(|| Error::Schema(format!("estimates file lacks column RTMSE_{suffix}")))?;
            pairs.push((suffix.to_string(), i, rtmse));
        }
    }
    if pairs.is_empty() {
        return Err(Error::Schema("estimates file has no T_<estimator> column".into()));
    }
    let mut out: Vec<EstimateColumns> = pairs
        .iter()
        .map(|(s, _, _)| EstimateColumns {
            suffix: s.clone(),
            estimate: Vec::new(),
            rtmse: Vec::new(),
        })
        .collect();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let num = |c: usize| -> Result<f64> {
            record.get(c).and_then(|v| v.trim().parse().ok()).ok_or_else(|| {
                Error::Validation(format!("estimates line {}: bad number in column {}", line + 2, c + 1))
            })
        };
        let area = num(area_col)? as usize;
        if area != line + 1 {
            return Err(Error::Alignment(format!(
                "estimates line {}: expected area {}, got {area}",
                line + 2,
                line + 1
            )));
        }
        for (col, (_, t, r)) in out.iter_mut().zip(&pairs) {
            col.estimate.push(num(*t)?);
            col.rtmse.push(num(*r)?);
        }
    }
    Ok(out)
}
