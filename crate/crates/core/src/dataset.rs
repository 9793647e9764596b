//! Forecast-error training data.
//!
//! CSV layout: one row per historical sample, a mandatory header naming each
//! column `s<stage>_<k>` (stage-major, both zero-based). Stage `j` holds the
//! error at lead time `j` of a horizon. Values are per-unit.
//!
//! An optional JSON sidecar declares the support of each stage, either once
//! for all stages or as a list with one entry per stage:
//!
//! ```json
//! {"lo": [-0.2], "hi": [0.3]}
//! [{"h": [[1.0], [-1.0]], "d": [0.3, 0.2]}, {"lo": [-0.4], "hi": [0.4]}]
//! ```

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::dro::{EmpiricalDistribution, PolytopicSupport, SUPPORT_TOL};
use crate::error::{Error, Result};

/// Margin of the data-derived support box, as a fraction of the sample range.
pub const SUPPORT_MARGIN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastErrorDataset {
    /// `N_s × (n_stages·n_xi)`, stage-major columns.
    pub samples: DMatrix<f64>,
    pub n_xi: usize,
    pub n_stages: usize,
    /// One support per stage, each of dimension `n_xi`.
    pub supports: Vec<PolytopicSupport>,
    /// True when the supports were computed from the samples.
    pub derived_support: bool,
}

impl ForecastErrorDataset {
    /// Validates shapes and support membership; derives box supports when
    /// none are given.
    pub fn new(samples: DMatrix<f64>, n_xi: usize, supports: Option<Vec<PolytopicSupport>>) -> Result<Self> {
        if samples.nrows() == 0 {
            return Err(Error::Validation("dataset has no samples".into()));
        }
        if n_xi == 0 || samples.ncols() % n_xi != 0 || samples.ncols() == 0 {
            return Err(Error::Validation(format!(
                "dataset has {} columns, not a positive multiple of N_xi = {n_xi}",
                samples.ncols()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("dataset contains non-finite values".into()));
        }
        let n_stages = samples.ncols() / n_xi;
        let derived = supports.is_none();
        let supports = match supports {
            Some(s) => s,
            None => derive_supports(&samples, n_xi, n_stages)?,
        };
        let ds = ForecastErrorDataset {
            samples,
            n_xi,
            n_stages,
            supports,
            derived_support: derived,
        };
        ds.check()?;
        Ok(ds)
    }

    fn check(&self) -> Result<()> {
        if self.supports.len() != self.n_stages {
            return Err(Error::dim("per-stage supports", self.n_stages, self.supports.len()));
        }
        let mut bad = Vec::new();
        for (j, sup) in self.supports.iter().enumerate() {
            if sup.dim() != self.n_xi {
                return Err(Error::Validation(format!(
                    "support of stage {j} has dimension {}, expected {}",
                    sup.dim(),
                    self.n_xi
                )));
            }
            for i in 0..self.n_samples() {
                let xi: Vec<f64> = (0..self.n_xi).map(|k| self.samples[(i, j * self.n_xi + k)]).collect();
                if !sup.contains(&xi, SUPPORT_TOL) && !bad.contains(&i) {
                    bad.push(i);
                }
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            bad.sort_unstable();
            Err(Error::Validation(format!("samples outside the declared support: {bad:?}")))
        }
    }

    pub fn n_samples(&self) -> usize {
        self.samples.nrows()
    }

    /// Columns of the given stages, in order.
    pub fn columns(&self, stages: &[usize]) -> Vec<usize> {
        stages
            .iter()
            .flat_map(|&j| (0..self.n_xi).map(move |k| j * self.n_xi + k))
            .collect()
    }

    /// Empirical distribution and product support over the given stages.
    pub fn restrict(&self, stages: &[usize]) -> Result<(EmpiricalDistribution, PolytopicSupport)> {
        if let Some(&j) = stages.iter().find(|&&j| j >= self.n_stages) {
            return Err(Error::Validation(format!("dataset has {} stages, stage {j} requested", self.n_stages)));
        }
        let cols = self.columns(stages);
        let m = DMatrix::from_fn(self.n_samples(), cols.len(), |i, c| self.samples[(i, cols[c])]);
        let parts: Vec<&PolytopicSupport> = stages.iter().map(|&j| &self.supports[j]).collect();
        Ok((EmpiricalDistribution::new(m)?, PolytopicSupport::product(&parts)))
    }

    /// The first `stages` stages.
    pub fn truncate(&self, stages: usize) -> Result<ForecastErrorDataset> {
        if stages == 0 || stages > self.n_stages {
            return Err(Error::Validation(format!(
                "dataset has {} stages, {stages} requested",
                self.n_stages
            )));
        }
        Ok(ForecastErrorDataset {
            samples: self.samples.columns(0, stages * self.n_xi).into_owned(),
            n_xi: self.n_xi,
            n_stages: stages,
            supports: self.supports[..stages].to_vec(),
            derived_support: self.derived_support,
        })
    }

    /// Per-stage means, stacked like a sample row.
    pub fn mean(&self) -> DVector<f64> {
        self.samples.row_mean().transpose()
    }

    /// Appends `row`; drops the oldest samples beyond `cap`. Data-derived
    /// supports are recomputed, declared ones must contain the new row.
    pub fn push(&mut self, row: &[f64], cap: usize) -> Result<()> {
        if row.len() != self.samples.ncols() {
            return Err(Error::dim("dataset row", self.samples.ncols(), row.len()));
        }
        let n = self.n_samples();
        let keep = (n + 1).min(cap.max(1));
        let drop = n + 1 - keep;
        let mut m = DMatrix::zeros(keep, row.len());
        for i in 0..keep - 1 {
            m.row_mut(i).copy_from(&self.samples.row(i + drop));
        }
        for (c, v) in row.iter().enumerate() {
            m[(keep - 1, c)] = *v;
        }
        let supports = if self.derived_support {
            None
        } else {
            Some(self.supports.clone())
        };
        *self = ForecastErrorDataset::new(m, self.n_xi, supports)?;
        Ok(())
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let header: Vec<String> = (0..self.n_stages)
            .flat_map(|j| (0..self.n_xi).map(move |k| format!("s{j}_{k}")))
            .collect();
        out.write_record(&header).map_err(csv_err)?;
        for i in 0..self.n_samples() {
            out.write_record(self.samples.row(i).iter().map(|v| v.to_string()))
                .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn derive_supports(samples: &DMatrix<f64>, n_xi: usize, n_stages: usize) -> Result<Vec<PolytopicSupport>> {
    (0..n_stages)
        .map(|j| PolytopicSupport::from_samples(&samples.columns(j * n_xi, n_xi).into_owned(), SUPPORT_MARGIN))
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn parse_header(fields: &csv::StringRecord, origin: &str) -> Result<usize> {
    let mut parsed = Vec::with_capacity(fields.len());
    for (c, f) in fields.iter().enumerate() {
        let bad = || Error::parse(format!("{origin}:1"), format!("column {c}: header '{f}' is not of the form s<stage>_<k>"));
        let rest = f.trim().strip_prefix('s').ok_or_else(bad)?;
        let (a, b) = rest.split_once('_').ok_or_else(bad)?;
        let j: usize = a.parse().map_err(|_| bad())?;
        let k: usize = b.parse().map_err(|_| bad())?;
        parsed.push((j, k));
    }
    let n_xi = parsed.iter().take_while(|(j, _)| *j == 0).count();
    if n_xi == 0 || parsed.len() % n_xi != 0 {
        return Err(Error::parse(format!("{origin}:1"), "header does not form complete stage blocks"));
    }
    for (c, &(j, k)) in parsed.iter().enumerate() {
        if (j, k) != (c / n_xi, c % n_xi) {
            return Err(Error::parse(
                format!("{origin}:1"),
                format!("column {c}: expected s{}_{}, found s{j}_{k}", c / n_xi, c % n_xi),
            ));
        }
    }
    Ok(n_xi)
}

/// Parses a dataset from CSV text.
pub fn parse_dataset(text: &str, origin: &str, supports: Option<Vec<PolytopicSupport>>) -> Result<ForecastErrorDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| Error::parse(format!("{origin}:1"), e.to_string()))?
        .clone();
    let n_xi = parse_header(&header, origin)?;
    let width = header.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for (r, rec) in rdr.records().enumerate() {
        let line = r + 2;
        let rec = rec.map_err(|e| Error::parse(format!("{origin}:{line}"), e.to_string()))?;
        if rec.len() != width {
            return Err(Error::parse(
                format!("{origin}:{line}"),
                format!("row {} has {} columns, expected {width}", r, rec.len()),
            ));
        }
        for (c, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                Error::parse(format!("{origin}:{line}"), format!("row {r}, column {c}: '{cell}' is not a number"))
            })?;
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Validation(format!("{origin}: dataset has no samples")));
    }
    let n_stages = width / n_xi;
    let supports = match supports {
        Some(s) if s.len() == 1 && n_stages > 1 => Some(vec![s[0].clone(); n_stages]),
        other => other,
    };
    ForecastErrorDataset::new(DMatrix::from_row_slice(rows, width, &values), n_xi, supports)
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum SupportRecord {
    Polytope { h: Vec<Vec<f64>>, d: Vec<f64> },
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum SupportFile {
    One(SupportRecord),
    PerStage(Vec<SupportRecord>),
}

fn support_from_record(r: SupportRecord) -> Result<PolytopicSupport> {
    match r {
        SupportRecord::Box { lo, hi } => PolytopicSupport::boxed(&lo, &hi),
        SupportRecord::Polytope { h, d } => {
            let cols = h.first().map_or(0, |r| r.len());
            if h.iter().any(|r| r.len() != cols) {
                return Err(Error::Validation("support H has ragged rows".into()));
            }
            PolytopicSupport::new(
                DMatrix::from_fn(h.len(), cols, |i, j| h[i][j]),
                DVector::from_column_slice(&d),
            )
        }
    }
}

/// Parses a support sidecar (see the module docs).
pub fn parse_support(text: &str, origin: &str) -> Result<Vec<PolytopicSupport>> {
    let file: SupportFile = serde_json::from_str(text)
        .map_err(|e| Error::parse(format!("{origin}:{}:{}", e.line(), e.column()), e.to_string()))?;
    match file {
        SupportFile::One(r) => Ok(vec![support_from_record(r)?]),
        SupportFile::PerStage(v) => v.into_iter().map(support_from_record).collect(),
    }
}

/// Reads a dataset CSV, with an optional support sidecar.
pub fn ingest_dataset(path: &Path, support: Option<&Path>) -> Result<ForecastErrorDataset> {
    let origin = path.display().to_string();
    let text = std::fs::read_to_string(path)?;
    let supports = match support {
        Some(p) => Some(parse_support(&std::fs::read_to_string(p)?, &p.display().to_string())?),
        None => None,
    };
    parse_dataset(&text, &origin, supports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_must_be_stage_major() {
        let e = parse_dataset("s0_0,s1_0,s0_1\n1,2,3\n", "x.csv", None).unwrap_err();
        assert!(e.to_string().contains("column 2"), "{e}");
    }

    #[test]
    fn fifo_window() {
        let mut d = parse_dataset("s0_0\n1\n2\n3\n", "x.csv", None).unwrap();
        d.push(&[4.0], 3).unwrap();
        assert_eq!(d.samples.as_slice(), &[2.0, 3.0, 4.0]);
        d.push(&[5.0], 10).unwrap();
        assert_eq!(d.n_samples(), 4);
    }

    #[test]
    fn derived_support_has_margin() {
        let d = parse_dataset("s0_0\n0\n1\n", "x.csv", None).unwrap();
        assert!((d.supports[0].lower()[0] + 0.1).abs() < 1e-15);
        assert!((d.supports[0].upper()[0] - 1.1).abs() < 1e-15);
    }
}
