//! Observation data model, delimited-file ingestion, and overlap diagnostics.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One unit: covariates, treatment indicator, observed outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation<T> {
    pub x: Vec<T>,
    pub w: bool,
    pub y: T,
}

/// Immutable sample of `n` observations stored column-wise.
///
/// Both arms are guaranteed nonempty and every covariate vector has the
/// same length `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    k: usize,
    x: Vec<T>,
    w: Vec<bool>,
    y: Vec<T>,
    n1: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn from_observations(obs: Vec<Observation<T>>) -> Result<Self> {
        let k = obs.first().map_or(0, |o| o.x.len());
        let mut x = Vec::with_capacity(obs.len() * k);
        let mut w = Vec::with_capacity(obs.len());
        let mut y = Vec::with_capacity(obs.len());
        for (row, o) in obs.into_iter().enumerate() {
            if o.x.len() != k {
                return Err(Error::Shape(format!(
                    "observation {} has {} covariates, expected {k}",
                    row + 1,
                    o.x.len()
                )));
            }
            x.extend(o.x);
            w.push(o.w);
            y.push(o.y);
        }
        Self::from_columns(k, x, w, y)
    }

    /// Builds a dataset from a row-major `n × k` covariate buffer.
    pub fn from_columns(k: usize, x: Vec<T>, w: Vec<bool>, y: Vec<T>) -> Result<Self> {
        let n = w.len();
        if y.len() != n || x.len() != n * k {
            return Err(Error::Shape(format!(
                "column lengths disagree: w={n}, y={}, x={} (k={k})",
                y.len(),
                x.len()
            )));
        }
        if k == 0 {
            return Err(Error::Shape("at least one covariate is required".into()));
        }
        if n < 2 {
            return Err(Error::Shape(format!("need at least 2 observations, got {n}")));
        }
        if let Some(i) = (0..n).find(|&i| !y[i].is_finite() || x[i * k..(i + 1) * k].iter().any(|v| !v.is_finite())) {
            return Err(Error::Domain(format!("observation {} has a non-finite value", i + 1)));
        }
        let n1 = w.iter().filter(|&&t| t).count();
        if n1 == 0 || n1 == n {
            return Err(Error::DegenerateArm(format!(
                "all {n} units are {}",
                if n1 == 0 { "controls" } else { "treated" }
            )));
        }
        Ok(Self { k, x, w, y, n1 })
    }

    pub fn n(&self) -> usize {
        self.w.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    pub fn n0(&self) -> usize {
        self.n() - self.n1
    }

    pub fn x(&self, i: usize) -> &[T] {
        &self.x[i * self.k..(i + 1) * self.k]
    }

    pub fn w(&self) -> &[bool] {
        &self.w
    }

    pub fn y(&self) -> &[T] {
        &self.y
    }

    pub fn observation(&self, i: usize) -> Observation<T> {
        Observation { x: self.x(i).to_vec(), w: self.w[i], y: self.y[i] }
    }

    pub fn observations(&self) -> impl Iterator<Item = Observation<T>> + '_ {
        (0..self.n()).map(|i| self.observation(i))
    }

    /// Returns a copy with rows reordered so that new row `r` is old row `perm[r]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n() {
            return Err(Error::Shape("permutation length differs from n".into()));
        }
        Self::from_observations(perm.iter().map(|&i| self.observation(i)).collect())
    }
}

/// Column naming convention for delimited input.
#[derive(Debug, Clone)]
pub struct Layout {
    pub outcome: String,
    pub treatment: String,
    /// Covariates are `<prefix>1`, `<prefix>2`, ... up to the first gap.
    pub covariate_prefix: String,
}

impl Default for Layout {
    fn default() -> Self {
        Self { outcome: "y".into(), treatment: "w".into(), covariate_prefix: "x".into() }
    }
}

/// Reads a comma-delimited file with a header row. Rows are numbered from 1
/// (the first data row) in error messages.
pub fn load_dataset<T: Scalar>(path: impl AsRef<Path>, layout: &Layout) -> Result<Dataset<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    parse_dataset(&bytes, layout)
}

/// Parses delimited bytes; see [`load_dataset`].
pub fn parse_dataset<T: Scalar>(bytes: &[u8], layout: &Layout) -> Result<Dataset<T>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse { row: 0, column: "<header>".into(), message: e.to_string() })?
        .clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let y_col = find(&layout.outcome).ok_or_else(|| missing_column(&layout.outcome))?;
    let w_col = find(&layout.treatment).ok_or_else(|| missing_column(&layout.treatment))?;
    let x_cols: Vec<(usize, String)> = (1..)
        .map(|j| format!("{}{j}", layout.covariate_prefix))
        .map_while(|name| find(&name).map(|c| (c, name)))
        .collect();
    if x_cols.is_empty() {
        return Err(missing_column(&format!("{}1", layout.covariate_prefix)));
    }
    let k = x_cols.len();

    let mut x = Vec::new();
    let mut w = Vec::new();
    let mut y = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record =
            record.map_err(|e| Error::Parse { row, column: "<record>".into(), message: e.to_string() })?;
        let cell = |col: usize, name: &str| -> Result<f64> {
            let raw = record.get(col).unwrap_or("");
            if raw.is_empty() {
                return Err(Error::Parse { row, column: name.into(), message: "missing value".into() });
            }
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                row,
                column: name.into(),
                message: format!("`{raw}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { row, column: name.into(), message: format!("`{raw}` is not finite") });
            }
            Ok(v)
        };
        y.push(T::lit(cell(y_col, &layout.outcome)?));
        let wv = cell(w_col, &layout.treatment)?;
        w.push(match wv {
            1.0 => true,
            0.0 => false,
            v => {
                return Err(Error::Domain(format!(
                    "row {row}: treatment `{}` = {v} is not 0 or 1",
                    layout.treatment
                )))
            }
        });
        for (col, name) in &x_cols {
            x.push(T::lit(cell(*col, name)?));
        }
    }
    Dataset::from_columns(k, x, w, y)
}

fn missing_column(name: &str) -> Error {
    Error::Parse { row: 0, column: name.into(), message: "column not found in header".into() }
}

/// Overlap thresholds; scores outside `[low, high]` raise a warning.
#[derive(Debug, Clone, Copy)]
pub struct OverlapThresholds<T> {
    pub low: T,
    pub high: T,
}

impl<T: Scalar> Default for OverlapThresholds<T> {
    fn default() -> Self {
        Self { low: T::lit(0.01), high: T::lit(0.99) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmRange<T> {
    pub count: usize,
    pub min: T,
    pub max: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport<T> {
    pub control: ArmRange<T>,
    pub treated: ArmRange<T>,
    /// Units (0-based) whose score falls outside the overlap thresholds.
    pub overlap_warnings: Vec<usize>,
}

/// Checks propensity scores against the sample and flags poor overlap.
pub fn validate<T: Scalar>(
    ds: &Dataset<T>,
    scores: &[T],
    thresholds: OverlapThresholds<T>,
) -> Result<ValidationReport<T>> {
    if scores.len() != ds.n() {
        return Err(Error::Shape(format!("{} scores for {} units", scores.len(), ds.n())));
    }
    if let Some(i) = scores.iter().position(|&s| !(s > T::zero() && s < T::one())) {
        return Err(Error::Domain(format!("score of unit {} = {} is outside (0,1)", i + 1, scores[i])));
    }
    let range = |arm: bool| {
        let vals = scores.iter().zip(ds.w()).filter(|(_, &w)| w == arm).map(|(&s, _)| s);
        let (count, min, max) = vals.fold((0, T::infinity(), T::neg_infinity()), |(c, lo, hi), s| {
            (c + 1, lo.min(s), hi.max(s))
        });
        ArmRange { count, min, max }
    };
    let overlap_warnings =
        (0..ds.n()).filter(|&i| scores[i] < thresholds.low || scores[i] > thresholds.high).collect();
    Ok(ValidationReport { control: range(false), treated: range(true), overlap_warnings })
}

impl<T: Scalar> ValidationReport<T> {
    /// Machine-readable `key = value` lines.
    pub fn to_kv_lines(&self) -> String {
        let ids: Vec<String> = self.overlap_warnings.iter().map(|i| (i + 1).to_string()).collect();
        format!(
            "score_min_control = {}\nscore_max_control = {}\nscore_min_treated = {}\nscore_max_treated = {}\noverlap_warnings = {}\noverlap_warning_units = [{}]\n",
            self.control.min,
            self.control.max,
            self.treated.min,
            self.treated.max,
            self.overlap_warnings.len(),
            ids.join(", ")
        )
    }
}

impl<T: Scalar> fmt::Display for ValidationReport<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "control arm: {} units, scores in [{:.4}, {:.4}]", self.control.count, self.control.min, self.control.max)?;
        writeln!(f, "treated arm: {} units, scores in [{:.4}, {:.4}]", self.treated.count, self.treated.min, self.treated.max)?;
        if self.overlap_warnings.is_empty() {
            write!(f, "overlap: no warnings")
        } else {
            write!(f, "overlap: {} unit(s) with extreme scores", self.overlap_warnings.len())
        }
    }
}
