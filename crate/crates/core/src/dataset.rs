//! Observational data: ingestion, validation and (stratum-)centering.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column roles for CSV ingestion. Roles are declared, never inferred.
///
/// ```toml
/// treatment = "z"
/// covariates = ["x1", "x2", "x3"]
/// outcome = "y"      # optional
/// stratum = "site"   # optional
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub treatment: String,
    pub covariates: Vec<String>,
    #[serde(default)]
    pub outcome: Option<String>,
    #[serde(default)]
    pub stratum: Option<String>,
}

impl Schema {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Schema(format!("bad schema config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }
}

/// Pre-existing strata: one label per row, stored as indices into `labels`.
#[derive(Debug, Clone, PartialEq)]
pub struct Strata {
    pub labels: Vec<String>,
    pub index: Vec<usize>,
}

impl Strata {
    /// Builds strata from raw labels, numbering them in order of first appearance.
    pub fn from_labels<S: AsRef<str>>(raw: &[S]) -> Self {
        let mut lookup: HashMap<&str, usize> = HashMap::new();
        let mut labels = Vec::new();
        let mut index = Vec::with_capacity(raw.len());
        for r in raw {
            let r = r.as_ref();
            let next = labels.len();
            let k = *lookup.entry(r).or_insert_with(|| {
                labels.push(r.to_string());
                next
            });
            index.push(k);
        }
        Strata { labels, index }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// An observational sample: covariates, treatment, optional outcome and strata.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    x: DMatrix<f64>,
    z: Vec<bool>,
    y: Option<Vec<Option<f64>>>,
    strata: Option<Strata>,
    covariate_names: Vec<String>,
}

impl Sample {
    /// Validates and assembles a sample.
    ///
    /// Rejects `p < 2`, length mismatches, non-finite covariates, constant
    /// covariate columns and stratifications with `L >= n`.
    pub fn new(
        x: DMatrix<f64>,
        z: Vec<bool>,
        y: Option<Vec<Option<f64>>>,
        strata: Option<Strata>,
    ) -> Result<Self> {
        let (n, p) = x.shape();
        if p < 2 {
            return Err(Error::dimension(
                "dataset",
                format!("need at least 2 covariates, got {p}"),
            ));
        }
        if z.len() != n {
            return Err(Error::dimension(
                "dataset",
                format!("treatment has {} entries for {n} rows", z.len()),
            ));
        }
        if let Some(y) = &y {
            if y.len() != n {
                return Err(Error::dimension(
                    "dataset",
                    format!("outcome has {} entries for {n} rows", y.len()),
                ));
            }
        }
        if let Some(s) = &strata {
            if s.index.len() != n {
                return Err(Error::dimension(
                    "dataset",
                    format!("stratum has {} entries for {n} rows", s.index.len()),
                ));
            }
            if s.len() >= n {
                return Err(Error::Schema(format!(
                    "{} strata for {n} rows; need L < n",
                    s.len()
                )));
            }
        }
        if let Some(bad) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse {
                row: bad % n + 1,
                column: format!("covariate {}", bad / n + 1),
                message: "non-finite covariate value".into(),
            });
        }
        for j in 0..p {
            let col = x.column(j);
            let first = col[0];
            if col.iter().all(|&v| v == first) {
                return Err(Error::Schema(format!(
                    "covariate column {} is constant; drop it (full-rank checks would fail)",
                    j + 1
                )));
            }
        }
        let covariate_names = (1..=p).map(|j| format!("x{j}")).collect();
        Ok(Sample {
            x,
            z,
            y,
            strata,
            covariate_names,
        })
    }

    pub fn with_covariate_names(mut self, names: Vec<String>) -> Self {
        assert_eq!(names.len(), self.p());
        self.covariate_names = names;
        self
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn z(&self) -> &[bool] {
        &self.z
    }

    pub fn y(&self) -> Option<&[Option<f64>]> {
        self.y.as_deref()
    }

    pub fn strata(&self) -> Option<&Strata> {
        self.strata.as_ref()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Number of pre-existing strata, 1 when unstratified.
    pub fn n_strata(&self) -> usize {
        self.strata.as_ref().map_or(1, Strata::len)
    }

    /// Stratum index of row `i` (always 0 when unstratified).
    pub fn stratum_of(&self, i: usize) -> usize {
        self.strata.as_ref().map_or(0, |s| s.index[i])
    }

    pub fn n_treated(&self) -> usize {
        self.z.iter().filter(|&&t| t).count()
    }

    pub fn n_control(&self) -> usize {
        self.n() - self.n_treated()
    }

    /// Errors unless both arms are nonempty.
    pub fn require_both_arms(&self) -> Result<()> {
        if self.n_treated() == 0 || self.n_control() == 0 {
            return Err(Error::Schema(format!(
                "matching needs both arms; have {} treated and {} control",
                self.n_treated(),
                self.n_control()
            )));
        }
        Ok(())
    }
}

fn parse_cell(raw: &str, row: usize, column: &str) -> Result<f64> {
    raw.trim().parse::<f64>().map_err(|_| Error::Parse {
        row,
        column: column.to_string(),
        message: format!("not a number: {raw:?}"),
    })
}

fn is_missing(raw: &str) -> bool {
    let t = raw.trim();
    t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan")
}

/// Reads a header-first CSV according to `schema`, keeping rows in file order.
pub fn read_csv<R: Read>(reader: R, schema: &Schema) -> Result<Sample> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Schema(format!("cannot read header row: {e}")))?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("column `{name}` not found in header")))
    };
    let z_col = col(&schema.treatment)?;
    let x_cols = schema
        .covariates
        .iter()
        .map(|c| col(c))
        .collect::<Result<Vec<_>>>()?;
    if x_cols.len() < 2 {
        return Err(Error::dimension(
            "dataset",
            format!("need at least 2 covariates, schema declares {}", x_cols.len()),
        ));
    }
    let y_col = schema.outcome.as_deref().map(col).transpose()?;
    let s_col = schema.stratum.as_deref().map(col).transpose()?;

    let p = x_cols.len();
    let mut values = Vec::new();
    let mut z = Vec::new();
    let mut y = Vec::new();
    let mut labels = Vec::new();
    for (k, record) in rdr.records().enumerate() {
        let row = k + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        let field = |c: usize| record.get(c).unwrap_or("");
        let zv = parse_cell(field(z_col), row, &schema.treatment)
            .map_err(|_| Error::Schema(format!(
                "treatment `{}` at data row {row} is {:?}, expected 0 or 1",
                schema.treatment,
                field(z_col)
            )))?;
        z.push(match zv {
            v if v == 0.0 => false,
            v if v == 1.0 => true,
            _ => {
                return Err(Error::Schema(format!(
                    "treatment `{}` at data row {row} is {:?}, expected 0 or 1",
                    schema.treatment,
                    field(z_col)
                )))
            }
        });
        for (c, name) in x_cols.iter().zip(&schema.covariates) {
            let raw = field(*c);
            if is_missing(raw) {
                return Err(Error::Parse {
                    row,
                    column: name.clone(),
                    message: "missing covariate value".into(),
                });
            }
            values.push(parse_cell(raw, row, name)?);
        }
        if let (Some(c), Some(name)) = (y_col, schema.outcome.as_deref()) {
            let raw = field(c);
            y.push(if is_missing(raw) {
                None
            } else {
                Some(parse_cell(raw, row, name)?)
            });
        }
        if let Some(c) = s_col {
            labels.push(field(c).trim().to_string());
        }
    }
    let n = z.len();
    if n == 0 {
        return Err(Error::Schema("no data rows".into()));
    }
    let x = DMatrix::from_row_slice(n, p, &values);
    let strata = s_col.map(|_| Strata::from_labels(&labels));
    let sample = Sample::new(x, z, y_col.map(|_| y), strata)?;
    Ok(sample.with_covariate_names(schema.covariates.clone()))
}

/// Reads a CSV file according to `schema`.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Sample> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_csv(file, schema)
}

/// A sample whose covariate columns have been centered, globally or within
/// each pre-existing stratum.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredSample {
    sample: Sample,
    /// Subtracted means, one row per stratum (a single row when unstratified).
    means: DMatrix<f64>,
}

impl CenteredSample {
    pub fn sample(&self) -> &Sample {
        &self.sample
    }

    pub fn x(&self) -> &DMatrix<f64> {
        self.sample.x()
    }

    pub fn means(&self) -> &DMatrix<f64> {
        &self.means
    }

    /// Covariates on their original scale.
    pub fn uncentered_x(&self) -> DMatrix<f64> {
        let mut x = self.sample.x.clone();
        for i in 0..x.nrows() {
            let s = self.sample.stratum_of(i);
            for j in 0..x.ncols() {
                x[(i, j)] += self.means[(s, j)];
            }
        }
        x
    }
}

impl std::ops::Deref for CenteredSample {
    type Target = Sample;

    fn deref(&self) -> &Sample {
        &self.sample
    }
}

/// Subtracts column means (within strata, when present).
pub fn center(s: &Sample) -> CenteredSample {
    let (n, p) = s.x.shape();
    let l = s.n_strata();
    let mut sums = DMatrix::<f64>::zeros(l, p);
    let mut counts = vec![0usize; l];
    for i in 0..n {
        let k = s.stratum_of(i);
        counts[k] += 1;
        for j in 0..p {
            sums[(k, j)] += s.x[(i, j)];
        }
    }
    let mut means = sums;
    for k in 0..l {
        for j in 0..p {
            means[(k, j)] /= counts[k] as f64;
        }
    }
    let mut x = s.x.clone();
    for i in 0..n {
        let k = s.stratum_of(i);
        for j in 0..p {
            x[(i, j)] -= means[(k, j)];
        }
    }
    CenteredSample {
        sample: Sample { x, ..s.clone() },
        means,
    }
}
