//! Data ingestion and design-matrix construction.
//!
//! A [`Dataset`] holds a binary outcome, a binary exposure and a table of
//! named real covariates. Design matrices are built from a [`DesignSpec`],
//! an ordered list of terms where `x1:x2` denotes the elementwise product of
//! columns `x1` and `x2`. Categorical covariates must be expanded to dummy
//! columns before loading.

use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INTERCEPT_NAME: &str = "(Intercept)";

/// Named real-valued columns of equal length.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Covariates {
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
    n: usize,
}

impl Covariates {
    /// Builds a table with `n` rows. Every column must have length `n` and
    /// contain only finite values; names must be unique.
    pub fn new(n: usize, columns: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let mut out = Covariates {
            names: Vec::with_capacity(columns.len()),
            columns: Vec::with_capacity(columns.len()),
            n,
        };
        for (name, values) in columns {
            out.push(name, values)?;
        }
        Ok(out)
    }

    pub fn push(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if values.len() != self.n {
            return Err(Error::spec(format!(
                "column '{name}' has {} rows, expected {}",
                values.len(),
                self.n
            )));
        }
        if self.names.contains(&name) {
            return Err(Error::spec(format!("duplicate column '{name}'")));
        }
        if let Some(row) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Load {
                row: row + 1,
                column: name,
                message: "non-finite covariate value".into(),
            });
        }
        self.names.push(name);
        self.columns.push(values);
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
    }

    fn select_rows(&self, rows: &[usize]) -> Covariates {
        Covariates {
            names: self.names.clone(),
            columns: self
                .columns
                .iter()
                .map(|col| rows.iter().map(|&r| col[r]).collect())
                .collect(),
            n: rows.len(),
        }
    }
}

impl AsRef<Covariates> for Covariates {
    fn as_ref(&self) -> &Covariates {
        self
    }
}

/// Outcome `y`, exposure `a` (both 0/1) and covariates, all with `n` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<f64>,
    a: Vec<f64>,
    covariates: Covariates,
}

impl Dataset {
    pub fn new(y: Vec<f64>, a: Vec<f64>, covariates: Covariates) -> Result<Self> {
        let n = y.len();
        if a.len() != n || covariates.n() != n {
            return Err(Error::spec(format!(
                "row count mismatch: y has {n}, a has {}, covariates have {}",
                a.len(),
                covariates.n()
            )));
        }
        check_binary(&y, "y", "non-binary outcome")?;
        check_binary(&a, "a", "non-binary exposure")?;
        Ok(Dataset { y, a, covariates })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn covariates(&self) -> &Covariates {
        &self.covariates
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.covariates.column(name)
    }

    /// New dataset made of the given rows, in the given order. Indices may
    /// repeat (bootstrap resampling).
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            y: rows.iter().map(|&r| self.y[r]).collect(),
            a: rows.iter().map(|&r| self.a[r]).collect(),
            covariates: self.covariates.select_rows(rows),
        }
    }
}

impl AsRef<Covariates> for Dataset {
    fn as_ref(&self) -> &Covariates {
        &self.covariates
    }
}

fn check_binary(values: &[f64], column: &str, message: &str) -> Result<()> {
    match values.iter().position(|&v| v != 0.0 && v != 1.0) {
        Some(row) => Err(Error::Load {
            row: row + 1,
            column: column.into(),
            message: message.into(),
        }),
        None => Ok(()),
    }
}

/// Loads a comma-separated file with a header row. `y_col` and `a_col` name
/// the outcome and exposure; every other column becomes a covariate.
pub fn load_csv(path: impl AsRef<Path>, y_col: &str, a_col: &str) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, y_col, a_col)
}

pub fn read_csv<R: Read>(reader: R, y_col: &str, a_col: &str) -> Result<Dataset> {
    let (header, columns) = read_numeric_table(reader)?;
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::spec(format!("column '{name}' not found in header")))
    };
    let y_idx = find(y_col)?;
    let a_idx = find(a_col)?;
    if y_idx == a_idx {
        return Err(Error::spec("outcome and exposure must be different columns"));
    }
    let n = columns.first().map_or(0, Vec::len);
    let mut y = Vec::new();
    let mut a = Vec::new();
    let mut covs = Vec::new();
    for (idx, (name, col)) in header.into_iter().zip(columns).enumerate() {
        if idx == y_idx {
            y = col;
        } else if idx == a_idx {
            a = col;
        } else {
            covs.push((name, col));
        }
    }
    check_binary(&y, y_col, "non-binary outcome")?;
    check_binary(&a, a_col, "non-binary exposure")?;
    Dataset::new(y, a, Covariates::new(n, covs)?)
}

/// Loads a covariate-only table (e.g. new rows for prediction).
pub fn load_covariates_csv(path: impl AsRef<Path>) -> Result<Covariates> {
    let file = std::fs::File::open(path)?;
    let (header, columns) = read_numeric_table(file)?;
    let n = columns.first().map_or(0, Vec::len);
    Covariates::new(n, header.into_iter().zip(columns).collect())
}

fn read_numeric_table<R: Read>(reader: R) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let mut columns = vec![Vec::new(); header.len()];
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 1;
        for (j, name) in header.iter().enumerate() {
            let cell = record.get(j).unwrap_or("");
            if cell.is_empty() || cell.eq_ignore_ascii_case("na") {
                return Err(Error::Load {
                    row,
                    column: name.clone(),
                    message: "missing value".into(),
                });
            }
            let value: f64 = cell.parse().map_err(|_| Error::Load {
                row,
                column: name.clone(),
                message: format!("non-numeric value '{cell}'"),
            })?;
            if !value.is_finite() {
                return Err(Error::Load {
                    row,
                    column: name.clone(),
                    message: "non-finite value".into(),
                });
            }
            columns[j].push(value);
        }
    }
    Ok((header, columns))
}

/// Ordered design terms. Each term is a column name or a `:`-joined product
/// of column names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub terms: Vec<String>,
    #[serde(default = "default_intercept")]
    pub intercept: bool,
}

fn default_intercept() -> bool {
    true
}

impl DesignSpec {
    pub fn new<S: Into<String>>(terms: impl IntoIterator<Item = S>, intercept: bool) -> Self {
        DesignSpec {
            terms: terms.into_iter().map(Into::into).collect(),
            intercept,
        }
    }

    /// Intercept plus the given terms.
    pub fn with_intercept<S: Into<String>>(terms: impl IntoIterator<Item = S>) -> Self {
        Self::new(terms, true)
    }

    pub fn intercept_only() -> Self {
        Self::new(Vec::<String>::new(), true)
    }

    /// Parses a comma-separated term list such as `"x1,x2,x1:x2"`. An empty
    /// string gives an intercept-only design.
    pub fn parse(list: &str, intercept: bool) -> Result<Self> {
        let terms: Vec<String> = list
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::to_owned)
            .collect();
        let spec = DesignSpec { terms, intercept };
        for term in &spec.terms {
            if factors(term).any(str::is_empty) {
                return Err(Error::spec(format!("malformed term '{term}'")));
            }
        }
        Ok(spec)
    }

    pub fn n_columns(&self) -> usize {
        self.terms.len() + usize::from(self.intercept)
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.n_columns());
        if self.intercept {
            names.push(INTERCEPT_NAME.to_owned());
        }
        names.extend(self.terms.iter().cloned());
        names
    }

    /// Every covariate referenced by some term.
    pub fn referenced_columns(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for f in self.terms.iter().flat_map(|t| factors(t)) {
            if !out.contains(&f) {
                out.push(f);
            }
        }
        out
    }

    pub fn validate(&self, covariates: &Covariates) -> Result<()> {
        for name in self.referenced_columns() {
            if covariates.column(name).is_none() {
                return Err(Error::spec(format!("unknown column '{name}' in design")));
            }
        }
        if self.n_columns() == 0 {
            return Err(Error::spec("design has no columns"));
        }
        Ok(())
    }
}

fn factors(term: &str) -> impl Iterator<Item = &str> {
    term.split(':').map(str::trim)
}

/// An n×k real matrix with one label per column.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub values: DMatrix<f64>,
    pub column_names: Vec<String>,
}

impl DesignMatrix {
    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }
}

pub fn build_design(data: &impl AsRef<Covariates>, spec: &DesignSpec) -> Result<DesignMatrix> {
    let covs = data.as_ref();
    spec.validate(covs)?;
    let n = covs.n();
    let mut values = DMatrix::<f64>::zeros(n, spec.n_columns());
    let mut col = 0;
    if spec.intercept {
        values.column_mut(0).fill(1.0);
        col = 1;
    }
    for term in &spec.terms {
        let mut column = values.column_mut(col);
        column.fill(1.0);
        for f in factors(term) {
            let src = covs.column(f).expect("validated");
            for (dst, &v) in column.iter_mut().zip(src) {
                *dst *= v;
            }
        }
        col += 1;
    }
    Ok(DesignMatrix {
        values,
        column_names: spec.column_names(),
    })
}
