//! Observations, datasets and covariate specifications.
//!
//! A [`Dataset`] stores observations of `(Y, A, Z, X)` in columnar form:
//! `Y` a real outcome, `A` and `Z` binary indicators, `X` a real covariate
//! vector of fixed dimension `p`. Datasets are immutable after validation
//! and safe to read from many threads. Cross-fitting folds and sample
//! splits are expressed as index views over a shared dataset, so the
//! covariate storage is never duplicated; concrete feature matrices are
//! materialized on read.

use nalgebra::DMatrix;

use crate::error::{IvmrError, Result};

/// A single observation `(y, a, z, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub y: f64,
    pub a: u8,
    pub z: u8,
    pub x: Vec<f64>,
}

/// Borrowed view of one observation inside a [`Dataset`].
#[derive(Debug, Clone, Copy)]
pub struct ObsRef<'a> {
    pub y: f64,
    pub a: u8,
    pub z: u8,
    pub x: &'a [f64],
}

/// Column roles for [`validate_dataset`]: positions of y, a, z and the
/// covariate columns inside each raw row.
#[derive(Debug, Clone)]
pub struct ColumnSchema {
    pub y: usize,
    pub a: usize,
    pub z: usize,
    pub x: Vec<usize>,
}

impl ColumnSchema {
    /// The conventional layout `[y, a, z, x1, ..., xp]`.
    pub fn standard(p: usize) -> Self {
        ColumnSchema {
            y: 0,
            a: 1,
            z: 2,
            x: (3..3 + p).collect(),
        }
    }
}

/// Columnar store of validated observations.
#[derive(Debug, Clone)]
pub struct Dataset {
    y: Vec<f64>,
    a: Vec<u8>,
    z: Vec<u8>,
    /// Row-major `n x p` covariates.
    x: Vec<f64>,
    p: usize,
}

impl Dataset {
    /// Build a dataset from owned observations, checking the per-row
    /// invariants (binary a/z, finite values, consistent dimension).
    /// Instrument-arm balance is *not* required here; estimation entry
    /// points check it separately via [`Dataset::both_arms_present`].
    pub fn from_observations(obs: Vec<Observation>) -> Result<Self> {
        if obs.is_empty() {
            return Err(IvmrError::EmptyDataset);
        }
        let p = obs[0].x.len();
        let n = obs.len();
        let mut y = Vec::with_capacity(n);
        let mut a = Vec::with_capacity(n);
        let mut z = Vec::with_capacity(n);
        let mut x = Vec::with_capacity(n * p);
        for (row, o) in obs.into_iter().enumerate() {
            if o.x.len() != p {
                return Err(IvmrError::RowLength {
                    row,
                    got: o.x.len(),
                    expected: p,
                });
            }
            if !o.y.is_finite() {
                return Err(IvmrError::NonFiniteValue { row, column: 0 });
            }
            for (j, &v) in o.x.iter().enumerate() {
                if !v.is_finite() {
                    return Err(IvmrError::NonFiniteValue { row, column: 3 + j });
                }
            }
            y.push(o.y);
            a.push(o.a);
            z.push(o.z);
            x.extend_from_slice(&o.x);
        }
        Ok(Dataset { y, a, z, x, p })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn a(&self) -> &[u8] {
        &self.a
    }

    pub fn z(&self) -> &[u8] {
        &self.z
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    pub fn obs(&self, i: usize) -> ObsRef<'_> {
        ObsRef {
            y: self.y[i],
            a: self.a[i],
            z: self.z[i],
            x: self.x_row(i),
        }
    }

    /// True when at least one observation sits in each instrument arm.
    pub fn both_arms_present(&self) -> bool {
        self.z.iter().any(|&z| z == 0) && self.z.iter().any(|&z| z == 1)
    }

    /// Guard used by every estimation entry point.
    pub fn require_both_arms(&self) -> Result<()> {
        if self.both_arms_present() {
            Ok(())
        } else {
            Err(IvmrError::DegenerateInstrument { value: self.z[0] })
        }
    }

    /// View of the whole dataset.
    pub fn view(&self) -> DataView<'_> {
        DataView {
            ds: self,
            idx: (0..self.n()).collect(),
        }
    }

    /// View restricted to the given row indices.
    pub fn subset(&self, idx: Vec<usize>) -> DataView<'_> {
        debug_assert!(idx.iter().all(|&i| i < self.n()));
        DataView { ds: self, idx }
    }
}

/// Index view over a [`Dataset`]: the unit of cross-fitting folds and
/// sample splits.
#[derive(Debug, Clone)]
pub struct DataView<'a> {
    ds: &'a Dataset,
    idx: Vec<usize>,
}

impl<'a> DataView<'a> {
    pub fn len(&self) -> usize {
        self.idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.ds
    }

    pub fn indices(&self) -> &[usize] {
        &self.idx
    }

    pub fn obs(&self, i: usize) -> ObsRef<'a> {
        self.ds.obs(self.idx[i])
    }

    /// Materialize the covariate rows of this view as a dense matrix,
    /// optionally prefixing the instrument column (for learners of
    /// functions of `(z, x)`).
    pub fn features(&self, with_z: bool) -> Vec<Vec<f64>> {
        self.idx
            .iter()
            .map(|&i| {
                let mut row = Vec::with_capacity(self.ds.p + usize::from(with_z));
                if with_z {
                    row.push(f64::from(self.ds.z[i]));
                }
                row.extend_from_slice(self.ds.x_row(i));
                row
            })
            .collect()
    }

    pub fn y_vec(&self) -> Vec<f64> {
        self.idx.iter().map(|&i| self.ds.y[i]).collect()
    }

    pub fn a_vec(&self) -> Vec<f64> {
        self.idx.iter().map(|&i| f64::from(self.ds.a[i])).collect()
    }

    pub fn z_vec(&self) -> Vec<f64> {
        self.idx.iter().map(|&i| f64::from(self.ds.z[i])).collect()
    }
}

/// Validate raw rows against a schema and assemble a [`Dataset`].
///
/// Rejects non-binary treatment/instrument codes, non-finite values and a
/// degenerate instrument (all z identical).
pub fn validate_dataset(rows: &[Vec<f64>], schema: &ColumnSchema) -> Result<Dataset> {
    if rows.is_empty() {
        return Err(IvmrError::EmptyDataset);
    }
    let width = 3 + schema.x.len();
    let mut obs = Vec::with_capacity(rows.len());
    for (row, r) in rows.iter().enumerate() {
        if r.len() < width {
            return Err(IvmrError::RowLength {
                row,
                got: r.len(),
                expected: width,
            });
        }
        let a = decode_binary(r[schema.a], row, true)?;
        let z = decode_binary(r[schema.z], row, false)?;
        let x = schema
            .x
            .iter()
            .map(|&j| {
                r.get(j).copied().ok_or(IvmrError::IndexOutOfRange {
                    index: j,
                    dim: r.len(),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        obs.push(Observation {
            y: r[schema.y],
            a,
            z,
            x,
        });
    }
    let ds = Dataset::from_observations(obs)?;
    ds.require_both_arms()?;
    Ok(ds)
}

fn decode_binary(v: f64, row: usize, treatment: bool) -> Result<u8> {
    if v == 0.0 {
        Ok(0)
    } else if v == 1.0 {
        Ok(1)
    } else if treatment {
        Err(IvmrError::NonBinaryTreatment { row, value: v })
    } else {
        Err(IvmrError::NonBinaryInstrument { row, value: v })
    }
}

/// One column of a design matrix built from raw covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnTransform {
    /// The raw covariate `x_j`.
    Raw(usize),
    /// Steep logistic transform `1 / (1 + exp(-20 (x_j - 0.5)))`.
    LogisticBump(usize),
    /// Quadratic transform `(x_j - 0.5)^2`.
    CenteredSquare(usize),
    /// Constant 1 column.
    Intercept,
}

impl ColumnTransform {
    fn column_index(self) -> Option<usize> {
        match self {
            ColumnTransform::Raw(j)
            | ColumnTransform::LogisticBump(j)
            | ColumnTransform::CenteredSquare(j) => Some(j),
            ColumnTransform::Intercept => None,
        }
    }

    pub fn eval(self, x: &[f64]) -> f64 {
        match self {
            ColumnTransform::Raw(j) => x[j],
            ColumnTransform::LogisticBump(j) => logistic_bump(x[j]),
            ColumnTransform::CenteredSquare(j) => {
                let d = x[j] - 0.5;
                d * d
            }
            ColumnTransform::Intercept => 1.0,
        }
    }
}

pub fn logistic_bump(v: f64) -> f64 {
    1.0 / (1.0 + (-20.0 * (v - 0.5)).exp())
}

/// Ordered list of column transforms defining a design matrix.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CovariateSpec {
    columns: Vec<ColumnTransform>,
}

impl CovariateSpec {
    /// Validate column indices against covariate dimension `p` and the
    /// at-most-one-intercept rule.
    pub fn new(columns: Vec<ColumnTransform>, p: usize) -> Result<Self> {
        let mut intercepts = 0usize;
        for c in &columns {
            match c.column_index() {
                Some(j) if j >= p => return Err(IvmrError::IndexOutOfRange { index: j, dim: p }),
                Some(_) => {}
                None => intercepts += 1,
            }
        }
        if intercepts > 1 {
            return Err(IvmrError::DuplicateIntercept);
        }
        Ok(CovariateSpec { columns })
    }

    /// Intercept followed by raw columns `0..p`.
    pub fn intercept_and_raw(p: usize) -> Self {
        let mut columns = vec![ColumnTransform::Intercept];
        columns.extend((0..p).map(ColumnTransform::Raw));
        CovariateSpec { columns }
    }

    pub fn intercept_only() -> Self {
        CovariateSpec {
            columns: vec![ColumnTransform::Intercept],
        }
    }

    pub fn columns(&self) -> &[ColumnTransform] {
        &self.columns
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    /// Evaluate the transforms for one covariate vector.
    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        self.columns.iter().map(|c| c.eval(x)).collect()
    }

    pub fn features_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.columns) {
            *o = c.eval(x);
        }
    }
}

/// Evaluate a covariate spec over every row of a dataset, producing the
/// `n x q` design matrix. Row `i` depends only on observation `i`.
pub fn apply_spec(dataset: &Dataset, spec: &CovariateSpec) -> Result<DMatrix<f64>> {
    for c in spec.columns() {
        if let Some(j) = c.column_index() {
            if j >= dataset.p() {
                return Err(IvmrError::IndexOutOfRange {
                    index: j,
                    dim: dataset.p(),
                });
            }
        }
    }
    let n = dataset.n();
    let q = spec.width();
    let mut m = DMatrix::zeros(n, q);
    for i in 0..n {
        let x = dataset.x_row(i);
        for (j, c) in spec.columns().iter().enumerate() {
            m[(i, j)] = c.eval(x);
        }
    }
    Ok(m)
}
