//! Compressed sparse row matrices and a forward/adjoint operator pair.

use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Assembles a matrix from per-row `(column, value)` lists. Columns within
    /// a row are sorted and duplicates summed.
    pub fn from_rows(ncols: usize, rows: Vec<Vec<(u32, f64)>>) -> Result<Self> {
        if ncols > u32::MAX as usize {
            return Err(Error::invalid("too many columns for u32 indices"));
        }
        let nrows = rows.len();
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            let mut last: Option<u32> = None;
            for (c, v) in row {
                if c as usize >= ncols {
                    return Err(Error::invalid(format!(
                        "column {c} out of range for {ncols} columns"
                    )));
                }
                if last == Some(c) {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(c);
                    values.push(v);
                    last = Some(c);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n as u32).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.col_idx[a..b], &self.values[a..b])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `y = M x`.
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols, "mul_vec input length");
        assert_eq!(y.len(), self.nrows, "mul_vec output length");
        for (i, out) in y.iter_mut().enumerate() {
            let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
            let mut acc = 0.0;
            for k in a..b {
                acc += self.values[k] * x[self.col_idx[k] as usize];
            }
            *out = acc;
        }
    }

    /// Explicit transpose. Entries keep their relative order, so the result
    /// is deterministic.
    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.ncols + 1];
        for &c in &self.col_idx {
            counts[c as usize + 1] += 1;
        }
        for j in 0..self.ncols {
            counts[j + 1] += counts[j];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let mut col_idx = vec![0u32; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for i in 0..self.nrows {
            let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
            for k in a..b {
                let c = self.col_idx[k] as usize;
                let dst = next[c];
                next[c] += 1;
                col_idx[dst] = i as u32;
                values[dst] = self.values[k];
            }
        }
        Self {
            nrows: self.ncols,
            ncols: self.nrows,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut dense = vec![vec![0.0; self.ncols]; self.nrows];
        for (i, row) in dense.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                row[c as usize] = v;
            }
        }
        dense
    }
}

/// A sparse linear map together with its explicit transpose, plus the tensor
/// shapes on either side. Cloning shares the matrices.
#[derive(Clone, Debug)]
pub struct LinearOp {
    matrix: Arc<CsrMatrix>,
    transpose: Arc<CsrMatrix>,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
}

impl LinearOp {
    pub fn new(matrix: CsrMatrix, in_shape: Vec<usize>, out_shape: Vec<usize>) -> Result<Self> {
        if in_shape.iter().product::<usize>() != matrix.ncols() {
            return Err(Error::shape("linear op input", &[matrix.ncols()], &in_shape));
        }
        if out_shape.iter().product::<usize>() != matrix.nrows() {
            return Err(Error::shape("linear op output", &[matrix.nrows()], &out_shape));
        }
        let transpose = Arc::new(matrix.transpose());
        Ok(Self {
            matrix: Arc::new(matrix),
            transpose,
            in_shape,
            out_shape,
        })
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn transpose_matrix(&self) -> &CsrMatrix {
        &self.transpose
    }

    pub fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    /// The adjoint map, sharing storage with `self`.
    pub fn adjoint(&self) -> LinearOp {
        LinearOp {
            matrix: Arc::clone(&self.transpose),
            transpose: Arc::clone(&self.matrix),
            in_shape: self.out_shape.clone(),
            out_shape: self.in_shape.clone(),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.matrix.nrows()];
        self.matrix.mul_vec(x, &mut y);
        y
    }

    pub fn apply_adjoint(&self, y: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.transpose.nrows()];
        self.transpose.mul_vec(y, &mut x);
        x
    }
}
