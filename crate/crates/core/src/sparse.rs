//! Minimal sparse matrix support: triplet assembly and compressed-column
//! storage with the products the solvers need.

use std::fmt::Write as _;

/// Coordinate-form builder. Duplicate entries are summed on compression.
#[derive(Debug, Clone, Default)]
pub struct TripletMatrix {
    nrows: usize,
    ncols: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl TripletMatrix {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            ..Default::default()
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    /// Append a fresh row and return its index.
    pub fn add_row(&mut self) -> usize {
        self.nrows += 1;
        self.nrows - 1
    }

    pub fn push(&mut self, row: usize, col: usize, val: f64) {
        assert!(row < self.nrows && col < self.ncols, "triplet ({row}, {col}) out of bounds");
        if val != 0.0 {
            self.rows.push(row);
            self.cols.push(col);
            self.vals.push(val);
        }
    }

    pub fn to_csc(&self) -> CscMatrix {
        let mut colptr = vec![0usize; self.ncols + 1];
        for &c in &self.cols {
            colptr[c + 1] += 1;
        }
        for c in 0..self.ncols {
            colptr[c + 1] += colptr[c];
        }
        let nnz = self.vals.len();
        let mut next = colptr.clone();
        let mut rowval = vec![0usize; nnz];
        let mut nzval = vec![0.0; nnz];
        for k in 0..nnz {
            let c = self.cols[k];
            let dst = next[c];
            rowval[dst] = self.rows[k];
            nzval[dst] = self.vals[k];
            next[c] += 1;
        }

        // sort rows inside each column and merge duplicates
        let mut out_ptr = vec![0usize; self.ncols + 1];
        let mut out_row = Vec::with_capacity(nnz);
        let mut out_val = Vec::with_capacity(nnz);
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for c in 0..self.ncols {
            scratch.clear();
            scratch.extend((colptr[c]..colptr[c + 1]).map(|k| (rowval[k], nzval[k])));
            scratch.sort_by_key(|&(r, _)| r);
            let mut i = 0;
            while i < scratch.len() {
                let r = scratch[i].0;
                let mut v = 0.0;
                while i < scratch.len() && scratch[i].0 == r {
                    v += scratch[i].1;
                    i += 1;
                }
                if v != 0.0 {
                    out_row.push(r);
                    out_val.push(v);
                }
            }
            out_ptr[c + 1] = out_row.len();
        }
        CscMatrix {
            nrows: self.nrows,
            ncols: self.ncols,
            colptr: out_ptr,
            rowval: out_row,
            nzval: out_val,
        }
    }
}

/// Compressed sparse column matrix with sorted, duplicate-free columns.
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub colptr: Vec<usize>,
    pub rowval: Vec<usize>,
    pub nzval: Vec<f64>,
}

impl CscMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            colptr: vec![0; ncols + 1],
            rowval: Vec::new(),
            nzval: Vec::new(),
        }
    }

    pub fn from_dense(rows: &[&[f64]]) -> Self {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.len());
        let mut t = TripletMatrix::new(nrows, ncols);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), ncols, "ragged dense input");
            for (j, &v) in row.iter().enumerate() {
                t.push(i, j, v);
            }
        }
        t.to_csc()
    }

    pub fn nnz(&self) -> usize {
        self.nzval.len()
    }

    /// Entries of column `j` as `(row, value)` pairs.
    pub fn col(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.colptr[j]..self.colptr[j + 1];
        self.rowval[r.clone()].iter().copied().zip(self.nzval[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.col(j).find(|&(r, _)| r == i).map_or(0.0, |(_, v)| v)
    }

    /// `y += A x`
    pub fn mul_add(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(y.len(), self.nrows);
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                for (i, v) in self.col(j) {
                    y[i] += v * xj;
                }
            }
        }
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.mul_add(x, &mut y);
        y
    }

    /// `y += Aᵀ x`
    pub fn tr_mul_add(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.nrows);
        debug_assert_eq!(y.len(), self.ncols);
        for (j, yj) in y.iter_mut().enumerate() {
            *yj += self.col(j).map(|(i, v)| v * x[i]).sum::<f64>();
        }
    }

    pub fn transpose(&self) -> CscMatrix {
        let mut t = TripletMatrix::new(self.ncols, self.nrows);
        for j in 0..self.ncols {
            for (i, v) in self.col(j) {
                t.push(j, i, v);
            }
        }
        t.to_csc()
    }

    /// Largest `|A_ij - A_ji|`; infinite for non-square matrices.
    pub fn max_asymmetry(&self) -> f64 {
        if self.nrows != self.ncols {
            return f64::INFINITY;
        }
        let mut worst: f64 = 0.0;
        for j in 0..self.ncols {
            for (i, v) in self.col(j) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// Column indices of the nonzeros of every row.
    pub fn row_support(&self) -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::new(); self.nrows];
        for j in 0..self.ncols {
            for (i, _) in self.col(j) {
                rows[i].push(j);
            }
        }
        rows
    }

    /// Triplet text dump: one `row col value` line per stored entry.
    pub fn write_triplets(&self, out: &mut String) {
        for j in 0..self.ncols {
            for (i, v) in self.col(j) {
                let _ = writeln!(out, "{i} {j} {v:.17e}");
            }
        }
    }
}
