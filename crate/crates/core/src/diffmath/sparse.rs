use super::array::Array;
use crate::error::{Error, Result};

/// Compressed sparse row matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Csr {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl Csr {
    /// Builds from per-row `(col, value)` lists; columns within a row are sorted
    /// and duplicates summed.
    pub fn from_row_lists(cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let n_rows = rows.len();
        let mut indptr = Vec::with_capacity(n_rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            let mut last: Option<usize> = None;
            for (c, v) in row {
                if c >= cols {
                    return Err(Error::Shape(format!("column {c} out of range for {cols} columns")));
                }
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("sparse entry at column {c}")));
                }
                if last == Some(c) {
                    *values.last_mut().expect("previous entry") += v;
                } else {
                    indices.push(c);
                    values.push(v);
                    last = Some(c);
                }
            }
            indptr.push(indices.len());
        }
        Ok(Self {
            rows: n_rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn row_sum(&self, r: usize) -> f64 {
        self.row(r).map(|(_, v)| v).sum()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(j, _)| j == c).map_or(0.0, |(_, v)| v)
    }

    pub fn to_dense(&self) -> Array {
        let mut out = Array::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                out.set(r, c, v);
            }
        }
        out
    }

    pub fn transpose(&self) -> Csr {
        let mut lists = vec![Vec::new(); self.cols];
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                lists[c].push((r, v));
            }
        }
        Csr::from_row_lists(self.rows, lists).expect("transpose of a valid matrix")
    }

    /// Sparse × sparse product, dropping entries with magnitude below `drop_below`.
    pub fn matmul(&self, other: &Csr, drop_below: f64) -> Result<Csr> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "sparse matmul: [{}, {}] x [{}, {}]",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut acc = vec![0.0; other.cols];
        let mut touched = vec![false; other.cols];
        let mut lists = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            let mut cols_hit = Vec::new();
            for (k, a) in self.row(r) {
                for (c, b) in other.row(k) {
                    if !touched[c] {
                        touched[c] = true;
                        cols_hit.push(c);
                    }
                    acc[c] += a * b;
                }
            }
            let mut row = Vec::with_capacity(cols_hit.len());
            for c in cols_hit {
                let v = acc[c];
                if v.abs() >= drop_below {
                    row.push((c, v));
                }
                acc[c] = 0.0;
                touched[c] = false;
            }
            lists.push(row);
        }
        Csr::from_row_lists(other.cols, lists)
    }

    /// Scales each row to sum to one (rows summing to zero are left untouched).
    pub fn renormalize_rows(&mut self) {
        for r in 0..self.rows {
            let span = self.indptr[r]..self.indptr[r + 1];
            let s: f64 = self.values[span.clone()].iter().sum();
            if s > 0.0 {
                self.values[span].iter_mut().for_each(|v| *v /= s);
            }
        }
    }

    /// Dense product `self · x`.
    pub fn mul_dense(&self, x: &Array) -> Result<Array> {
        if self.cols != x.rows() {
            return Err(Error::Shape(format!(
                "sparse-dense matmul: [{}, {}] x [{}, {}]",
                self.rows,
                self.cols,
                x.rows(),
                x.cols()
            )));
        }
        let d = x.cols();
        let mut out = Array::zeros(self.rows, d);
        for r in 0..self.rows {
            let dst = &mut out.data_mut()[r * d..(r + 1) * d];
            for (c, v) in self.row(r) {
                for (o, xi) in dst.iter_mut().zip(x.row(c)) {
                    *o += v * xi;
                }
            }
        }
        Ok(out)
    }

    /// Restricts to the given row/column subset, in the given order.
    pub fn submatrix(&self, keep: &[usize]) -> Csr {
        let mut pos = vec![usize::MAX; self.cols];
        for (new, &old) in keep.iter().enumerate() {
            pos[old] = new;
        }
        let lists = keep
            .iter()
            .map(|&r| {
                self.row(r)
                    .filter(|&(c, _)| pos[c] != usize::MAX)
                    .map(|(c, v)| (pos[c], v))
                    .collect()
            })
            .collect();
        Csr::from_row_lists(keep.len(), lists).expect("submatrix of a valid matrix")
    }
}
