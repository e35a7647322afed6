//! Compressed sparse row matrices for the discrete spatial operators.
//!
//! Stencils (Laplacians, upwind transport, velocity averages) are small
//! and fixed per grid, so they are built once from triplets and applied
//! to dense blocks. `tmul_add` applies the transpose, which is exactly
//! the adjoint needed by reverse-mode differentiation.

use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Csr {
    pub rows: usize,
    pub cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    /// Build from (row, col, value) triplets; duplicate entries are summed.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Csr {
        let mut per_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); rows];
        for &(r, c, v) in triplets {
            assert!(r < rows && c < cols, "triplet out of bounds");
            per_row[r].push((c, v));
        }
        let mut indptr = Vec::with_capacity(rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for row in &mut per_row {
            row.sort_by_key(|&(c, _)| c);
            let mut last: Option<usize> = None;
            for &(c, v) in row.iter() {
                if last == Some(c) {
                    *values.last_mut().unwrap() += v;
                } else {
                    indices.push(c);
                    values.push(v);
                    last = Some(c);
                }
            }
            indptr.push(indices.len());
        }
        Csr {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterate the non-zeros of one row as `(col, value)`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.indptr[r];
        let hi = self.indptr[r + 1];
        self.indices[lo..hi]
            .iter()
            .copied()
            .zip(self.values[lo..hi].iter().copied())
    }

    /// `self · x` for a dense vector.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            let mut acc = 0.0;
            for (c, v) in self.row(r) {
                acc += v * x[c];
            }
            out[r] = acc;
        }
        out
    }

    /// `self · B` for a dense block `[cols × n]`.
    pub fn matmul(&self, b: &Tensor) -> Tensor {
        assert_eq!(b.rows, self.cols, "sparse matmul dimension mismatch");
        let n = b.cols;
        let mut out = Tensor::zeros(self.rows, n);
        for r in 0..self.rows {
            let orow = &mut out.data[r * n..(r + 1) * n];
            for (c, v) in self.row(r) {
                let brow = &b.data[c * n..(c + 1) * n];
                for j in 0..n {
                    orow[j] += v * brow[j];
                }
            }
        }
        out
    }

    /// `into += selfᵀ · g` — the adjoint of [`Csr::matmul`].
    pub fn tmul_add(&self, g: &Tensor, into: &mut Tensor) {
        assert_eq!(g.rows, self.rows, "tmul_add dimension mismatch");
        assert_eq!(into.rows, self.cols, "tmul_add output mismatch");
        assert_eq!(g.cols, into.cols, "tmul_add column mismatch");
        let n = g.cols;
        for r in 0..self.rows {
            let grow = &g.data[r * n..(r + 1) * n];
            for (c, v) in self.row(r) {
                let irow = &mut into.data[c * n..(c + 1) * n];
                for j in 0..n {
                    irow[j] += v * grow[j];
                }
            }
        }
    }

    /// Dense copy, for solver assembly.
    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                out.data[r * self.cols + c] += v;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_sum_and_matvec_matches_dense() {
        let m = Csr::from_triplets(2, 3, &[(0, 0, 1.0), (0, 0, 2.0), (0, 2, -1.0), (1, 1, 4.0)]);
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.matvec(&[1.0, 2.0, 3.0]), vec![0.0, 8.0]);
    }

    #[test]
    fn tmul_is_transpose_of_mul() {
        let m = Csr::from_triplets(2, 3, &[(0, 1, 2.0), (1, 0, -1.0), (1, 2, 0.5)]);
        let x = Tensor::from_vec(2, 1, vec![3.0, 4.0]);
        let mut out = Tensor::zeros(3, 1);
        m.tmul_add(&x, &mut out);
        // Dense check: Mᵀ·x.
        let dense = m.to_dense();
        let expected = crate::tensor::matmul_tn(&dense, &x);
        assert_eq!(out.data, expected.data);
    }
}
