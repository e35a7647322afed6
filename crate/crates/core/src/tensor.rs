//! Minimal dense row-major matrix used by the network stack.
//!
//! Everything is `f64`. Shape mismatches panic — they are programmer
//! errors, not runtime conditions. The multiply kernels below use an
//! i-k-j loop order so the inner loop streams contiguously.

/// Dense row-major matrix. A column vector is a `Tensor` with `cols == 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length mismatch");
        Tensor { rows, cols, data }
    }

    /// Column vector from a slice.
    pub fn col_vec(v: &[f64]) -> Self {
        Tensor {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Extract column `j` as an owned column vector.
    pub fn column(&self, j: usize) -> Tensor {
        assert!(j < self.cols, "column index out of range");
        let mut data = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            data.push(self.data[r * self.cols + j]);
        }
        Tensor {
            rows: self.rows,
            cols: 1,
            data,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `A · B` for `[m×k]·[k×n]`.
pub fn matmul_nn(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul_nn inner dimension mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

/// `A · Bᵀ` for `[m×k]·([n×k])ᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "matmul_nt inner dimension mismatch");
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            out.data[i * n + j] = acc;
        }
    }
    out
}

/// `Aᵀ · B` for `([k×m])ᵀ·[k×n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows, "matmul_tn inner dimension mismatch");
    let (m, k, n) = (a.cols, a.rows, b.cols);
    let mut out = Tensor::zeros(m, n);
    for kk in 0..k {
        let arow = &a.data[kk * m..(kk + 1) * m];
        let brow = &b.data[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aki = arow[i];
            if aki == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aki * brow[j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::from_vec(rows, cols, v.to_vec())
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let a = t(2, 3, &[1.0, 2.0, -1.0, 0.5, 0.0, 3.0]);
        let b = t(3, 2, &[2.0, 1.0, -1.0, 0.0, 4.0, -2.0]);
        let nn = matmul_nn(&a, &b);
        assert_eq!(nn.data, vec![-4.0, 3.0, 13.0, -5.5]);

        // A·Bᵀ via nt must equal nn against the transpose.
        let bt = b.transpose();
        let nt = matmul_nt(&a, &bt);
        assert_eq!(nt.data, nn.data);

        // Aᵀ·B via tn against explicit transpose.
        let at = a.transpose();
        let tn = matmul_tn(&at, &b);
        assert_eq!(tn.data, nn.data);
    }

    #[test]
    fn column_extracts() {
        let a = t(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(a.column(1).data, vec![2.0, 4.0, 6.0]);
    }
}
