//! Dense row-major f64 tensors.
//!
//! Everything in the crate runs on 64-bit floats; desk-scale problem
//! sizes make that affordable and it keeps numeric tolerances tight.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// A dense tensor with row-major layout. Rank 0/1/2 cover every use in
/// the crate; scalars are stored as shape `[]` with one element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>().max(1), data.len());
        Tensor { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Tensor { shape: vec![rows, cols], data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product::<usize>().max(1);
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    /// Per-sequence (T, d) view helpers used by data code.
    pub fn check_matrix(&self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::shape(format!("expected rank-2 tensor, got shape {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Row-major matmul with optional transposes: `op(a) * op(b)`.
pub fn matmul(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Tensor {
    let (am, ak) = (a.shape[0], a.shape[1]);
    let (bm, bk) = (b.shape[0], b.shape[1]);
    let (m, k1) = if ta { (ak, am) } else { (am, ak) };
    let (k2, n) = if tb { (bk, bm) } else { (bm, bk) };
    assert_eq!(k1, k2, "matmul inner dims: {:?} (t={}) x {:?} (t={})", a.shape, ta, b.shape, tb);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for k in 0..k1 {
            let av = if ta { a.data[k * ak + i] } else { a.data[i * ak + k] };
            if av == 0.0 {
                continue;
            }
            if tb {
                for j in 0..n {
                    out[i * n + j] += av * b.data[j * bk + k];
                }
            } else {
                let brow = &b.data[k * bk..k * bk + n];
                let orow = &mut out[i * n..i * n + n];
                for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                    *o += av * bv;
                }
            }
        }
    }
    Tensor::matrix(m, n, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_plain_and_transposed() {
        let a = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::matrix(3, 2, vec![7., 8., 9., 10., 11., 12.]);
        let c = matmul(&a, false, &b, false);
        assert_eq!(c.data, vec![58., 64., 139., 154.]);

        // a^T * a
        let g = matmul(&a, true, &a, false);
        assert_eq!(g.shape, vec![3, 3]);
        assert_eq!(g.at2(0, 0), 1. + 16.);

        // a * a^T
        let h = matmul(&a, false, &a, true);
        assert_eq!(h.shape, vec![2, 2]);
        assert_eq!(h.at2(0, 1), 1. * 4. + 2. * 5. + 3. * 6.);
    }
}
