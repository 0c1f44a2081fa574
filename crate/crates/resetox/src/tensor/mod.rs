//! Dense `f64` tensors and reverse-mode automatic differentiation.
//!
//! Everything in the crate that needs gradients runs through [`Tape`]: the
//! forward pass records operations, `backward` replays them in reverse and
//! accumulates adjoints into per-node gradient buffers. Gradients accumulate
//! additively across `backward` calls and are cleared only by an explicit
//! [`Tape::zero_grads`].
//!
//! Tensors are plain values (no interior sharing), so parameter sets can be
//! shared read-only across threads via `Arc<Tensor>`; each logical execution
//! stream owns its tape exclusively.

mod tape;

pub mod gradcheck;

pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// Dense row-major 64-bit float tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating that the extents are positive and
    /// consistent with the data length.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::Contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        assert!(numel > 0, "zero-extent tensor shape {shape:?}");
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    /// 1x1 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// Column vector of shape `[len, 1]`.
    pub fn column(values: Vec<f64>) -> Self {
        assert!(!values.is_empty());
        Tensor {
            shape: vec![values.len(), 1],
            data: values,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        debug_assert!(self.is_matrix());
        self.shape[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        debug_assert!(self.is_matrix());
        self.shape[1]
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Scalar payload of a 1-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }
}

// Shared matrix kernels. All accumulate into `out` so backward passes can
// reuse them directly on adjoint buffers.

/// out[m,n] += a[m,k] * b[k,n]
pub(crate) fn mm_nn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T
pub(crate) fn mm_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            orow[j] += acc;
        }
    }
}

/// out[m,n] += a[k,m]^T * b[k,n]
pub(crate) fn mm_tn(a: &[f64], k: usize, m: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let aip = arow[i];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_zero_extents_and_bad_lengths() {
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn kernels_agree_with_naive_products() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut out = vec![0.0; 4];
        mm_nn(&a, 2, 3, &b, 2, &mut out);
        assert_eq!(out, vec![58.0, 64.0, 139.0, 154.0]);

        // a[2,3] * b[2,3]^T -> 2x2
        let mut out = vec![0.0; 4];
        mm_nt(&a, 2, 3, &b[..6], 2, &mut out);
        // row0 . row0 = 1*7+2*8+3*9 = 50 ; row0 . row1 = 1*10+2*11+3*12 = 68
        assert_eq!(out, vec![50.0, 68.0, 122.0, 167.0]);

        // a[2,3]^T * b[2,2]? use a as [2,3], treat k=2,m=3: a^T is 3x2
        let b22 = [1.0, 2.0, 3.0, 4.0];
        let mut out = vec![0.0; 6];
        mm_tn(&a, 2, 3, &b22, 2, &mut out);
        // a^T = [[1,4],[2,5],[3,6]]; a^T*b = [[13,18],[17,24],[21,30]]
        assert_eq!(out, vec![13.0, 18.0, 17.0, 24.0, 21.0, 30.0]);
    }
}
