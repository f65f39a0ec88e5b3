//! Dense f64 arrays and reverse-mode automatic differentiation.
//!
//! The tape supports exactly what two-hidden-layer MLPs, Gaussian-mixture
//! log-densities and backprop through environment rollouts require. It is
//! rebuilt from scratch every training step (define-by-run); there is no
//! graph caching. All math is 64-bit.

mod adam;
mod gradcheck;
mod tape;

pub use adam::{clip_global_norm, AdamConfig, AdamState};
pub use gradcheck::grad_check;
pub use tape::{logsumexp, GradientMap, NodeId, Tape};

use crate::error::{Error, Result};

/// A dense row-major array of f64 values.
///
/// Rank is 1 or 2 in practice; a scalar is any array with one element.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "array-new",
                details: format!("shape {:?} implies {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Array { shape, data: vec![0.0; numel] }
    }

    pub fn scalar(v: f64) -> Self {
        Array { shape: vec![1], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Array { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Array::new(vec![rows, cols], data)
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element array.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Rows of a matrix; a rank-1 array counts as a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Columns of a matrix; for rank-1 arrays this is the length.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm over all entries.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// C = A (m x k) * B (k x n), row major, written into a fresh buffer.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    // matrixmultiply's dgemm kernel; strides are in elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// C += A^T (k x m)^T=(m x k) variant helpers for backward passes.
/// acc += A (m x k) * B (k x n) with optional transposes, row major.
pub(crate) fn matmul_acc(
    acc: &mut [f64],
    a: &[f64],
    ta: bool,
    a_rows: usize,
    a_cols: usize,
    b: &[f64],
    tb: bool,
    b_rows: usize,
    b_cols: usize,
) {
    let (m, k) = if ta { (a_cols, a_rows) } else { (a_rows, a_cols) };
    let (kb, n) = if tb { (b_cols, b_rows) } else { (b_rows, b_cols) };
    debug_assert_eq!(k, kb);
    debug_assert_eq!(acc.len(), m * n);
    let (rsa, csa) = if ta { (1, a_cols as isize) } else { (a_cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b_cols as isize) } else { (b_cols as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            acc.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(Array::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Array::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_raw_small() {
        // [ [1,2], [3,4] ] * [ [5,6], [7,8] ] = [ [19,22], [43,50] ]
        let c = matmul_raw(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_acc_transposes() {
        // a (2x3), b (2x3): a^T * b is (3x3)
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let mut acc = vec![0.0; 9];
        matmul_acc(&mut acc, &a, true, 2, 3, &b, false, 2, 3);
        // column i of a dotted with column j of b
        assert_eq!(acc[0], 1.0); // a[:,0]=(1,4) . b[:,0]=(1,0)
        assert_eq!(acc[1], 4.0);
        assert_eq!(acc[2], 1.0);
    }
}
