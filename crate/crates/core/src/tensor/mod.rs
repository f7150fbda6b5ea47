//! Dense `f64` tensors and a reverse-mode tape.
//!
//! [`Tensor`] is a plain row-major value. Differentiable computation goes
//! through a [`Tape`], which records every operation on [`Var`] handles and
//! replays the backward rules in reverse order.

mod check;
mod tape;

pub use check::{grad_check, grad_check_entries, GradCheckReport};
pub use tape::{Tape, Var};

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid argument: {msg}")]
    Argument { op: &'static str, msg: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Row-major dense tensor of 64-bit floats.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Argument {
                op: "tensor",
                msg: format!("shape {shape:?} must be non-empty with positive dimensions"),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Argument {
                op: "tensor",
                msg: format!("shape {shape:?} holds {n} values but {} were given", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("valid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, (0..n).map(&mut f).collect()).expect("valid shape")
    }

    /// Builds a matrix from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self::new(&[rows.len(), cols], rows.concat()).expect("valid matrix")
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::Argument {
                op: "dims2",
                msg: format!("expected a matrix, got shape {:?}", self.shape),
            }),
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[self.shape.len() - 1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(TensorError::Contract(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Matrix product without recording on a tape.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &other.data, false, &mut out, 0.0);
        Tensor::new(&[m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(&[c, r], out)
    }

    /// Row-wise softmax of `x / temperature` along the last axis.
    pub fn softmax_lastdim(&self, temperature: f64) -> Result<Tensor> {
        check_temperature("softmax_lastdim", temperature)?;
        let cols = self.shape[self.shape.len() - 1];
        let mut out = self.data.clone();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row, temperature);
        }
        Tensor::new(&self.shape, out)
    }
}

pub(crate) fn check_temperature(op: &'static str, t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::Argument {
            op,
            msg: format!("temperature must be positive, got {t}"),
        })
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn log_softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row
        .iter()
        .map(|&v| ((v - max) / temperature).exp())
        .sum::<f64>()
        .ln();
    for v in row.iter_mut() {
        *v = (*v - max) / temperature - lse;
    }
}

/// `out = beta * out + op(a) * op(b)` for row-major operands, where `op`
/// optionally transposes. `a` is logically m×k and `b` k×n after `op`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    out: &mut [f64],
    beta: f64,
) {
    // Row/column strides for the logical (possibly transposed) operands.
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold m*k, k*n and m*n elements respectively and the
    // strides above address only those ranges.
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
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn identity_matmul() {
        let m = Tensor::from_rows(&[&[1.5, -2.0], &[0.25, 7.0]]);
        assert_eq!(Tensor::identity(2).matmul(&m).unwrap(), m);
    }

    #[test]
    fn hand_matmul() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_dimension_error_names_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_closed_forms() {
        let x = Tensor::from_rows(&[&[0.0, 3f64.ln()]]);
        let p = x.softmax_lastdim(1.0).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-15);
        assert!((p.data()[1] - 0.75).abs() < 1e-15);

        let flat = Tensor::full(&[3, 5], 4.2).softmax_lastdim(3.0).unwrap();
        for &v in flat.data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_flattens_with_temperature() {
        let x = Tensor::from_rows(&[&[0.0, 10.0]]);
        let mut last_gap = f64::INFINITY;
        for t in [1.0, 2.0, 4.0] {
            let p = x.softmax_lastdim(t).unwrap();
            let gap = p.data()[1] - p.data()[0];
            assert!(gap > 0.0 && gap < last_gap);
            last_gap = gap;
        }
        let p = x.softmax_lastdim(1e6).unwrap();
        assert!((p.data()[0] - 0.5).abs() < 1e-5);
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        let x = Tensor::zeros(&[1, 2]);
        assert!(x.softmax_lastdim(0.0).is_err());
        assert!(x.softmax_lastdim(-1.0).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_fn(&[4, 9], |i| ((i * 37) % 11) as f64 - 5.0);
        let p = x.softmax_lastdim(0.7).unwrap();
        for r in 0..4 {
            let s: f64 = p.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(p.row(r).iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn transposed_gemm_variants_agree() {
        let a = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.5 - 1.0);
        let b = Tensor::from_fn(&[4, 2], |i| (i as f64).sin());
        let want = a.matmul(&b).unwrap();
        let at = a.transpose().unwrap();
        let bt = b.transpose().unwrap();
        let mut out = vec![0.0; 6];
        gemm(3, 4, 2, at.data(), true, bt.data(), true, &mut out, 0.0);
        for (x, y) in out.iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}
