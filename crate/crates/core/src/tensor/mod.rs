//! Dense tensor arithmetic and reverse-mode differentiation.
//!
//! [`Tensor`] is a contiguous row-major buffer with an optional gradient
//! slot. Differentiable computations are recorded on a [`tape::Tape`];
//! value-level helpers here serve the non-differentiated paths
//! (initializers, diagnostics, data generation).

pub mod gradcheck;
pub mod tape;

use crate::error::{Result, SptError};
use crate::scalar::Scalar;
use rand::Rng;

/// Dense n-dimensional array of floats.
///
/// Invariants: `product(shape) == data.len()`, and `grad`, when present,
/// has the same length as `data`. Rank 0 is a scalar with one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(SptError::ShapeMismatch {
                op: "from_vec",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    /// 2-D identity.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// I.i.d. normal entries with the given std deviation. Values are drawn
    /// in f64 and narrowed, so f32/f64 runs see the same stream.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                // Box-Muller on two uniform draws.
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen::<f64>();
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                T::from_f64(z * std)
            })
            .collect();
        Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    /// I.i.d. uniform entries on `[-a, a]`.
    pub fn rand_uniform(shape: Vec<usize>, a: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                if a == 0.0 {
                    T::zero()
                } else {
                    T::from_f64(rng.gen_range(-a..=a))
                }
            })
            .collect();
        Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self) -> T {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.set_requires_grad(on);
        self
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[T]) {
        debug_assert_eq!(delta.len(), self.data.len());
        match &mut self.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => self.grad = Some(delta.to_vec()),
        }
    }

    /// Reinterprets the buffer under a new shape of equal volume.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(SptError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
            grad: None,
            requires_grad: false,
        })
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        debug_assert_eq!(self.rank(), 2);
        let d = self.shape[1];
        &self.data[i * d..(i + 1) * d]
    }

    /// Token rows `start..start+len` of a rank-3 `[B, T, D]` tensor.
    pub fn slice_axis1(&self, start: usize, len: usize) -> Tensor<T> {
        debug_assert_eq!(self.rank(), 3);
        let (b, t, d) = (self.shape[0], self.shape[1], self.shape[2]);
        debug_assert!(start + len <= t);
        let mut data = Vec::with_capacity(b * len * d);
        for bi in 0..b {
            let base = (bi * t + start) * d;
            data.extend_from_slice(&self.data[base..base + len * d]);
        }
        Tensor {
            shape: vec![b, len, d],
            data,
            grad: None,
            requires_grad: false,
        }
    }

    /// Sub-matrix `[rows, cols]` at batch index `b` of a rank-3 tensor.
    pub fn batch(&self, b: usize) -> Tensor<T> {
        debug_assert_eq!(self.rank(), 3);
        let (r, c) = (self.shape[1], self.shape[2]);
        let sz = r * c;
        Tensor {
            shape: vec![r, c],
            data: self.data[b * sz..(b + 1) * sz].to_vec(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn at(&self, idx: &[usize]) -> T {
        debug_assert_eq!(idx.len(), self.rank());
        let mut off = 0;
        for (i, &ix) in idx.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            off = off * self.shape[i] + ix;
        }
        self.data[off]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(SptError::ShapeMismatch {
                op: "add",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(SptError::ShapeMismatch {
                op: "sub",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    /// `self(m×k) · other(k×n)`, GEMM-backed.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(SptError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let n = other.shape[1];
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &self.data,
            k as isize,
            1,
            &other.data,
            n as isize,
            1,
            T::zero(),
            &mut out,
        );
        Tensor::from_vec(vec![m, n], out)
    }

    /// Rank-2 transpose (materialized).
    pub fn transposed(&self) -> Self {
        debug_assert_eq!(self.rank(), 2);
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data,
            grad: None,
            requires_grad: false,
        }
    }

    /// Stacks rank-2 tensors with identical widths along axis 0.
    pub fn vcat(parts: &[&Tensor<T>]) -> Result<Self> {
        let width = parts
            .first()
            .map(|t| t.shape[1])
            .ok_or_else(|| SptError::config("vcat of zero tensors"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.rank() != 2 || p.shape[1] != width {
                return Err(SptError::ShapeMismatch {
                    op: "vcat",
                    lhs: vec![rows, width],
                    rhs: p.shape.clone(),
                });
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Tensor::from_vec(vec![rows, width], data)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().to_f64())
            .fold(0.0, f64::max)
    }

    /// Coordinate-wise minima over rows of a rank-2 tensor.
    pub fn col_min(&self) -> Vec<T> {
        debug_assert_eq!(self.rank(), 2);
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::infinity(); n];
        for i in 0..m {
            for j in 0..n {
                let v = self.data[i * n + j];
                if v < out[j] {
                    out[j] = v;
                }
            }
        }
        out
    }

    /// Coordinate-wise maxima over rows of a rank-2 tensor.
    pub fn col_max(&self) -> Vec<T> {
        debug_assert_eq!(self.rank(), 2);
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::neg_infinity(); n];
        for i in 0..m {
            for j in 0..n {
                let v = self.data[i * n + j];
                if v > out[j] {
                    out[j] = v;
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Naive triple-loop reference multiply; the oracle for GEMM paths.
    fn matmul_naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += a.data()[i * k + l] * b.data()[l * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        Tensor::from_vec(vec![m, n], out).unwrap()
    }

    #[test]
    fn matmul_identity_exact() {
        let a = Tensor::from_vec(vec![2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let i2 = Tensor::eye(2);
        assert_eq!(i2.matmul(&a).unwrap().data(), a.data());
        assert_eq!(a.matmul(&i2).unwrap().data(), a.data());
    }

    #[test]
    fn matmul_annihilates_zeros() {
        let i2 = Tensor::<f64>::eye(2);
        let z = Tensor::<f64>::zeros(vec![2, 3]);
        let out = i2.matmul(&z).unwrap();
        assert_eq!(out.shape(), &[2, 3]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f64>::randn(vec![3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(vec![4, 2], 1.0, &mut rng);
        let got = a.matmul(&b).unwrap();
        let want = matmul_naive(&a, &b);
        assert!(got.max_abs_diff(&want) < 1e-6);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        let b = Tensor::<f32>::zeros(vec![4, 2]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn from_vec_rejects_bad_volume() {
        assert!(Tensor::from_vec(vec![2, 2], vec![1.0f32, 2.0]).is_err());
    }

    #[test]
    fn grad_accumulates_and_clears() {
        let mut t = Tensor::<f32>::zeros(vec![3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 3.0, 4.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn transpose_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f32>::randn(vec![3, 5], 1.0, &mut rng);
        let back = a.transposed().transposed();
        assert_eq!(a.data(), back.data());
    }
}
