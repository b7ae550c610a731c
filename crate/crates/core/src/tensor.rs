//! Dense rank-1 / rank-2 tensors with `f32` storage.
//!
//! Storage is always row-major `f32`. Reductions (dot products, matrix
//! products, norms) accumulate in `f64` and round once at the end.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::TensorError;

/// Iteration cap used when callers do not pick one.
pub const DEFAULT_POWER_ITERS: usize = 64;

/// Successive power-iteration vectors closer than this end the iteration.
pub const POWER_ITER_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

/// Elementwise operation selector for [`elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Scale,
}

/// Right-hand operand of an elementwise operation.
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a> {
    Tensor(&'a Tensor),
    Scalar(f32),
}

impl Tensor {
    /// Builds a tensor, checking rank, element count and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        validate_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Dimension(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { index: idx });
        }
        Ok(Tensor { shape, data })
    }

    pub fn vector(data: Vec<f32>) -> Result<Self, TensorError> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Dimension("ragged rows".into()));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn zeros(shape: &[usize]) -> Result<Self, TensorError> {
        validate_shape(shape)?;
        let n = shape.iter().product();
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        })
    }

    pub fn identity(n: usize) -> Result<Self, TensorError> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    /// Converts `f64` values to `f32` storage (round to nearest).
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self, TensorError> {
        Self::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
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

    /// Rows of a matrix, or 1 for a vector.
    pub fn rows(&self) -> usize {
        if self.rank() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Columns of a matrix, or the length of a vector.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// Euclidean (Frobenius) norm, accumulated in `f64`.
    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: f32) -> Result<Tensor, TensorError> {
        let data: Vec<f32> = self.data.iter().map(|&v| v * factor).collect();
        Tensor::new(self.shape.clone(), data)
    }

    /// Applies `f` to every element, keeping the shape.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Tensor, TensorError> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::Dimension(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    /// Matrix product. Vectors on the right are treated as column vectors,
    /// so `m.matmul(&v)` with `v` of shape `[k]` yields shape `[m]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.rank() != 2 {
            return Err(TensorError::Dimension(format!(
                "matmul lhs must be a matrix, got shape {:?}",
                self.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n, out_shape) = match other.shape.as_slice() {
            &[k2] => (k2, 1, vec![m]),
            &[k2, n] => (k2, n, vec![m, n]),
            _ => unreachable!("tensors are rank 1 or 2"),
        };
        if k != k2 {
            return Err(TensorError::Dimension(format!(
                "inner dimensions disagree: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let lhs = self.to_f64();
        let rhs = other.to_f64();
        let mut out = vec![0.0f64; m * n];
        matmul_f64(&lhs, &rhs, &mut out, m, k, n);
        Tensor::from_f64(out_shape, &out)
    }

    /// Transpose of a matrix; vectors are returned unchanged.
    pub fn transpose(&self) -> Tensor {
        if self.rank() == 1 {
            return self.clone();
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data,
        }
    }

    /// Row `i` of a matrix as a slice.
    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }
}

fn validate_shape(shape: &[usize]) -> Result<(), TensorError> {
    if shape.is_empty() || shape.len() > 2 {
        return Err(TensorError::Dimension(format!(
            "rank must be 1 or 2, got shape {shape:?}"
        )));
    }
    if shape.contains(&0) {
        return Err(TensorError::Dimension(format!(
            "dimensions must be positive, got shape {shape:?}"
        )));
    }
    Ok(())
}

/// Row-major `out = lhs[m×k] · rhs[k×n]`, summing over `k` in ascending
/// order for every output cell.
pub fn matmul_f64(lhs: &[f64], rhs: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for p in 0..k {
                acc += lhs[i * k + p] * rhs[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
}

/// Elementwise dispatch: `Add`/`Sub` take a tensor, `Scale` a scalar.
pub fn elementwise(op: ElementwiseOp, a: &Tensor, b: Operand<'_>) -> Result<Tensor, TensorError> {
    match (op, b) {
        (ElementwiseOp::Add, Operand::Tensor(t)) => a.add(t),
        (ElementwiseOp::Sub, Operand::Tensor(t)) => a.sub(t),
        (ElementwiseOp::Scale, Operand::Scalar(s)) => a.scale(s),
        (ElementwiseOp::Add | ElementwiseOp::Sub, Operand::Scalar(s)) => {
            let sign = if op == ElementwiseOp::Add { 1.0 } else { -1.0 };
            a.map(|v| v + sign * s)
        }
        (ElementwiseOp::Scale, Operand::Tensor(t)) => a.zip_with(t, |x, y| x * y),
    }
}

/// Numerically stable softmax over a vector (max-subtracted, `f64` inside).
pub fn softmax(logits: &Tensor) -> Result<Tensor, TensorError> {
    if logits.is_empty() {
        return Err(TensorError::Dimension("softmax of empty input".into()));
    }
    let probs = softmax_f64(&logits.to_f64());
    Tensor::from_f64(logits.shape.clone(), &probs)
}

pub fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Unit vector `v` maximizing `‖m v‖`, by power iteration on `mᵀm` from a
/// seeded Gaussian start. The sign is fixed so that the entry of largest
/// magnitude is positive.
pub fn top_right_singular_vector(m: &Tensor, iters: usize, seed: u64) -> Result<Tensor, TensorError> {
    if m.rank() != 2 {
        return Err(TensorError::Dimension(format!(
            "expected a matrix, got shape {:?}",
            m.shape
        )));
    }
    if iters == 0 {
        return Err(TensorError::Dimension("power iteration needs iters >= 1".into()));
    }
    if m.is_zero() {
        return Err(TensorError::Degenerate("zero matrix has no dominant singular vector".into()));
    }
    let (p, q) = (m.shape[0], m.shape[1]);
    let a = m.to_f64();
    let mut gram = vec![0.0f64; q * q];
    for i in 0..q {
        for j in i..q {
            let mut acc = 0.0;
            for r in 0..p {
                acc += a[r * q + i] * a[r * q + j];
            }
            gram[i * q + j] = acc;
            gram[j * q + i] = acc;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..q).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut v);
    let mut next = vec![0.0f64; q];
    for _ in 0..iters {
        for i in 0..q {
            next[i] = (0..q).map(|j| gram[i * q + j] * v[j]).sum();
        }
        if normalize(&mut next) == 0.0 {
            // Start vector fell into the null space; restart along a basis
            // direction that carries energy.
            let col = (0..q)
                .max_by(|&x, &y| gram[x * q + x].total_cmp(&gram[y * q + y]))
                .expect("q >= 1");
            next.iter_mut().for_each(|e| *e = 0.0);
            next[col] = 1.0;
        }
        let delta: f64 = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        std::mem::swap(&mut v, &mut next);
        if delta < POWER_ITER_TOL {
            break;
        }
    }
    fix_sign(&mut v);
    Tensor::from_f64(vec![q], &v)
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Flips `v` so its largest-magnitude entry (first one on ties) is positive.
pub fn fix_sign(v: &mut [f64]) {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}
