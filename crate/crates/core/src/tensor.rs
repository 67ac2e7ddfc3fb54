//! Dense row-major tensors over f32/f64 and the small-kernel numerics the
//! rest of the crate builds on: matmul, safe softmax, RMSNorm, RoPE.
//!
//! All higher modules index tensors as `[batch, head, seq, dim]` slices of
//! row-major storage; a 2-D tensor of shape `[rows, cols]` stores row `i`
//! contiguously at `data[i*cols .. (i+1)*cols]`.

use crate::error::{Error, Result};

/// Element type code used by the PLXT container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Scalar abstraction over the two supported float widths.
pub trait Scalar:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    const NEG_INF: Self;
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp2(self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const NEG_INF: Self = f32::NEG_INFINITY;
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp2(self) -> Self {
        f32::exp2(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn maximum(self, other: Self) -> Self {
        f32::max(self, other)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const NEG_INF: Self = f64::NEG_INFINITY;
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp2(self) -> Self {
        f64::exp2(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn maximum(self, other: Self) -> Self {
        f64::max(self, other)
    }
}

/// Dense row-major tensor. `product(dims) == data.len()` always holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(dims: &[usize]) -> Self {
        let n: usize = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![T::ZERO; n],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "dims {:?} imply {} elements, got {}",
                dims,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::from_vec(&[rows, cols], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn dtype(&self) -> Dtype {
        T::DTYPE
    }

    /// Row count of a 2-D tensor (a 1-D tensor counts as a single row).
    pub fn rows(&self) -> usize {
        match self.dims.len() {
            1 => 1,
            2 => self.dims[0],
            _ => panic!("rows() on {}-d tensor", self.dims.len()),
        }
    }

    /// Column count of a 2-D tensor (length of a 1-D tensor).
    pub fn cols(&self) -> usize {
        match self.dims.len() {
            1 => self.dims[0],
            2 => self.dims[1],
            _ => panic!("cols() on {}-d tensor", self.dims.len()),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn transpose(&self) -> Tensor<T> {
        let (m, n) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        out
    }

    pub fn frob_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|x| x.to_f64() * x.to_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::non_finite(context))
        }
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        self.map(|x| x.to_f64())
    }

    pub fn scale_in_place(&mut self, s: T) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.dims, other.dims, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn axpy(&mut self, alpha: T, other: &Tensor<T>) {
        assert_eq!(self.dims, other.dims, "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * *b;
        }
    }

    /// `self @ other` for 2-D tensors, [m,k] x [k,n] -> [m,n].
    pub fn matmul(&self, other: &Tensor<T>) -> Tensor<T> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * n..(i + 1) * n];
            for (l, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[l * n..(l + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self @ other^T` for 2-D tensors, [m,k] x [n,k] -> [m,n]. Row-dot form
    /// used by every QK^T-style score computation.
    pub fn matmul_transb(&self, other: &Tensor<T>) -> Tensor<T> {
        let (m, k) = (self.rows(), self.cols());
        let (n, k2) = (other.rows(), other.cols());
        assert_eq!(k, k2, "matmul_transb inner dims {k} vs {k2}");
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let a_row = self.row(i);
            for j in 0..n {
                out.data[i * n + j] = dot(a_row, other.row(j));
            }
        }
        out
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut s = T::ZERO;
    for (x, y) in a.iter().zip(b) {
        s += *x * *y;
    }
    s
}

pub fn norm2<T: Scalar>(a: &[T]) -> f64 {
    a.iter().map(|x| x.to_f64() * x.to_f64()).sum::<f64>().sqrt()
}

/// Masked safe softmax over the rows of a square logit matrix.
///
/// Returns `(P, m, omega)` where `m[i]` is the row max over the unmasked
/// entries, `omega[i] = sum_{j<=i} exp(S[i][j] - m[i])` is the unnormalized
/// mass in the max-shifted frame, and rows of `P` are probability vectors.
/// With `causal` set, entries `j > i` are masked out before normalization.
pub fn safe_softmax_rows(
    s: &Tensor<f64>,
    causal: bool,
) -> Result<(Tensor<f64>, Vec<f64>, Vec<f64>)> {
    s.check_finite("safe_softmax_rows input")?;
    let (rows, cols) = (s.rows(), s.cols());
    let mut p = Tensor::zeros(&[rows, cols]);
    let mut m = vec![0.0; rows];
    let mut omega = vec![0.0; rows];
    for i in 0..rows {
        let hi = if causal { (i + 1).min(cols) } else { cols };
        let row = &s.row(i)[..hi];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let p_row = p.row_mut(i);
        for (j, &v) in row.iter().enumerate() {
            let e = (v - mx).exp();
            p_row[j] = e;
            sum += e;
        }
        for x in &mut p_row[..hi] {
            *x /= sum;
        }
        m[i] = mx;
        omega[i] = sum;
    }
    Ok((p, m, omega))
}

/// RMSNorm: `y_i = x_i / sqrt(mean(x^2) + eps) * gamma_i`.
pub fn rmsnorm(x: &[f64], gamma: &[f64], eps: f64) -> Vec<f64> {
    assert_eq!(x.len(), gamma.len(), "rmsnorm gamma length");
    let d = x.len();
    let ms = x.iter().map(|v| v * v).sum::<f64>() / d as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    x.iter().zip(gamma).map(|(v, g)| v * inv * g).collect()
}

/// Rotation frequencies for a head dimension `d` (even) and base `theta`:
/// pair `k` (dims `2k`, `2k+1`) rotates at `theta^(-2k/d)` per position.
pub fn rope_freqs(d: usize, theta: f64) -> Vec<f64> {
    (0..d / 2)
        .map(|k| theta.powf(-2.0 * k as f64 / d as f64))
        .collect()
}

/// Apply RoPE to each row of `x`, treating the row index as the position.
/// Interleaved-pair convention: dims (2k, 2k+1) rotate together, counter-
/// clockwise, so at angle pi/2 the pair (1, 0) maps to (0, 1).
pub fn rope_apply(x: &Tensor<f64>, theta: f64) -> Result<Tensor<f64>> {
    let d = x.cols();
    if d % 2 != 0 {
        return Err(Error::shape(format!("rope requires even dim, got {d}")));
    }
    let freqs = rope_freqs(d, theta);
    let mut out = x.clone();
    for pos in 0..x.rows() {
        rope_rotate_row(out.row_mut(pos), pos as f64, &freqs, false);
    }
    Ok(out)
}

/// In-place pairwise rotation of one row at a given position. `inverse`
/// rotates by the negated angles (the adjoint of the forward rotation).
pub fn rope_rotate_row(row: &mut [f64], pos: f64, freqs: &[f64], inverse: bool) {
    for (k, &f) in freqs.iter().enumerate() {
        let angle = pos * f;
        let (sin, cos) = angle.sin_cos();
        let sin = if inverse { -sin } else { sin };
        let a = row[2 * k];
        let b = row[2 * k + 1];
        row[2 * k] = a * cos - b * sin;
        row[2 * k + 1] = a * sin + b * cos;
    }
}

pub const LOG2_E: f64 = std::f64::consts::LOG2_E;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_close, randn_tensor};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_small() {
        let a = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::matrix(3, 2, vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
        let bt = b.transpose();
        let c2 = a.matmul_transb(&bt);
        assert_eq!(c.data(), c2.data());
    }

    #[test]
    fn softmax_zero_logits_causal_is_uniform_prefix() {
        let s = Tensor::zeros(&[3, 3]);
        let (p, m, omega) = safe_softmax_rows(&s, true).unwrap();
        assert_eq!(p.row(0), &[1.0, 0.0, 0.0]);
        assert_close(p.at(2, 0), 1.0 / 3.0, 1e-15);
        assert_close(p.at(2, 1), 1.0 / 3.0, 1e-15);
        assert_close(p.at(2, 2), 1.0 / 3.0, 1e-15);
        assert_eq!(m, vec![0.0, 0.0, 0.0]);
        assert_close(omega[2], 3.0, 1e-15);
    }

    #[test]
    fn softmax_single_token() {
        let s = Tensor::zeros(&[1, 1]);
        let (p, m, omega) = safe_softmax_rows(&s, true).unwrap();
        assert_eq!(p.data(), &[1.0]);
        assert_eq!(m, vec![0.0]);
        assert_eq!(omega, vec![1.0]);
    }

    #[test]
    fn softmax_matches_unshifted_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = randn_tensor(&mut rng, &[5, 5], 1.0);
        let (p, _, _) = safe_softmax_rows(&s, true).unwrap();
        for i in 0..5 {
            // naive unshifted oracle
            let raw: Vec<f64> = (0..=i).map(|j| s.at(i, j).exp()).collect();
            let z: f64 = raw.iter().sum();
            let mut row_sum = 0.0;
            for j in 0..=i {
                assert_close(p.at(i, j), raw[j] / z, 1e-14);
                row_sum += p.at(i, j);
            }
            assert_close(row_sum, 1.0, 1e-14);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let s = Tensor::matrix(1, 2, vec![f64::NAN, 0.0]).unwrap();
        assert!(safe_softmax_rows(&s, false).is_err());
    }

    #[test]
    fn rmsnorm_unit_rms() {
        let y = rmsnorm(&[1., 1., 1., 1.], &[1., 1., 1., 1.], 0.0);
        for v in y {
            assert_close(v, 1.0, 1e-15);
        }
    }

    #[test]
    fn rmsnorm_zero_input_guarded() {
        let y = rmsnorm(&[0., 0., 0.], &[1., 1., 1.], 1e-6);
        assert_eq!(y, vec![0., 0., 0.]);
    }

    #[test]
    fn rmsnorm_scaled_norm_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 16;
        let x: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let gamma = vec![1.0; d];
        let y = rmsnorm(&x, &gamma, 1e-6);
        // ||y/gamma||^2 = d up to the eps perturbation
        let n2: f64 = y.iter().map(|v| v * v).sum();
        assert!((n2 - d as f64).abs() / (d as f64) < 1e-4);
    }

    #[test]
    fn rope_position_zero_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn_tensor(&mut rng, &[3, 8], 1.0);
        let y = rope_apply(&x, 1e6).unwrap();
        assert_eq!(y.row(0), x.row(0));
    }

    #[test]
    fn rope_preserves_row_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn_tensor(&mut rng, &[7, 6], 1.0);
        let y = rope_apply(&x, 10_000.0).unwrap();
        for i in 0..7 {
            assert_close(norm2(y.row(i)), norm2(x.row(i)), 1e-12);
        }
    }

    #[test]
    fn rope_quarter_turn() {
        // d=4, pair k=1 rotates at theta^(-1/2); choose theta so that the
        // angle at position 1 is exactly pi/2.
        let theta = (2.0 / std::f64::consts::PI).powi(2);
        let x = Tensor::matrix(2, 4, vec![0., 0., 0., 0., 0., 0., 1., 0.]).unwrap();
        let y = rope_apply(&x, theta).unwrap();
        assert_close(y.at(1, 2), 0.0, 1e-12);
        assert_close(y.at(1, 3), 1.0, 1e-12);
    }

    #[test]
    fn rope_rejects_odd_dim() {
        let x = Tensor::zeros(&[2, 3]);
        assert!(rope_apply(&x, 1e6).is_err());
    }
}
