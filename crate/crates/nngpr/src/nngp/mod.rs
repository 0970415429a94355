//! Covariance of an untrained, infinitely wide, fully connected ReLU network.
//!
//! The covariance between two inputs is built layer by layer: a scaled dot
//! product at the input layer, then a closed-form ReLU moment per hidden
//! layer. Given weight variance `sigma_w2 / N_l` and bias variance
//! `sigma_b2`,
//!
//! ```text
//! K^0(x, y) = sigma_b2 + sigma_w2 * <x, y> / d_in
//! K^l(x, y) = sigma_b2 + sigma_w2 * F(K^{l-1}(x,x), K^{l-1}(x,y), K^{l-1}(y,y))
//! ```
//!
//! where, for ReLU activations,
//!
//! ```text
//! F(ktt, kts, kss) = sqrt(ktt * kss) / (2 pi) * (sin t + (pi - t) cos t),
//! t = arccos(kts / sqrt(ktt * kss)).
//! ```
//!
//! This is the arc-cosine form with `F(k, k, k) = k / 2`, the only sign
//! arrangement that keeps the diagonal positive; the Monte Carlo estimator in
//! [`mc_kernel_estimate`] checks it against finite-width networks.

mod mc;

pub use mc::{mc_kernel_estimate, McEstimate, NetworkSample};

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("input length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("nonpositive variance input {0} to the ReLU moment")]
    NonPositiveVariance(f64),
    #[error("cosine {0} outside [-1, 1] beyond tolerance")]
    CosineOutOfRange(f64),
    #[error("invalid kernel parameters: {0}")]
    InvalidParams(String),
    #[error("empty input set")]
    EmptyInput,
}

/// Prior variances and depth of the underlying network.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KernelParams {
    /// Weight-prior variance, scaled by layer width inside the network.
    pub sigma_w2: f64,
    /// Bias-prior variance.
    pub sigma_b2: f64,
    /// Layer count L.
    pub depth: u32,
}

impl KernelParams {
    pub const MAX_DEPTH: u32 = 64;

    pub fn new(sigma_w2: f64, sigma_b2: f64, depth: u32) -> Result<Self, KernelError> {
        if !(sigma_w2 > 0.0) || !sigma_w2.is_finite() {
            return Err(KernelError::InvalidParams(format!("sigma_w2 {sigma_w2} must be > 0")));
        }
        if !(sigma_b2 >= 0.0) || !sigma_b2.is_finite() {
            return Err(KernelError::InvalidParams(format!("sigma_b2 {sigma_b2} must be >= 0")));
        }
        if depth < 1 || depth > Self::MAX_DEPTH {
            return Err(KernelError::InvalidParams(format!(
                "depth {depth} outside 1..={}",
                Self::MAX_DEPTH
            )));
        }
        Ok(Self { sigma_w2, sigma_b2, depth })
    }
}

impl Default for KernelParams {
    /// Depth 10; prior variances match the fitting defaults.
    fn default() -> Self {
        Self { sigma_w2: 1.6, sigma_b2: 0.1, depth: 10 }
    }
}

fn check_len(x: &[f64], y: &[f64], d_in: usize) -> Result<(), KernelError> {
    if x.len() != d_in {
        return Err(KernelError::LengthMismatch { expected: d_in, got: x.len() });
    }
    if y.len() != d_in {
        return Err(KernelError::LengthMismatch { expected: d_in, got: y.len() });
    }
    Ok(())
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Input-layer covariance `sigma_b2 + sigma_w2 * <x, y> / d_in`.
pub fn k0(x: &[f64], y: &[f64], params: &KernelParams, d_in: usize) -> Result<f64, KernelError> {
    check_len(x, y, d_in)?;
    Ok(params.sigma_b2 + params.sigma_w2 * dot(x, y) / d_in as f64)
}

const COS_SLACK: f64 = 1e-12;

/// ReLU layer moment `E[relu(Z_t) relu(Z_s)]` for jointly Gaussian
/// pre-activations with variances `k_tt`, `k_ss` and covariance `k_ts`.
///
/// The arccos argument is clamped to [-1, 1]; values beyond 1e-12 outside
/// that interval are rejected.
pub fn relu_f(k_tt: f64, k_ts: f64, k_ss: f64) -> Result<f64, KernelError> {
    if !(k_tt > 0.0) {
        return Err(KernelError::NonPositiveVariance(k_tt));
    }
    if !(k_ss > 0.0) {
        return Err(KernelError::NonPositiveVariance(k_ss));
    }
    let scale = (k_tt * k_ss).sqrt();
    let c = k_ts / scale;
    if c.abs() > 1.0 + COS_SLACK {
        return Err(KernelError::CosineOutOfRange(c));
    }
    let c = c.clamp(-1.0, 1.0);
    Ok(relu_f_clamped(scale, c))
}

/// Core of [`relu_f`] once the correlation is known to be in [-1, 1].
/// `sin(theta)` is evaluated as `sqrt(1 - c^2)`.
#[inline]
fn relu_f_clamped(scale: f64, c: f64) -> f64 {
    let sin_t = (1.0 - c * c).max(0.0).sqrt();
    let theta = c.acos();
    scale / (2.0 * std::f64::consts::PI) * (sin_t + (std::f64::consts::PI - theta) * c)
}

/// One diagonal recursion step: `K^l(x,x) = sigma_b2 + sigma_w2 * K^{l-1}(x,x) / 2`.
#[inline]
fn diag_step(params: &KernelParams, k: f64) -> f64 {
    params.sigma_b2 + params.sigma_w2 * (k / 2.0)
}

/// Depth-L covariance for a pair of inputs.
///
/// Tracks the (x,x), (x,y), (y,y) recursions jointly; exact bitwise symmetry
/// in (x, y) follows from the symmetric update rule.
pub fn kernel_value(
    x: &[f64],
    y: &[f64],
    params: &KernelParams,
    d_in: usize,
) -> Result<f64, KernelError> {
    check_len(x, y, d_in)?;
    let mut kxx = k0(x, x, params, d_in)?;
    let mut kxy = k0(x, y, params, d_in)?;
    let mut kyy = k0(y, y, params, d_in)?;
    for _ in 0..params.depth {
        let next_xy = params.sigma_b2 + params.sigma_w2 * relu_f(kxx, kxy, kyy)?;
        kxx = diag_step(params, kxx);
        kyy = diag_step(params, kyy);
        kxy = next_xy;
    }
    Ok(kxy)
}

/// Depth-L variance of a single input (the diagonal recursion alone).
pub fn kernel_diag(x: &[f64], params: &KernelParams, d_in: usize) -> Result<f64, KernelError> {
    check_len(x, x, d_in)?;
    let mut k = k0(x, x, params, d_in)?;
    for _ in 0..params.depth {
        k = diag_step(params, k);
    }
    Ok(k)
}

/// Scaled input Gram matrix `G[i][j] = <x_i, x_j> / d_in`.
///
/// Kernel recursions only consume the inputs through this matrix, so callers
/// that evaluate many parameter settings on fixed inputs compute it once.
pub fn input_gram(xs: &[Vec<f64>]) -> Result<DMatrix<f64>, KernelError> {
    let n = xs.len();
    if n == 0 {
        return Err(KernelError::EmptyInput);
    }
    let d_in = xs[0].len();
    for x in xs {
        check_len(x, x, d_in)?;
    }
    let mut gram = DMatrix::zeros(n, n);
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (i..n).map(|j| dot(&xs[i], &xs[j]) / d_in as f64).collect())
        .collect();
    for (i, row) in rows.into_iter().enumerate() {
        for (offset, v) in row.into_iter().enumerate() {
            let j = i + offset;
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    Ok(gram)
}

/// Depth-L kernel matrix from a precomputed scaled Gram matrix.
///
/// Per layer, all diagonals advance by the closed-form diagonal step and
/// every off-diagonal applies the ReLU moment against the previous layer's
/// diagonals, so the recursion runs once per pair.
pub fn kernel_matrix_from_gram(
    gram: &DMatrix<f64>,
    params: &KernelParams,
) -> Result<DMatrix<f64>, KernelError> {
    let n = gram.nrows();
    let mut k = gram.map(|g| params.sigma_b2 + params.sigma_w2 * g);
    let mut diag: Vec<f64> = (0..n).map(|i| k[(i, i)]).collect();
    for _ in 0..params.depth {
        let rows: Vec<Result<Vec<f64>, KernelError>> = (0..n)
            .into_par_iter()
            .map(|i| {
                ((i + 1)..n)
                    .map(|j| {
                        Ok(params.sigma_b2 + params.sigma_w2 * relu_f(diag[i], k[(i, j)], diag[j])?)
                    })
                    .collect()
            })
            .collect();
        for (i, row) in rows.into_iter().enumerate() {
            for (offset, v) in row?.into_iter().enumerate() {
                let j = i + 1 + offset;
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        for (i, d) in diag.iter_mut().enumerate() {
            *d = diag_step(params, *d);
            k[(i, i)] = *d;
        }
    }
    Ok(k)
}

/// Symmetric depth-L kernel matrix over a set of inputs.
pub fn kernel_matrix(xs: &[Vec<f64>], params: &KernelParams) -> Result<DMatrix<f64>, KernelError> {
    kernel_matrix_from_gram(&input_gram(xs)?, params)
}

/// Cross covariances of one test input against a set of training inputs.
///
/// Returns `(k_star, k_xx)` where `k_star[t] = K(x, xs[t])` and
/// `k_xx = K(x, x)`.
pub fn kernel_cross(
    x: &[f64],
    xs: &[Vec<f64>],
    params: &KernelParams,
) -> Result<(Vec<f64>, f64), KernelError> {
    if xs.is_empty() {
        return Err(KernelError::EmptyInput);
    }
    let d_in = x.len();
    for t in xs {
        check_len(t, t, d_in)?;
    }
    let inv_d = 1.0 / d_in as f64;
    let mut kxx = params.sigma_b2 + params.sigma_w2 * dot(x, x) * inv_d;
    let mut diag: Vec<f64> = xs
        .iter()
        .map(|t| params.sigma_b2 + params.sigma_w2 * dot(t, t) * inv_d)
        .collect();
    let mut cross: Vec<f64> = xs
        .iter()
        .map(|t| params.sigma_b2 + params.sigma_w2 * dot(x, t) * inv_d)
        .collect();
    for _ in 0..params.depth {
        for t in 0..xs.len() {
            cross[t] = params.sigma_b2 + params.sigma_w2 * relu_f(kxx, cross[t], diag[t])?;
        }
        for d in diag.iter_mut() {
            *d = diag_step(params, *d);
        }
        kxx = diag_step(params, kxx);
    }
    Ok((cross, kxx))
}
