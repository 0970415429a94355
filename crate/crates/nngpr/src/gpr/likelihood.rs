//! Kronecker-factored negative log-likelihood.
//!
//! With locations sharing one covariance, the joint covariance over all
//! `n * d` training values is `(K + sigma2 I_n) (x) I_d`, so up to constants
//! the negative log-likelihood reduces to
//!
//! ```text
//! L = sum_p Y_p' (K + sigma2 I_n)^{-1} Y_p + d log|K + sigma2 I_n|
//! ```
//!
//! with `Y_p` the trend-removed time vector at location `p`. One `n x n`
//! Cholesky factorization per evaluation; no `nd x nd` matrix is ever formed.
//! The quadratic term is `tr(A^{-1} R R')`, evaluated as `||L^{-1} G||_F^2`
//! where `G G' = R R'` comes from a symmetric eigendecomposition computed
//! once per training set.

use nalgebra::DMatrix;

use crate::gridstore::TrainingSet;
use crate::nngp::{input_gram, kernel_matrix_from_gram, KernelParams};

use super::{
    cholesky_with_jitter, residual_matrix, GprError, ModelParams, TrendModel,
};

/// Precomputed, parameter-independent pieces of the loss: the scaled input
/// Gram matrix and a square factor of `R R'`.
pub(crate) struct LossContext {
    pub gram: DMatrix<f64>,
    pub res_factor: DMatrix<f64>,
    pub residuals: DMatrix<f64>,
    pub d: usize,
    pub depth: u32,
}

impl LossContext {
    pub fn new(
        training: &TrainingSet,
        trend: &TrendModel,
        depth: u32,
    ) -> Result<Self, GprError> {
        let n = training.n();
        if n < 1 {
            return Err(GprError::TooFewSamples { n, need: 1 });
        }
        let x_vecs: Vec<Vec<f64>> = training.snapshots.iter().map(|s| s.x_vec.clone()).collect();
        let gram = input_gram(&x_vecs)?;
        let residuals = residual_matrix(training, trend)?;
        let s = &residuals * residuals.transpose();
        let eig = nalgebra::SymmetricEigen::new(s);
        let mut res_factor = eig.eigenvectors;
        for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
            let scale = lambda.max(0.0).sqrt();
            for i in 0..n {
                res_factor[(i, j)] *= scale;
            }
        }
        Ok(Self { gram, res_factor, residuals, d: training.d(), depth })
    }

    pub fn kernel(&self, sigma_w2: f64, sigma_b2: f64) -> Result<DMatrix<f64>, GprError> {
        let params = KernelParams::new(sigma_w2, sigma_b2, self.depth)?;
        Ok(kernel_matrix_from_gram(&self.gram, &params)?)
    }

    /// Loss given a prebuilt kernel matrix (reused across noise values).
    pub fn loss_with_kernel(&self, kernel: &DMatrix<f64>, noise_var: f64) -> Result<f64, GprError> {
        let n = kernel.nrows();
        let mut a = kernel.clone();
        for i in 0..n {
            a[(i, i)] += noise_var;
        }
        let (l, _jitter) = cholesky_with_jitter(&a)?;
        let logdet: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let z = l
            .solve_lower_triangular(&self.res_factor)
            .ok_or(GprError::Conditioning { jitter: 0.0 })?;
        let quad: f64 = z.iter().map(|v| v * v).sum();
        Ok(quad + self.d as f64 * logdet)
    }

    pub fn loss_at(&self, sigma_w2: f64, sigma_b2: f64, noise_var: f64) -> Result<f64, GprError> {
        let k = self.kernel(sigma_w2, sigma_b2)?;
        self.loss_with_kernel(&k, noise_var)
    }

    /// Central finite-difference gradient over (ln sigma_w2, ln sigma_b2,
    /// ln sigma2), reusing `kernel_center` for the noise coordinate whose
    /// perturbations leave the kernel unchanged.
    pub fn gradient(
        &self,
        log_params: [f64; 3],
        h: f64,
        kernel_center: &DMatrix<f64>,
    ) -> Result<[f64; 3], GprError> {
        let [lw, lb, ls] = log_params;
        let (w, b, s2) = (lw.exp(), lb.exp(), ls.exp());
        let g_w = (self.loss_at((lw + h).exp(), b, s2)? - self.loss_at((lw - h).exp(), b, s2)?)
            / (2.0 * h);
        let g_b = (self.loss_at(w, (lb + h).exp(), s2)? - self.loss_at(w, (lb - h).exp(), s2)?)
            / (2.0 * h);
        let g_s = (self.loss_with_kernel(kernel_center, (ls + h).exp())?
            - self.loss_with_kernel(kernel_center, (ls - h).exp())?)
            / (2.0 * h);
        Ok([g_w, g_b, g_s])
    }
}

/// Kronecker-factored loss at the given parameters.
pub fn loss(
    training: &TrainingSet,
    params: &ModelParams,
    trend: &TrendModel,
) -> Result<f64, GprError> {
    let ctx = LossContext::new(training, trend, params.kernel.depth)?;
    ctx.loss_at(params.kernel.sigma_w2, params.kernel.sigma_b2, params.noise_var)
}

/// Central finite-difference gradient of [`loss`] over
/// `(ln sigma_w2, ln sigma_b2, ln sigma2)`, step 1e-4 per coordinate.
pub fn loss_gradient(
    training: &TrainingSet,
    params: &ModelParams,
    trend: &TrendModel,
) -> Result<[f64; 3], GprError> {
    loss_gradient_with_step(training, params, trend, 1e-4)
}

/// [`loss_gradient`] with an explicit finite-difference step, for Richardson
/// self-consistency checks.
pub fn loss_gradient_with_step(
    training: &TrainingSet,
    params: &ModelParams,
    trend: &TrendModel,
    h: f64,
) -> Result<[f64; 3], GprError> {
    let ctx = LossContext::new(training, trend, params.kernel.depth)?;
    let log_params = [
        params.kernel.sigma_w2.ln(),
        params.kernel.sigma_b2.ln(),
        params.noise_var.ln(),
    ];
    let kernel = ctx.kernel(params.kernel.sigma_w2, params.kernel.sigma_b2)?;
    ctx.gradient(log_params, h, &kernel)
}
