//! Hyperparameter fitting: Adam-style first-order descent on
//! `(ln sigma_w2, ln sigma_b2, ln sigma2)` with central finite-difference
//! gradients. Log-space keeps all three parameters positive without
//! constraints. Candidate steps that would increase the loss are rejected
//! and the step scale halved, so the recorded loss trace is nonincreasing
//! and a start at an optimum stays put.

use crate::gridstore::TrainingSet;
use crate::nngp::KernelParams;

use super::likelihood::LossContext;
use super::{fit_trend_opts, FitState, GprError, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSettings {
    /// Adam base step in log-parameter space.
    pub step: f64,
    pub max_iters: usize,
    /// Convergence: `|delta loss| < rel_tol * (1 + |loss|)` for `patience`
    /// consecutive iterations.
    pub rel_tol: f64,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Central finite-difference step per log coordinate.
    pub fd_step: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            step: 0.02,
            max_iters: 500,
            rel_tol: 1e-6,
            patience: 10,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            fd_step: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub optimizer: OptimizerSettings,
    pub trend_intercept: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { optimizer: OptimizerSettings::default(), trend_intercept: false }
    }
}

/// One row of the optimizer trace. `loss` is the accepted loss after the
/// iteration; rejected steps leave it unchanged.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct IterRecord {
    pub iter: usize,
    pub loss: f64,
    pub sigma_w2: f64,
    pub sigma_b2: f64,
    pub sigma2: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub state: FitState,
    pub trace: Vec<IterRecord>,
    /// True when the convergence window closed before `max_iters`.
    pub converged: bool,
}

/// Default initialization: `sigma_w2 = 1.6`, `sigma_b2 = 0.1`, and
/// `sigma2 = 0.1 * var(residual targets)` after removing the given trend.
pub fn initial_params(
    training: &TrainingSet,
    trend_intercept: bool,
    depth: u32,
) -> Result<ModelParams, GprError> {
    let trend = fit_trend_opts(training, trend_intercept)?;
    let r = super::residual_matrix(training, &trend)?;
    let count = (r.nrows() * r.ncols()) as f64;
    let mean: f64 = r.iter().sum::<f64>() / count;
    let var: f64 = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
    let noise = (0.1 * var).max(1e-8);
    ModelParams::new(KernelParams::new(1.6, 0.1, depth)?, noise)
}

/// Maximum-likelihood fit of `(sigma_w2, sigma_b2, sigma2)` from `init`.
///
/// The trend is fitted first and treated as fixed while the covariance
/// parameters are optimized. Deterministic: two runs on the same inputs
/// produce bitwise-identical traces and states.
pub fn fit(
    training: &TrainingSet,
    init: ModelParams,
    opts: &FitOptions,
) -> Result<FitOutput, GprError> {
    if training.n() < 2 {
        return Err(GprError::TooFewSamples { n: training.n(), need: 2 });
    }
    let o = &opts.optimizer;
    let trend = fit_trend_opts(training, opts.trend_intercept)?;
    let depth = init.kernel.depth;
    let ctx = LossContext::new(training, &trend, depth)?;

    let mut u = [init.kernel.sigma_w2.ln(), init.kernel.sigma_b2.max(1e-12).ln(), init.noise_var.ln()];
    let mut kernel = ctx.kernel(u[0].exp(), u[1].exp())?;
    let mut loss_cur = ctx.loss_with_kernel(&kernel, u[2].exp())?;
    if !loss_cur.is_finite() {
        return Err(GprError::Diverged { iteration: 0, loss: loss_cur });
    }

    let mut trace = Vec::with_capacity(o.max_iters + 1);
    let record = |trace: &mut Vec<IterRecord>, iter, loss, u: [f64; 3], accepted| {
        trace.push(IterRecord {
            iter,
            loss,
            sigma_w2: u[0].exp(),
            sigma_b2: u[1].exp(),
            sigma2: u[2].exp(),
            accepted,
        });
    };
    record(&mut trace, 0, loss_cur, u, true);

    let mut m = [0.0f64; 3];
    let mut v = [0.0f64; 3];
    let mut step_mult = 1.0f64;
    let mut streak = 0usize;
    let mut converged = false;

    for iter in 1..=o.max_iters {
        let g = ctx.gradient(u, o.fd_step, &kernel)?;
        let mut u_cand = u;
        for i in 0..3 {
            m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g[i];
            v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g[i] * g[i];
            let m_hat = m[i] / (1.0 - o.beta1.powi(iter as i32));
            let v_hat = v[i] / (1.0 - o.beta2.powi(iter as i32));
            u_cand[i] -= o.step * step_mult * m_hat / (v_hat.sqrt() + o.epsilon);
        }
        let kernel_cand = ctx.kernel(u_cand[0].exp(), u_cand[1].exp())?;
        let loss_cand = ctx.loss_with_kernel(&kernel_cand, u_cand[2].exp())?;
        if !loss_cand.is_finite() {
            return Err(GprError::Diverged { iteration: iter, loss: loss_cand });
        }

        let delta = if loss_cand <= loss_cur {
            let delta = loss_cur - loss_cand;
            u = u_cand;
            kernel = kernel_cand;
            loss_cur = loss_cand;
            step_mult = (step_mult * 1.25).min(1.0);
            record(&mut trace, iter, loss_cur, u, true);
            delta
        } else {
            step_mult = (step_mult * 0.5).max(1e-4);
            record(&mut trace, iter, loss_cur, u, false);
            0.0
        };

        if delta < o.rel_tol * (1.0 + loss_cur.abs()) {
            streak += 1;
            if streak >= o.patience {
                converged = true;
                break;
            }
        } else {
            streak = 0;
        }
    }

    let params = ModelParams::new(
        KernelParams::new(u[0].exp(), u[1].exp(), depth)?,
        u[2].exp(),
    )?;
    let state = FitState::assemble_parts(
        training,
        params,
        trend,
        &ctx.gram,
        Some(ctx.residuals.clone()),
    )?;
    Ok(FitOutput { state, trace, converged })
}
