//! The NN-GPR model: a linear trend on ensemble spatial means plus a
//! zero-mean Gaussian process over ensemble input vectors, sharing one
//! covariance across all target locations.
//!
//! For target value `Y_t(p)` at time `t` and location `p`,
//!
//! ```text
//! Y_t(p) = beta . mean(X_t) + f(X_t, p) + eps,
//! f ~ GP(0, K(X_t, X_s)),   eps ~ N(0, sigma2),
//! ```
//!
//! with `K` the network covariance from [`crate::nngp`]. Because every
//! location shares the prior, the joint covariance over all `n * d`
//! observations factors as `(K + sigma2 I_n) (x) I_d`, and the likelihood
//! collapses to `n x n` solves ([`loss`]). Hyperparameters are fitted by
//! first-order descent in log-parameter space ([`fit`]); predictions come
//! from the standard conditional Gaussian ([`predict`]).

mod likelihood;
mod optimizer;
mod predict;
mod serialize;

pub use likelihood::{loss, loss_gradient, loss_gradient_with_step};
pub use optimizer::{fit, initial_params, FitOptions, FitOutput, IterRecord, OptimizerSettings};
pub use predict::{predict, predict_series, PosteriorPrediction};
pub use serialize::{load_fit_state, save_fit_state};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::gridstore::{
    latitude_weights, GridError, GridSpec, Standardizer, TimeCode, TrainingSet,
};
use crate::nngp::{input_gram, kernel_matrix_from_gram, KernelError, KernelParams};
use crate::util::pairwise_sum;

#[derive(Debug, Error)]
pub enum GprError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("singular trend fit: {0}; consider the ridge fallback flag")]
    SingularFit(String),
    #[error("covariance not positive definite after jitter escalation (final jitter {jitter:e})")]
    Conditioning { jitter: f64 },
    #[error("optimization diverged at iteration {iteration} (loss {loss})")]
    Diverged { iteration: usize, loss: f64 },
    #[error("too few samples: n = {n}, need at least {need}")]
    TooFewSamples { n: usize, need: usize },
    #[error("prediction input mismatch: {0}")]
    Mismatch(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("fit state serialization: {0}")]
    Serialization(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Kernel hyperparameters plus observation noise.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelParams {
    pub kernel: KernelParams,
    pub noise_var: f64,
}

impl ModelParams {
    pub fn new(kernel: KernelParams, noise_var: f64) -> Result<Self, GprError> {
        if !(noise_var > 0.0) || !noise_var.is_finite() {
            return Err(GprError::InvalidParams(format!("noise_var {noise_var} must be > 0")));
        }
        Ok(Self { kernel, noise_var })
    }
}

/// Linear trend on the per-member spatial means. Coefficients are ordered by
/// member; when an intercept is enabled it is stored last.
#[derive(Debug, Clone, PartialEq)]
pub struct TrendModel {
    beta: Vec<f64>,
    intercept: bool,
}

impl TrendModel {
    pub fn new(beta: Vec<f64>, intercept: bool) -> Self {
        Self { beta, intercept }
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.beta
    }

    pub fn has_intercept(&self) -> bool {
        self.intercept
    }

    pub fn n_members(&self) -> usize {
        self.beta.len() - usize::from(self.intercept)
    }

    /// Trend value `beta . member_means` (plus intercept when enabled).
    pub fn mean(&self, member_means: &[f64]) -> f64 {
        let m = self.n_members();
        assert_eq!(member_means.len(), m, "member mean count mismatch");
        let mut acc = if self.intercept { self.beta[m] } else { 0.0 };
        for (b, x) in self.beta[..m].iter().zip(member_means) {
            acc += b * x;
        }
        acc
    }
}

/// Latitude-weighted spatial means of the target frames.
pub(crate) fn target_means(training: &TrainingSet) -> Result<Vec<f64>, GprError> {
    let w = latitude_weights(&training.targets.spec)?;
    let d = training.d() as f64;
    Ok(training
        .targets
        .frames
        .iter()
        .map(|f| {
            let prods: Vec<f64> = f.iter().zip(&w).map(|(v, wi)| v * wi).collect();
            pairwise_sum(&prods) / d
        })
        .collect())
}

/// Ordinary least squares of the target spatial means on the member spatial
/// means, without intercept.
pub fn fit_trend(training: &TrainingSet) -> Result<TrendModel, GprError> {
    fit_trend_opts(training, false)
}

/// OLS trend with optional intercept. Rank deficiency of the design is a
/// [`GprError::SingularFit`].
pub fn fit_trend_opts(training: &TrainingSet, intercept: bool) -> Result<TrendModel, GprError> {
    let n = training.n();
    let m = training.n_members();
    let cols = m + usize::from(intercept);
    if n < cols.max(2) {
        return Err(GprError::TooFewSamples { n, need: cols.max(2) });
    }
    let mut design = DMatrix::zeros(n, cols);
    for (t, snap) in training.snapshots.iter().enumerate() {
        for (i, &xm) in snap.member_means.iter().enumerate() {
            design[(t, i)] = xm;
        }
        if intercept {
            design[(t, m)] = 1.0;
        }
    }
    let y = DVector::from_vec(target_means(training)?);

    let svd = design.clone().svd(true, true);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let rank = svd.singular_values.iter().filter(|&&s| s > 1e-10 * max_sv).count();
    if rank < cols || max_sv == 0.0 {
        return Err(GprError::SingularFit(format!("design rank {rank} < {cols} columns")));
    }
    let beta = svd
        .solve(&y, 1e-10 * max_sv)
        .map_err(|e| GprError::SingularFit(e.to_string()))?;
    Ok(TrendModel { beta: beta.iter().copied().collect(), intercept })
}

/// Trend-removed targets as an `n x d` matrix: row `t` is
/// `Y_t - beta . mean(X_t)`, the same scalar subtracted at every location.
pub(crate) fn residual_matrix(
    training: &TrainingSet,
    trend: &TrendModel,
) -> Result<DMatrix<f64>, GprError> {
    let n = training.n();
    let d = training.d();
    let mut r = DMatrix::zeros(n, d);
    for (t, snap) in training.snapshots.iter().enumerate() {
        let tv = trend.mean(&snap.member_means);
        for (p, &y) in training.targets.frames[t].iter().enumerate() {
            r[(t, p)] = y - tv;
        }
    }
    Ok(r)
}

/// Cholesky with escalating diagonal jitter: starts at `1e-10 * trace / n`,
/// escalates tenfold up to `1e-4 * trace / n`, then errors. Returns the lower
/// factor and the jitter that was finally added (0 when none was needed).
pub(crate) fn cholesky_with_jitter(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64), GprError> {
    if let Some(c) = a.clone().cholesky() {
        return Ok((c.unpack(), 0.0));
    }
    let n = a.nrows();
    let unit = a.trace().abs().max(f64::MIN_POSITIVE) / n as f64;
    let mut jitter = 1e-10 * unit;
    let cap = 1e-4 * unit;
    while jitter <= cap * (1.0 + 1e-12) {
        let mut aj = a.clone();
        for i in 0..n {
            aj[(i, i)] += jitter;
        }
        if let Some(c) = aj.cholesky() {
            return Ok((c.unpack(), jitter));
        }
        jitter *= 10.0;
    }
    Err(GprError::Conditioning { jitter: jitter / 10.0 })
}

/// Everything needed to predict from a fitted model: hyperparameters, trend,
/// the Cholesky factor of `K + sigma2 I_n`, the trend-removed targets, the
/// training inputs, and the standardizers that built them.
#[derive(Debug, Clone)]
pub struct FitState {
    pub params: ModelParams,
    pub trend: TrendModel,
    pub standardizers: Vec<Standardizer>,
    pub member_names: Vec<String>,
    pub member_dims: Vec<usize>,
    pub target_spec: GridSpec,
    pub units: String,
    pub variable: String,
    pub times: Vec<TimeCode>,
    /// Jitter added to reach positive definiteness; 0 when none was needed.
    pub jitter: f64,
    pub(crate) x_vecs: Vec<Vec<f64>>,
    pub(crate) residuals: DMatrix<f64>,
    pub(crate) chol_lower: DMatrix<f64>,
}

impl FitState {
    /// Build a fit state at fixed parameters (no optimization): fits the
    /// trend, removes it, and factors `K + sigma2 I_n`.
    pub fn assemble(
        training: &TrainingSet,
        params: ModelParams,
        trend_intercept: bool,
    ) -> Result<Self, GprError> {
        let trend = fit_trend_opts(training, trend_intercept)?;
        Self::assemble_with_trend(training, params, trend)
    }

    /// As [`FitState::assemble`] but with an already fitted trend.
    pub fn assemble_with_trend(
        training: &TrainingSet,
        params: ModelParams,
        trend: TrendModel,
    ) -> Result<Self, GprError> {
        if training.n() < 2 {
            return Err(GprError::TooFewSamples { n: training.n(), need: 2 });
        }
        let x_vecs: Vec<Vec<f64>> = training.snapshots.iter().map(|s| s.x_vec.clone()).collect();
        let gram = input_gram(&x_vecs)?;
        Self::assemble_parts(training, params, trend, &gram, None)
    }

    /// Shared assembly path; the optimizer passes its cached gram and
    /// residuals to avoid recomputing them.
    pub(crate) fn assemble_parts(
        training: &TrainingSet,
        params: ModelParams,
        trend: TrendModel,
        gram: &DMatrix<f64>,
        residuals: Option<DMatrix<f64>>,
    ) -> Result<Self, GprError> {
        let residuals = match residuals {
            Some(r) => r,
            None => residual_matrix(training, &trend)?,
        };
        let k = kernel_matrix_from_gram(gram, &params.kernel)?;
        let n = k.nrows();
        let mut a = k;
        for i in 0..n {
            a[(i, i)] += params.noise_var;
        }
        let (chol_lower, jitter) = cholesky_with_jitter(&a)?;
        let x_vecs: Vec<Vec<f64>> = training.snapshots.iter().map(|s| s.x_vec.clone()).collect();
        let member_dims = training.snapshots[0].member_dims();
        Ok(FitState {
            params,
            trend,
            standardizers: training.standardizers.clone(),
            member_names: training.member_names.clone(),
            member_dims,
            target_spec: training.targets.spec.clone(),
            units: training.targets.units.clone(),
            variable: training.targets.variable.clone(),
            times: training.targets.times.clone(),
            jitter,
            x_vecs,
            residuals,
            chol_lower,
        })
    }

    pub fn n(&self) -> usize {
        self.x_vecs.len()
    }

    pub fn d(&self) -> usize {
        self.residuals.ncols()
    }

    pub fn d_in(&self) -> usize {
        self.x_vecs.first().map_or(0, Vec::len)
    }

    pub fn training_inputs(&self) -> &[Vec<f64>] {
        &self.x_vecs
    }

    pub fn residual_targets(&self) -> &DMatrix<f64> {
        &self.residuals
    }

    pub fn cholesky_lower(&self) -> &DMatrix<f64> {
        &self.chol_lower
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::gridstore::{vectorize_ensemble, EnsembleSnapshot, FieldSeries, GridField};
    use rand::Rng;

    /// Small synthetic training set: `m` members on tiny grids, targets on a
    /// `d_lon`-point equatorial grid, all values seeded.
    pub fn tiny_training_set(seed: u64, n: usize, m: usize, d_lon: usize) -> TrainingSet {
        let mut rng = crate::util::derive_rng(seed, &[841]);
        let member_spec =
            GridSpec::new(vec![-20.0, 20.0], vec![0.0, 90.0, 180.0, 270.0]).unwrap();
        let target_spec = GridSpec::new(
            vec![0.0],
            (0..d_lon).map(|i| i as f64 * 360.0 / d_lon as f64).collect(),
        )
        .unwrap();
        let times: Vec<TimeCode> = (0..n)
            .map(|i| TimeCode::new(2000 + (i / 12) as i32, (i % 12 + 1) as u8).unwrap())
            .collect();
        let standardizers = vec![Standardizer::identity(); m];
        let mut snapshots: Vec<EnsembleSnapshot> = Vec::new();
        let mut frames = Vec::new();
        for &t in &times {
            let fields: Vec<GridField> = (0..m)
                .map(|_| {
                    let vals: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    GridField::new(member_spec.clone(), vals, "K", "x").unwrap()
                })
                .collect();
            let snap = vectorize_ensemble(t, fields, &standardizers).unwrap();
            let base: f64 = snap.member_means.iter().sum::<f64>();
            let frame: Vec<f64> = (0..d_lon).map(|_| base + rng.gen_range(-0.5..0.5)).collect();
            frames.push(frame);
            snapshots.push(snap);
        }
        let targets = FieldSeries::new(target_spec, times, frames, "K", "y").unwrap();
        TrainingSet::new(
            snapshots,
            targets,
            standardizers,
            (0..m).map(|i| format!("m{i}")).collect(),
        )
        .unwrap()
    }
}
