//! Posterior predictive fields.
//!
//! For a new snapshot with input vector `x*`,
//!
//! ```text
//! mean(p)  = beta . mean(X*) + k*' (K + sigma2 I)^{-1} Y(p)
//! latent   = K(x*, x*) - k*' (K + sigma2 I)^{-1} k*
//! ```
//!
//! The latent variance is the same at every location because the prior is
//! shared across locations; the per-point predictive variance adds the noise
//! `sigma2`.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::gridstore::{EnsembleSnapshot, GridField, TimeCode};
use crate::nngp::kernel_cross;
use crate::util::normal_quantile;

use super::{FitState, GprError};

/// Predicted mean field with its (location-constant) latent variance.
#[derive(Debug, Clone)]
pub struct PosteriorPrediction {
    pub time: TimeCode,
    pub mean_field: GridField,
    /// Posterior variance of the latent function; identical at every point.
    pub latent_var: f64,
    pub noise_var: f64,
}

impl PosteriorPrediction {
    pub fn predictive_var(&self) -> f64 {
        self.latent_var + self.noise_var
    }

    pub fn predictive_std(&self) -> f64 {
        self.predictive_var().sqrt()
    }

    /// Central interval at the given coverage level, e.g. 0.95: per-point
    /// bounds `mean(p) +/- z * predictive_std`.
    pub fn interval(&self, level: f64) -> (GridField, GridField) {
        assert!(level > 0.0 && level < 1.0, "level must be in (0, 1)");
        let z = normal_quantile((1.0 + level) / 2.0);
        let half = z * self.predictive_std();
        let mut lo = self.mean_field.clone();
        let mut hi = self.mean_field.clone();
        for (l, h) in lo.values.iter_mut().zip(hi.values.iter_mut()) {
            *l -= half;
            *h += half;
        }
        (lo, hi)
    }
}

/// Posterior prediction for one snapshot, which must have been vectorized
/// with the fit's standardizers and member order.
pub fn predict(fit: &FitState, snapshot: &EnsembleSnapshot) -> Result<PosteriorPrediction, GprError> {
    let dims = snapshot.member_dims();
    if dims != fit.member_dims {
        return Err(GprError::Mismatch(format!(
            "member grids {dims:?} do not match the fit's {:?}",
            fit.member_dims
        )));
    }
    if snapshot.d_in() != fit.d_in() {
        return Err(GprError::Mismatch(format!(
            "input length {} does not match the fit's d_in {}",
            snapshot.d_in(),
            fit.d_in()
        )));
    }
    if snapshot.member_means.len() != fit.trend.n_members() {
        return Err(GprError::Mismatch("member count differs from trend".into()));
    }

    let (k_star, k_xx) = kernel_cross(&snapshot.x_vec, &fit.x_vecs, &fit.params.kernel)?;
    let k_star = DVector::from_vec(k_star);
    let l = &fit.chol_lower;
    let half = l
        .solve_lower_triangular(&k_star)
        .ok_or(GprError::Conditioning { jitter: fit.jitter })?;
    let alpha = l
        .tr_solve_lower_triangular(&half)
        .ok_or(GprError::Conditioning { jitter: fit.jitter })?;

    let trend_value = fit.trend.mean(&snapshot.member_means);
    let mean_vec = fit.residuals.tr_mul(&alpha);
    let values: Vec<f64> = mean_vec.iter().map(|v| v + trend_value).collect();
    let mean_field =
        GridField::new(fit.target_spec.clone(), values, fit.units.clone(), fit.variable.clone())?;

    let latent_var = (k_xx - k_star.dot(&alpha)).max(0.0);
    Ok(PosteriorPrediction {
        time: snapshot.time,
        mean_field,
        latent_var,
        noise_var: fit.params.noise_var,
    })
}

/// Elementwise [`predict`] over a batch; order preserved, parallel over
/// snapshots with results identical to the sequential map.
pub fn predict_series(
    fit: &FitState,
    snapshots: &[EnsembleSnapshot],
) -> Result<Vec<PosteriorPrediction>, GprError> {
    snapshots.par_iter().map(|s| predict(fit, s)).collect()
}
