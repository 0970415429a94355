//! Finite-width Monte Carlo oracle for the analytic kernel recursion.
//!
//! [`NetworkSample`] materializes the weights of one finite-width network and
//! is practical at small widths. [`mc_kernel_estimate`] instead propagates,
//! per sample, the joint pre-activations of the two inputs layer by layer:
//! conditional on a layer's activations, the next layer's pre-activation
//! pairs are i.i.d. bivariate Gaussians whose covariance is the empirical
//! second moment of the activations (weights enter the product only through
//! those moments). Sampling that bivariate Gaussian directly is therefore
//! distributed identically to materializing the weight matrices, at
//! O(width * depth) per sample instead of O(width^2 * depth). A unit test
//! cross-checks the two samplers.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::util::{derive_rng, pairwise_mean, pairwise_sum};

use super::{k0, KernelError, KernelParams};

/// One draw of a finite-width ReLU network with the kernel's prior variances.
#[derive(Debug, Clone)]
pub struct NetworkSample {
    width: usize,
    d_in: usize,
    /// Input layer, `depth - 1` hidden layers, output layer. Each entry is
    /// (row-major weights `width x fan_in`, biases `width`).
    layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl NetworkSample {
    /// Draw weights `W ~ N(0, sigma_w2 / fan_in)` and biases
    /// `b ~ N(0, sigma_b2)` for a depth-L network.
    pub fn draw(
        params: &KernelParams,
        d_in: usize,
        width: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(params.depth as usize + 1);
        let b_sd = params.sigma_b2.sqrt();
        for level in 0..=params.depth {
            let fan_in = if level == 0 { d_in } else { width };
            let w_sd = (params.sigma_w2 / fan_in as f64).sqrt();
            let weights: Vec<f64> =
                (0..width * fan_in).map(|_| w_sd * rng.sample::<f64, _>(StandardNormal)).collect();
            let biases: Vec<f64> =
                (0..width).map(|_| b_sd * rng.sample::<f64, _>(StandardNormal)).collect();
            layers.push((weights, biases));
        }
        Self { width, d_in, layers }
    }

    pub fn widths(&self) -> Vec<usize> {
        vec![self.width; self.layers.len()]
    }

    /// Final pre-activations `Z^L(x)`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, KernelError> {
        if x.len() != self.d_in {
            return Err(KernelError::LengthMismatch { expected: self.d_in, got: x.len() });
        }
        let mut act: Vec<f64> = x.to_vec();
        let last = self.layers.len() - 1;
        for (level, (weights, biases)) in self.layers.iter().enumerate() {
            let fan_in = act.len();
            let mut z = Vec::with_capacity(self.width);
            for i in 0..self.width {
                let row = &weights[i * fan_in..(i + 1) * fan_in];
                let s: f64 = row.iter().zip(&act).map(|(w, a)| w * a).sum();
                z.push(biases[i] + s);
            }
            if level == last {
                return Ok(z);
            }
            act = z.into_iter().map(|v| v.max(0.0)).collect();
        }
        unreachable!("network has at least the input layer")
    }

    /// `Z^L(x) . Z^L(y)` averaged over output units.
    pub fn output_product(&self, x: &[f64], y: &[f64]) -> Result<f64, KernelError> {
        let zx = self.forward(x)?;
        let zy = self.forward(y)?;
        let prods: Vec<f64> = zx.iter().zip(&zy).map(|(a, b)| a * b).collect();
        Ok(pairwise_sum(&prods) / self.width as f64)
    }
}

/// Monte Carlo kernel estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
    pub width: usize,
}

#[inline]
fn bivariate_relu_moments(
    rng: &mut impl Rng,
    width: usize,
    cxx: f64,
    cxy: f64,
    cyy: f64,
) -> (f64, f64, f64) {
    let sx = cxx.max(0.0).sqrt();
    let (slope, resid_sd) = if cxx > 0.0 {
        (cxy / cxx, (cyy - cxy * cxy / cxx).max(0.0).sqrt())
    } else {
        (0.0, cyy.max(0.0).sqrt())
    };
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for _ in 0..width {
        let u: f64 = rng.sample(StandardNormal);
        let v: f64 = rng.sample(StandardNormal);
        let zx = sx * u;
        let zy = slope * zx + resid_sd * v;
        let ax = zx.max(0.0);
        let ay = zy.max(0.0);
        sxx += ax * ax;
        sxy += ax * ay;
        syy += ay * ay;
    }
    let inv = 1.0 / width as f64;
    (sxx * inv, sxy * inv, syy * inv)
}

fn sample_product(
    rng: &mut impl Rng,
    params: &KernelParams,
    width: usize,
    k0xx: f64,
    k0xy: f64,
    k0yy: f64,
) -> f64 {
    let (mut cxx, mut cxy, mut cyy) = (k0xx, k0xy, k0yy);
    for _ in 0..params.depth {
        let (mxx, mxy, myy) = bivariate_relu_moments(rng, width, cxx, cxy, cyy);
        cxx = params.sigma_b2 + params.sigma_w2 * mxx;
        cxy = params.sigma_b2 + params.sigma_w2 * mxy;
        cyy = params.sigma_b2 + params.sigma_w2 * myy;
    }
    // output units: average of Z^L(x) * Z^L(y)
    let sx = cxx.max(0.0).sqrt();
    let (slope, resid_sd) = if cxx > 0.0 {
        (cxy / cxx, (cyy - cxy * cxy / cxx).max(0.0).sqrt())
    } else {
        (0.0, cyy.max(0.0).sqrt())
    };
    let mut acc = 0.0;
    for _ in 0..width {
        let u: f64 = rng.sample(StandardNormal);
        let v: f64 = rng.sample(StandardNormal);
        let zx = sx * u;
        let zy = slope * zx + resid_sd * v;
        acc += zx * zy;
    }
    acc / width as f64
}

/// Estimate the depth-L kernel by simulating finite-width networks.
///
/// Per sample, a fresh network is drawn and `Z^L(x) . Z^L(y)` is averaged
/// over the output units; the mean and standard error over samples are
/// returned. Each sample draws from an RNG stream derived from
/// `(seed, sample index)`, so parallel and serial runs agree bit-for-bit.
pub fn mc_kernel_estimate(
    x: &[f64],
    y: &[f64],
    params: &KernelParams,
    width: usize,
    samples: usize,
    seed: u64,
) -> Result<McEstimate, KernelError> {
    if width < 1 {
        return Err(KernelError::InvalidParams("width must be >= 1".into()));
    }
    if samples < 2 {
        return Err(KernelError::InvalidParams("samples must be >= 2".into()));
    }
    let d_in = x.len();
    let k0xx = k0(x, x, params, d_in)?;
    let k0xy = k0(x, y, params, d_in)?;
    let k0yy = k0(y, y, params, d_in)?;

    let products: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = derive_rng(seed, &[s as u64]);
            sample_product(&mut rng, params, width, k0xx, k0xy, k0yy)
        })
        .collect();

    let mean = pairwise_mean(&products);
    let sq: Vec<f64> = products.iter().map(|p| (p - mean) * (p - mean)).collect();
    let var = pairwise_sum(&sq) / (samples - 1) as f64;
    let std_error = (var / samples as f64).sqrt();
    Ok(McEstimate { mean, std_error, samples, width })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nngp::kernel_value;

    fn inputs(seed: u64, d_in: usize) -> (Vec<f64>, Vec<f64>) {
        let mut rng = derive_rng(seed, &[99]);
        let x = (0..d_in).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let y = (0..d_in).map(|_| rng.gen_range(-1.5..1.5)).collect();
        (x, y)
    }

    #[test]
    fn same_seed_gives_identical_estimates() {
        let p = KernelParams::new(1.5, 0.1, 2).unwrap();
        let (x, y) = inputs(1, 6);
        let a = mc_kernel_estimate(&x, &y, &p, 64, 200, 42).unwrap();
        let b = mc_kernel_estimate(&x, &y, &p, 64, 200, 42).unwrap();
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert_eq!(a.std_error.to_bits(), b.std_error.to_bits());
        let c = mc_kernel_estimate(&x, &y, &p, 64, 200, 43).unwrap();
        assert_ne!(a.mean.to_bits(), c.mean.to_bits());
    }

    #[test]
    fn depth_one_matches_analytic_within_three_se() {
        let p = KernelParams::new(1.5, 0.1, 1).unwrap();
        let (x, y) = inputs(2, 10);
        let analytic = kernel_value(&x, &y, &p, 10).unwrap();
        let est = mc_kernel_estimate(&x, &y, &p, 2048, 20000, 7).unwrap();
        let dev = (est.mean - analytic).abs();
        assert!(
            dev <= 3.0 * est.std_error,
            "deviation {dev} exceeds 3 SE {}",
            3.0 * est.std_error
        );
    }

    #[test]
    fn standard_error_shrinks_like_inverse_sqrt_samples() {
        let p = KernelParams::new(1.5, 0.1, 2).unwrap();
        let (x, y) = inputs(3, 8);
        let ratios: Vec<f64> = (0..4)
            .map(|s| {
                let small = mc_kernel_estimate(&x, &y, &p, 128, 2000, 100 + s).unwrap();
                let large = mc_kernel_estimate(&x, &y, &p, 128, 8000, 200 + s).unwrap();
                large.std_error / small.std_error
            })
            .collect();
        let mean_ratio = pairwise_mean(&ratios);
        assert!(
            (0.4..=0.6).contains(&mean_ratio),
            "SE ratio {mean_ratio} outside [0.4, 0.6]"
        );
    }

    #[test]
    fn explicit_network_sampler_agrees_with_moment_sampler() {
        let p = KernelParams::new(1.4, 0.2, 2).unwrap();
        let (x, y) = inputs(4, 5);
        let width = 32;
        let samples = 4000;

        let explicit: Vec<f64> = (0..samples)
            .map(|s| {
                let mut rng = derive_rng(77, &[s as u64]);
                NetworkSample::draw(&p, x.len(), width, &mut rng)
                    .output_product(&x, &y)
                    .unwrap()
            })
            .collect();
        let mean_e = pairwise_mean(&explicit);
        let sq: Vec<f64> = explicit.iter().map(|v| (v - mean_e) * (v - mean_e)).collect();
        let se_e = (pairwise_sum(&sq) / ((samples - 1) * samples) as f64).sqrt();

        let fast = mc_kernel_estimate(&x, &y, &p, width, samples, 78).unwrap();
        let combined = (se_e * se_e + fast.std_error * fast.std_error).sqrt();
        let dev = (mean_e - fast.mean).abs();
        assert!(
            dev <= 4.0 * combined,
            "explicit {mean_e} vs moment {} differ by {dev} > 4 combined SE {combined}",
            fast.mean
        );
    }

    #[test]
    fn finite_width_bias_bounded_by_calibrated_term() {
        // calibrate |bias(width)| <= c / width on a width doubling, then
        // check the bound extrapolates to a larger width
        let p = KernelParams::new(1.6, 0.1, 3).unwrap();
        let (x, y) = inputs(5, 8);
        let analytic = kernel_value(&x, &y, &p, 8).unwrap();
        let samples = 30000;
        let mut c = 1e-3_f64;
        for (w, seed) in [(128usize, 11u64), (256, 12)] {
            let est = mc_kernel_estimate(&x, &y, &p, w, samples, seed).unwrap();
            let excess = ((est.mean - analytic).abs() - 3.0 * est.std_error).max(0.0);
            c = c.max(4.0 * excess * w as f64);
        }
        let est = mc_kernel_estimate(&x, &y, &p, 512, samples, 13).unwrap();
        let dev = (est.mean - analytic).abs();
        let bound = 3.0 * est.std_error + c / 512.0;
        assert!(dev <= bound, "deviation {dev} exceeds calibrated bound {bound}");
    }
}
