//! Stochastic-volatility updates for one response's log-variance path.
//!
//! `log(u_t² + c)` is treated as `h_t` plus a ten-component Gaussian mixture
//! approximating `log χ²₁`. Given the mixture indicators the model is a
//! linear Gaussian random walk, sampled by forward filtering and backward
//! sampling.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::linalg::sample_log_categorical;

pub const MIXTURE_WEIGHTS: [f64; 10] = [
    0.00609, 0.04775, 0.13057, 0.20674, 0.22715, 0.18842, 0.12047, 0.05591, 0.01575, 0.00115,
];
pub const MIXTURE_MEANS: [f64; 10] = [
    1.92677, 1.34744, 0.73504, 0.02266, -0.85173, -1.97278, -3.46788, -5.55246, -8.68384, -14.65,
];
pub const MIXTURE_VARIANCES: [f64; 10] = [
    0.11265, 0.17788, 0.26768, 0.40611, 0.62699, 0.98583, 1.57469, 2.54498, 4.16591, 7.33342,
];

/// Added to `u²` before taking logs.
pub const LOG_SQUARE_OFFSET: f64 = 1e-10;

/// FNV-1a over the bit patterns of the weights, means and variances.
pub fn mixture_checksum() -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for v in MIXTURE_WEIGHTS.iter().chain(&MIXTURE_MEANS).chain(&MIXTURE_VARIANCES) {
        for byte in v.to_bits().to_le_bytes() {
            hash ^= u64::from(byte);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash
}

pub fn log_square(u: f64) -> f64 {
    (u * u + LOG_SQUARE_OFFSET).ln()
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean).powi(2) / var)
}

pub fn sample_indicators<R: Rng + ?Sized>(z: &[f64], h: &[f64], rng: &mut R) -> Vec<usize> {
    z.iter()
        .zip(h)
        .map(|(&zt, &ht)| {
            let lw: Vec<f64> = (0..10)
                .map(|i| MIXTURE_WEIGHTS[i].ln() + log_normal(zt, ht + MIXTURE_MEANS[i], MIXTURE_VARIANCES[i]))
                .collect();
            sample_log_categorical(&lw, rng).unwrap_or(4)
        })
        .collect()
}

/// Filtered means and variances of `h_t = h_{t−1} + η_t`, `η_t ~ N(0, σ²)`,
/// started from the fixed `h_0`, with observations `obs_t = h_t + e_t`,
/// `e_t ~ N(0, obs_var_t)`.
pub fn kalman_filter(obs: &[f64], obs_var: &[f64], h0: f64, sigma2: f64) -> (Vec<f64>, Vec<f64>) {
    let n = obs.len();
    let mut m = Vec::with_capacity(n);
    let mut c = Vec::with_capacity(n);
    let (mut mean, mut var) = (h0, 0.0);
    for t in 0..n {
        let p = var + sigma2;
        let k = p / (p + obs_var[t]);
        mean += k * (obs[t] - mean);
        var = p * (1.0 - k);
        m.push(mean);
        c.push(var);
    }
    (m, c)
}

pub fn ffbs_random_walk<R: Rng + ?Sized>(
    obs: &[f64],
    obs_var: &[f64],
    h0: f64,
    sigma2: f64,
    rng: &mut R,
) -> Vec<f64> {
    let n = obs.len();
    if n == 0 {
        return Vec::new();
    }
    let (m, c) = kalman_filter(obs, obs_var, h0, sigma2);
    let mut out = vec![0.0; n];
    let z: f64 = rng.sample(StandardNormal);
    out[n - 1] = m[n - 1] + c[n - 1].sqrt() * z;
    for t in (0..n - 1).rev() {
        let gain = c[t] / (c[t] + sigma2);
        let mean = m[t] + gain * (out[t + 1] - m[t]);
        let var = c[t] * sigma2 / (c[t] + sigma2);
        let z: f64 = rng.sample(StandardNormal);
        out[t] = mean + var.sqrt() * z;
    }
    out
}

/// New log-variance path for one response given its orthogonalised
/// residuals `u`.
pub fn sample_h<R: Rng + ?Sized>(u: &[f64], h: &[f64], h0: f64, sigma2: f64, rng: &mut R) -> Vec<f64> {
    let z: Vec<f64> = u.iter().map(|&v| log_square(v)).collect();
    let ind = sample_indicators(&z, h, rng);
    let obs: Vec<f64> = z.iter().zip(&ind).map(|(zt, &i)| zt - MIXTURE_MEANS[i]).collect();
    let var: Vec<f64> = ind.iter().map(|&i| MIXTURE_VARIANCES[i]).collect();
    ffbs_random_walk(&obs, &var, h0, sigma2, rng)
}

/// `h_0 | h_1, σ² ~ N(μ, 1/P)`, `P = 1/υ₀² + 1/σ²`, `μ = (h_1/σ²)/P`.
pub fn sample_h0<R: Rng + ?Sized>(h1: f64, sigma2: f64, prior_var: f64, rng: &mut R) -> f64 {
    let prec = 1.0 / prior_var + 1.0 / sigma2;
    let mean = h1 / sigma2 / prec;
    let z: f64 = rng.sample(StandardNormal);
    mean + z / prec.sqrt()
}

/// `σ² ~ IG(a + T/2, b + ½ Σ_t (h_t − h_{t−1})²)`, increments starting at `h_0`.
pub fn sample_sigma2<R: Rng + ?Sized>(h: &[f64], h0: f64, a: f64, b: f64, rng: &mut R) -> f64 {
    let mut prev = h0;
    let mut ss = 0.0;
    for &v in h {
        ss += (v - prev).powi(2);
        prev = v;
    }
    let shape = a + h.len() as f64 / 2.0;
    let rate = b + 0.5 * ss;
    let g = Gamma::new(shape, 1.0 / rate).expect("positive inverse-gamma parameters");
    1.0 / g.sample(rng)
}
