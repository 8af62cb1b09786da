//! Matérn-3/2 Gaussian-process kernel and griddy-Gibbs hyperparameter updates.
//!
//! Kernels are factorised densely, so one factorisation costs `O(T_k³)`.

use nalgebra::{Cholesky, DMatrix, Dyn};
use rand::Rng;

use crate::config::{log_grid, PriorConfig};
use crate::error::{Error, Result};
use crate::linalg::{chol_log_det, sample_log_categorical};

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Relative jitter schedule: first try, multiplied by 10 up to the last.
pub const JITTER_START: f64 = 1e-8;
pub const JITTER_MAX: f64 = 1e-4;

pub fn matern32(x_i: &[f64], x_l: &[f64], sigma2_f: f64, zeta: f64) -> f64 {
    let d = x_i
        .iter()
        .zip(x_l)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    matern32_distance(d, sigma2_f, zeta)
}

#[inline]
pub fn matern32_distance(d: f64, sigma2_f: f64, zeta: f64) -> f64 {
    let u = SQRT3 * d / zeta;
    sigma2_f * (1.0 + u) * (-u).exp()
}

/// Pairwise Euclidean distances between the rows of `x`.
pub fn distance_matrix(x: &DMatrix<f64>) -> DMatrix<f64> {
    cross_distances(x, x)
}

pub fn cross_distances(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        (0..a.ncols())
            .map(|c| (a[(i, c)] - b[(j, c)]).powi(2))
            .sum::<f64>()
            .sqrt()
    })
}

/// Unit-variance Matérn correlation for a precomputed distance matrix.
pub fn correlation(dist: &DMatrix<f64>, zeta: f64) -> DMatrix<f64> {
    dist.map(|d| matern32_distance(d, 1.0, zeta))
}

/// A factorised prior covariance `Ω = σ²_f R(ζ) + jitter·I`.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    pub omega: DMatrix<f64>,
    pub sigma2_f: f64,
    pub zeta: f64,
    pub jitter: f64,
    chol: Cholesky<f64, Dyn>,
}

impl KernelMatrix {
    pub fn dim(&self) -> usize {
        self.omega.nrows()
    }

    pub fn chol(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }

    pub fn log_det(&self) -> f64 {
        chol_log_det(&self.chol)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// Posterior-predictive mean `k(x*, X) Ω⁻¹ F` at new inputs, given GP
    /// values `F` (one column per function) at the training inputs.
    pub fn predict_mean(
        &self,
        x_train: &DMatrix<f64>,
        x_new: &DMatrix<f64>,
        values: &DMatrix<f64>,
    ) -> DMatrix<f64> {
        let cross = cross_distances(x_new, x_train).map(|d| matern32_distance(d, self.sigma2_f, self.zeta));
        cross * self.chol.solve(values)
    }
}

/// Gram matrix of the rows of `x_k` plus jitter on the diagonal. The jitter
/// starts at `jitter` and is multiplied by 10 until the matrix factorises or
/// it would exceed `JITTER_MAX · σ²_f`.
pub fn build_kernel(x_k: &DMatrix<f64>, sigma2_f: f64, zeta: f64, jitter: f64) -> Result<KernelMatrix> {
    from_distances(&distance_matrix(x_k), sigma2_f, zeta, jitter)
}

pub fn from_distances(dist: &DMatrix<f64>, sigma2_f: f64, zeta: f64, jitter: f64) -> Result<KernelMatrix> {
    let base = correlation(dist, zeta) * sigma2_f;
    let ceiling = JITTER_MAX * sigma2_f * (1.0 + 1e-9);
    let mut j = jitter;
    loop {
        let mut omega = base.clone();
        for i in 0..omega.nrows() {
            omega[(i, i)] += j;
        }
        if let Some(chol) = Cholesky::new(omega.clone()) {
            return Ok(KernelMatrix {
                omega,
                sigma2_f,
                zeta,
                jitter: j,
                chol,
            });
        }
        j *= 10.0;
        if j > ceiling {
            return Err(Error::numerical(format!(
                "Matérn kernel (sigma2_f = {sigma2_f}, zeta = {zeta}) not factorisable with jitter up to {ceiling:e}"
            )));
        }
    }
}

pub fn default_jitter(sigma2_f: f64) -> f64 {
    JITTER_START * sigma2_f
}

/// Gamma(shape, rate) log-density up to its normalising constant.
pub fn gamma_log_kernel(x: f64, shape: f64, rate: f64) -> f64 {
    (shape - 1.0) * x.ln() - rate * x
}

/// `Σ_j [−½ log|Ω| − ½ f_jᵀ Ω⁻¹ f_j]` for the columns of `f`.
fn gp_log_lik_chol(chol: &Cholesky<f64, Dyn>, f: &DMatrix<f64>) -> f64 {
    let m = f.ncols() as f64;
    if f.nrows() == 0 || f.ncols() == 0 {
        return 0.0;
    }
    let sol = chol.solve(f);
    let quad: f64 = f.iter().zip(sol.iter()).map(|(a, b)| a * b).sum();
    -0.5 * m * chol_log_det(chol) - 0.5 * quad
}

/// Unnormalised log-weights of the length-scale grid with `σ²_f` held fixed.
pub fn zeta_log_weights(
    f: &DMatrix<f64>,
    dist: &DMatrix<f64>,
    sigma2_f: f64,
    grid: &[f64],
    config: &PriorConfig,
) -> Vec<f64> {
    grid.iter()
        .map(|&z| {
            let prior = gamma_log_kernel(z, config.a_zeta, config.b_zeta);
            if f.nrows() == 0 || f.ncols() == 0 {
                return prior;
            }
            match from_distances(dist, sigma2_f, z, default_jitter(sigma2_f)) {
                Ok(km) => prior + gp_log_lik_chol(&km.chol, f),
                Err(_) => f64::NEG_INFINITY,
            }
        })
        .collect()
}

/// Unnormalised log-weights of the signal-variance grid with `ζ` held fixed.
/// The jitter scales with `σ²_f`, so one factorisation of `R(ζ) + εI`
/// serves the whole grid.
pub fn sigma2_f_log_weights(
    f: &DMatrix<f64>,
    dist: &DMatrix<f64>,
    zeta: f64,
    grid: &[f64],
    config: &PriorConfig,
) -> Vec<f64> {
    let priors = grid
        .iter()
        .map(|&s| gamma_log_kernel(s, config.a_sigma_f, config.b_sigma_f));
    if f.nrows() == 0 || f.ncols() == 0 {
        return priors.collect();
    }
    let Ok(unit) = from_distances(dist, 1.0, zeta, JITTER_START) else {
        return vec![f64::NEG_INFINITY; grid.len()];
    };
    let m = f.ncols() as f64;
    let t_k = f.nrows() as f64;
    let sol = unit.chol.solve(f);
    let quad: f64 = f.iter().zip(sol.iter()).map(|(a, b)| a * b).sum();
    let ld = unit.log_det();
    priors
        .zip(grid)
        .map(|(prior, &s)| prior - 0.5 * m * (t_k * s.ln() + ld) - 0.5 * quad / s)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperDraw {
    pub sigma2_f: f64,
    pub zeta: f64,
    /// Set when a grid's weights all underflowed and the current value was kept.
    pub kept_current: bool,
}

/// Griddy-Gibbs update: `ζ` from its discretised full conditional given the
/// current `σ²_f`, then `σ²_f` given the new `ζ`.
pub fn griddy_update_hypers<R: Rng + ?Sized>(
    f: &DMatrix<f64>,
    x_k: &DMatrix<f64>,
    current_sigma2_f: f64,
    current_zeta: f64,
    config: &PriorConfig,
    rng: &mut R,
) -> HyperDraw {
    let dist = distance_matrix(x_k);
    let zeta_grid = log_grid(config.zeta_min, config.zeta_max, config.grid_size);
    let s2_grid = log_grid(config.sigma2_f_min, config.sigma2_f_max, config.grid_size);
    let mut kept = false;
    let zw = zeta_log_weights(f, &dist, current_sigma2_f, &zeta_grid, config);
    let zeta = match sample_log_categorical(&zw, rng) {
        Some(i) => zeta_grid[i],
        None => {
            log::warn!("all length-scale grid weights underflowed; keeping {current_zeta}");
            kept = true;
            current_zeta
        }
    };
    let sw = sigma2_f_log_weights(f, &dist, zeta, &s2_grid, config);
    let sigma2_f = match sample_log_categorical(&sw, rng) {
        Some(i) => s2_grid[i],
        None => {
            log::warn!("all signal-variance grid weights underflowed; keeping {current_sigma2_f}");
            kept = true;
            current_sigma2_f
        }
    };
    HyperDraw {
        sigma2_f,
        zeta,
        kept_current: kept,
    }
}
