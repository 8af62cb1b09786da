//! Prior hyperparameters and sampler tuning constants.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result, ValidationErrors};

/// Every fixed hyperparameter of the model. Variances are variances, Gamma
/// priors use the shape/rate parameterisation and the inverse-gamma prior of
/// the volatility variances uses shape/scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    /// Number of hidden states.
    #[serde(alias = "K")]
    pub k: usize,
    pub a_rho: f64,
    pub b_rho: f64,
    /// Prior variance of the free entries of the loading matrix.
    pub a_coef: f64,
    /// Prior variance of the entries of the coefficient factor.
    pub b_coef: f64,
    pub a_sigma_f: f64,
    pub b_sigma_f: f64,
    pub a_zeta: f64,
    pub b_zeta: f64,
    pub a_sv: f64,
    pub b_sv: f64,
    pub upsilon0_sq: f64,
    pub omega_w: f64,
    /// Dirichlet concentration for each transition-matrix row; empty means all ones.
    pub dirichlet_d: Vec<f64>,
    pub grid_size: usize,
    pub sigma2_f_min: f64,
    pub sigma2_f_max: f64,
    pub zeta_min: f64,
    pub zeta_max: f64,
    pub d_val: f64,
    pub nu_matern: f64,
    /// Inverse-Wishart degrees of freedom for the constant-volatility
    /// variant; `None` means `q + 1`.
    pub iw_df: Option<f64>,
    /// The inverse-Wishart scale matrix is `iw_scale · I`.
    pub iw_scale: f64,
    pub grrr_tol: f64,
    pub grrr_max_iter: usize,
    /// Number of opening burn-in sweeps over which the allocation target is
    /// tempered; 0 disables tempering. Capped at half the burn-in.
    pub anneal_sweeps: usize,
    /// Inverse temperature of the allocation target at the first sweep,
    /// raised geometrically to 1 over `anneal_sweeps`.
    pub anneal_start: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            k: 2,
            a_rho: 1.0,
            b_rho: 1.0,
            a_coef: 2.0,
            b_coef: 2.0,
            a_sigma_f: 2.0,
            b_sigma_f: 1.0,
            a_zeta: 2.0,
            b_zeta: 1.0,
            a_sv: 3.0,
            b_sv: 0.1,
            upsilon0_sq: 10.0,
            omega_w: 10.0,
            dirichlet_d: Vec::new(),
            grid_size: 100,
            sigma2_f_min: 0.01,
            sigma2_f_max: 10.0,
            zeta_min: 0.05,
            zeta_max: 10.0,
            d_val: 0.0,
            nu_matern: 1.5,
            iw_df: None,
            iw_scale: 1.0,
            grrr_tol: 1e-6,
            grrr_max_iter: 200,
            anneal_sweeps: 500,
            anneal_start: 0.01,
        }
    }
}

impl PriorConfig {
    pub fn with_states(k: usize) -> Self {
        Self {
            k,
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Transition-matrix prior row, expanded to length `k`.
    pub fn dirichlet(&self) -> Vec<f64> {
        if self.dirichlet_d.is_empty() {
            vec![1.0; self.k]
        } else {
            self.dirichlet_d.clone()
        }
    }

    pub fn iw_df_for(&self, q: usize) -> f64 {
        self.iw_df.unwrap_or(q as f64 + 1.0)
    }

    /// Checks the hyperparameters alone.
    pub fn check(&self) -> ValidationErrors {
        let mut errs = ValidationErrors::default();
        if self.k == 0 {
            errs.push("K", "must be at least 1");
        }
        let positive = [
            ("a_rho", self.a_rho),
            ("b_rho", self.b_rho),
            ("a_coef", self.a_coef),
            ("b_coef", self.b_coef),
            ("a_sigma_f", self.a_sigma_f),
            ("b_sigma_f", self.b_sigma_f),
            ("a_zeta", self.a_zeta),
            ("b_zeta", self.b_zeta),
            ("a_sv", self.a_sv),
            ("b_sv", self.b_sv),
            ("upsilon0_sq", self.upsilon0_sq),
            ("omega_w", self.omega_w),
            ("sigma2_f_min", self.sigma2_f_min),
            ("zeta_min", self.zeta_min),
            ("iw_scale", self.iw_scale),
            ("grrr_tol", self.grrr_tol),
        ];
        if !(self.anneal_start > 0.0 && self.anneal_start <= 1.0) {
            errs.push("anneal_start", "must lie in (0, 1]");
        }
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                errs.push(name, "must be positive");
            }
        }
        if !self.dirichlet_d.is_empty() {
            if self.dirichlet_d.len() != self.k {
                errs.push("dirichlet_d", format!("must have K = {} entries", self.k));
            }
            if self.dirichlet_d.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
                errs.push("dirichlet_d", "entries must be positive");
            }
        }
        if self.grid_size == 0 {
            errs.push("grid_size", "must be at least 1");
        }
        if !(self.sigma2_f_max >= self.sigma2_f_min && self.sigma2_f_max.is_finite()) {
            errs.push("sigma2_f_max", "must not be below sigma2_f_min");
        }
        if !(self.zeta_max >= self.zeta_min && self.zeta_max.is_finite()) {
            errs.push("zeta_max", "must not be below zeta_min");
        }
        if self.grid_size > 1 {
            if self.sigma2_f_max <= self.sigma2_f_min {
                errs.push("sigma2_f_max", "grid range must have positive width");
            }
            if self.zeta_max <= self.zeta_min {
                errs.push("zeta_max", "grid range must have positive width");
            }
        }
        if !self.d_val.is_finite() {
            errs.push("d_val", "must be finite");
        }
        if self.nu_matern != 1.5 {
            errs.push("nu_matern", "only 1.5 is supported");
        }
        if let Some(df) = self.iw_df {
            if !(df > 0.0 && df.is_finite()) {
                errs.push("iw_df", "must be positive");
            }
        }
        if self.grrr_max_iter == 0 {
            errs.push("grrr_max_iter", "must be at least 1");
        }
        errs
    }
}

/// Checks the hyperparameters, the data and their compatibility. Every
/// violated invariant is reported, not only the first.
pub fn validate(config: &PriorConfig, data: &Dataset) -> Result<()> {
    let mut errs = config.check();
    data.check_into(&mut errs);
    let (p, q) = (data.p(), data.q());
    if q < 3 {
        errs.push("q", "need at least 3 responses so that 1 < q_gamma < q");
    }
    if p < 2 {
        errs.push("p", "need at least 2 covariates so that a rank-1 low-rank group exists");
    }
    if let Some(df) = config.iw_df {
        if df <= q as f64 - 1.0 {
            errs.push("iw_df", format!("must exceed q - 1 = {}", q - 1));
        }
    }
    errs.into_result()
}

/// Log-spaced grid of `n` points on `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        assert!(PriorConfig::default().check().is_empty());
    }

    #[test]
    fn zero_a_rho_is_reported_by_name() {
        let cfg = PriorConfig {
            a_rho: 0.0,
            ..PriorConfig::default()
        };
        let errs = cfg.check();
        assert!(errs.mentions("a_rho"));
        assert_eq!(errs.to_string(), "a_rho must be positive");
    }

    #[test]
    fn zero_states_rejected() {
        let errs = PriorConfig::with_states(0).check();
        assert!(errs.mentions("K"));
    }

    #[test]
    fn several_errors_collected() {
        let cfg = PriorConfig {
            a_rho: -1.0,
            b_zeta: 0.0,
            grid_size: 0,
            dirichlet_d: vec![1.0],
            ..PriorConfig::default()
        };
        let errs = cfg.check();
        for f in ["a_rho", "b_zeta", "grid_size", "dirichlet_d"] {
            assert!(errs.mentions(f), "{f} missing from {errs}");
        }
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let cfg = PriorConfig {
            k: 3,
            iw_df: Some(7.0),
            ..PriorConfig::default()
        };
        let back = PriorConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        let partial = PriorConfig::from_toml_str("K = 1\na_rho = 2.5\n").unwrap();
        assert_eq!(partial.k, 1);
        assert_eq!(partial.a_rho, 2.5);
        assert_eq!(partial.b_rho, 1.0);
        assert!(PriorConfig::from_toml_str("bogus = 1\n").is_err());
    }

    #[test]
    fn log_grid_endpoints() {
        let g = log_grid(0.01, 10.0, 100);
        assert_eq!(g.len(), 100);
        assert!((g[0] - 0.01).abs() < 1e-15);
        assert!((g[99] - 10.0).abs() < 1e-12);
        let ratio = g[1] / g[0];
        for w in g.windows(2) {
            assert!((w[1] / w[0] - ratio).abs() < 1e-10);
        }
        assert_eq!(log_grid(0.5, 2.0, 1), vec![0.5]);
    }
}
