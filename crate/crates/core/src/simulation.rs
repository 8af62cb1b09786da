//! Synthetic data with known regimes, allocations and ranks.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SwitchPattern {
    /// State 0 up to and including this 1-based time point, state 1 after it.
    SingleAt(usize),
    /// Two-state chain with the given self-transition probability.
    Random { stay: f64 },
    None,
}

/// What the flexible responses' sine wave is a function of.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SineArgument {
    /// `A sin(2π t/T + φ_j)`.
    TimeIndex,
    /// `A sin(x_{t,c} + φ_j)` for covariate column `c`.
    Covariate(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: u8,
    pub p: usize,
    pub q: usize,
    pub t: usize,
    pub k_true: usize,
    pub q_gamma: Vec<usize>,
    pub ranks: Vec<usize>,
    pub switch: SwitchPattern,
    /// Fit with stochastic volatility rather than a constant covariance.
    pub sv_in_estimation: bool,
    pub amplitude: f64,
    pub sine_argument: SineArgument,
}

impl ScenarioSpec {
    pub fn preset(id: u8) -> Result<Self> {
        if !(1..=6).contains(&id) {
            return Err(Error::Validation(crate::error::ValidationErrors::single(
                "scenario",
                "must be between 1 and 6",
            )));
        }
        let (k_true, q_gamma, ranks, switch) = match (id - 1) % 3 {
            0 => (2, vec![4, 2], vec![2, 1], SwitchPattern::SingleAt(60)),
            1 => (2, vec![4, 2], vec![2, 1], SwitchPattern::Random { stay: 0.95 }),
            _ => (1, vec![3], vec![1], SwitchPattern::None),
        };
        Ok(Self {
            id,
            p: 5,
            q: 5,
            t: 100,
            k_true,
            q_gamma,
            ranks,
            switch,
            sv_in_estimation: id > 3,
            amplitude: 2.0,
            sine_argument: SineArgument::Covariate(0),
        })
    }

    /// Number of states to fit.
    pub fn k_fit(&self) -> usize {
        self.k_true
    }

    fn check(&self) -> Result<()> {
        let mut errs = crate::error::ValidationErrors::default();
        if self.q_gamma.len() != self.k_true || self.ranks.len() != self.k_true {
            errs.push("q_gamma", "needs one entry per state");
        }
        for (&g, &r) in self.q_gamma.iter().zip(&self.ranks) {
            if g <= 1 || g >= self.q {
                errs.push("q_gamma", "must lie strictly between 1 and q");
            }
            if r == 0 || r >= g.min(self.p) {
                errs.push("ranks", "must satisfy 1 ≤ r < min(p, q_γ)");
            }
        }
        if let SineArgument::Covariate(c) = self.sine_argument {
            if c >= self.p {
                errs.push("sine_argument", "covariate index out of range");
            }
        }
        if let SwitchPattern::SingleAt(at) = self.switch {
            if at == 0 || at >= self.t || self.k_true != 2 {
                errs.push("switch", "single switch needs two states and 0 < at < T");
            }
        }
        errs.into_result()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub scenario: u8,
    pub seed: u64,
    /// Noise-free mean of `Y`, `T × q`.
    pub mean: DMatrix<f64>,
    /// 0-based true states.
    pub s: Vec<usize>,
    pub gammas: Vec<Vec<bool>>,
    pub ranks: Vec<usize>,
    /// `p × q_γ` coefficient matrix per state.
    pub coefs: Vec<DMatrix<f64>>,
    pub noise_var: Vec<f64>,
}

impl GroundTruth {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// `p × q_γ` matrix with entries uniform on `(−3, −1.5) ∪ (1.5, 3)`, the
/// trailing singular values then zeroed to leave rank `r`.
pub fn low_rank_coef<R: Rng + ?Sized>(p: usize, q_gamma: usize, r: usize, rng: &mut R) -> DMatrix<f64> {
    let raw = DMatrix::from_fn(p, q_gamma, |_, _| {
        let mag = rng.random_range(1.5..3.0);
        if rng.random::<bool>() {
            mag
        } else {
            -mag
        }
    });
    let mut svd: nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn> = raw.svd(true, true);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    for &i in &order[r..] {
        svd.singular_values[i] = 0.0;
    }
    svd.recompose().expect("both factors requested")
}

fn state_path<R: Rng + ?Sized>(spec: &ScenarioSpec, rng: &mut R) -> Vec<usize> {
    let min_size = spec.p.max(spec.q) + 2;
    match spec.switch {
        SwitchPattern::None => vec![0; spec.t],
        SwitchPattern::SingleAt(at) => (0..spec.t).map(|t| usize::from(t >= at)).collect(),
        SwitchPattern::Random { stay } => loop {
            let mut s = Vec::with_capacity(spec.t);
            let mut cur = rng.random_range(0..2);
            for _ in 0..spec.t {
                s.push(cur);
                if rng.random::<f64>() >= stay {
                    cur = 1 - cur;
                }
            }
            let ones = s.iter().filter(|&&v| v == 1).count();
            if ones >= min_size && spec.t - ones >= min_size {
                break s;
            }
        },
    }
}

pub fn generate(spec: &ScenarioSpec, seed: u64) -> Result<(Dataset, GroundTruth)> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t_len, p, q) = (spec.t, spec.p, spec.q);
    let x = DMatrix::from_fn(t_len, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let noise_var: Vec<f64> = (0..q).map(|_| rng.random_range(0.1..1.0)).collect();
    let mut gammas = Vec::with_capacity(spec.k_true);
    let mut coefs = Vec::with_capacity(spec.k_true);
    for k in 0..spec.k_true {
        let mut idx: Vec<usize> = (0..q).collect();
        idx.shuffle(&mut rng);
        let mut gamma = vec![false; q];
        for &j in &idx[..spec.q_gamma[k]] {
            gamma[j] = true;
        }
        gammas.push(gamma);
        coefs.push(low_rank_coef(p, spec.q_gamma[k], spec.ranks[k], &mut rng));
    }
    let s = state_path(spec, &mut rng);
    let phases: Vec<f64> = (0..q).map(|j| 2.0 * PI * j as f64 / q as f64).collect();
    let mut mean = DMatrix::zeros(t_len, q);
    for t in 0..t_len {
        let k = s[t];
        let low: Vec<usize> = (0..q).filter(|&j| gammas[k][j]).collect();
        for (i, &j) in low.iter().enumerate() {
            mean[(t, j)] = (0..p).map(|a| x[(t, a)] * coefs[k][(a, i)]).sum();
        }
        for j in (0..q).filter(|&j| !gammas[k][j]) {
            let arg = match spec.sine_argument {
                SineArgument::TimeIndex => 2.0 * PI * (t + 1) as f64 / t_len as f64,
                SineArgument::Covariate(c) => x[(t, c)],
            };
            mean[(t, j)] = spec.amplitude * (arg + phases[j]).sin();
        }
    }
    let y = DMatrix::from_fn(t_len, q, |t, j| {
        mean[(t, j)] + noise_var[j].sqrt() * rng.sample::<f64, _>(StandardNormal)
    });
    let data = Dataset::new(y, x)?;
    let truth = GroundTruth {
        scenario: spec.id,
        seed,
        mean,
        s,
        gammas,
        ranks: spec.ranks.clone(),
        coefs,
        noise_var,
    };
    Ok((data, truth))
}
