//! Discrete conditionals: allocation vectors (Metropolised shotgun stochastic
//! search), ranks, the Bernoulli rate `ρ` and the transition matrix.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma};
use rayon::prelude::*;

use crate::config::PriorConfig;
use crate::error::Result;
use crate::laplace::EvidenceTable;
use crate::linalg::{log_sum_exp, sample_categorical, sample_log_categorical};

pub fn is_valid_gamma(gamma: &[bool]) -> bool {
    let qg = gamma.iter().filter(|g| **g).count();
    qg > 1 && qg < gamma.len()
}

/// All single-coordinate flips of `center` that keep `1 < q_γ < q`.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhood {
    pub center: Vec<bool>,
    pub members: Vec<Vec<bool>>,
}

pub fn neighborhood(gamma: &[bool]) -> Neighborhood {
    let members = (0..gamma.len())
        .map(|j| {
            let mut g = gamma.to_vec();
            g[j] = !g[j];
            g
        })
        .filter(|g| is_valid_gamma(g))
        .collect();
    Neighborhood {
        center: gamma.to_vec(),
        members,
    }
}

/// `log p(γ | ρ)` up to the constraint's normalising constant.
pub fn log_prior_gamma(gamma: &[bool], rho: f64) -> f64 {
    let qg = gamma.iter().filter(|g| **g).count() as f64;
    let q = gamma.len() as f64;
    qg * rho.ln() + (q - qg) * (1.0 - rho).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsssOutcome {
    pub gamma: Vec<bool>,
    pub proposal: Option<Vec<bool>>,
    pub accepted: bool,
}

/// One Metropolised shotgun step. `log_target(γ)` is the unnormalised log
/// posterior of an allocation. The proposal is drawn from the target
/// restricted to the current neighbourhood and accepted with probability
/// `min(1, S(nbd(γ)) / S(nbd(γ*)))`, where `S` sums the target over a
/// neighbourhood.
pub fn msss_step<R, F>(gamma: &[bool], log_target: F, rng: &mut R) -> Result<MsssOutcome>
where
    R: Rng + ?Sized,
    F: Fn(&[bool]) -> Result<f64> + Sync,
{
    let nbd = neighborhood(gamma);
    if nbd.members.is_empty() {
        return Ok(MsssOutcome {
            gamma: gamma.to_vec(),
            proposal: None,
            accepted: false,
        });
    }
    let here: Vec<f64> = nbd
        .members
        .par_iter()
        .map(|g| log_target(g))
        .collect::<Result<Vec<_>>>()?;
    let Some(pick) = sample_log_categorical(&here, rng) else {
        return Ok(MsssOutcome {
            gamma: gamma.to_vec(),
            proposal: None,
            accepted: false,
        });
    };
    let proposal = nbd.members[pick].clone();
    let there: Vec<f64> = neighborhood(&proposal)
        .members
        .par_iter()
        .map(|g| log_target(g))
        .collect::<Result<Vec<_>>>()?;
    let log_ratio = log_sum_exp(&here) - log_sum_exp(&there);
    let u: f64 = rng.random();
    let accepted = log_ratio >= 0.0 || u.ln() < log_ratio;
    Ok(MsssOutcome {
        gamma: if accepted { proposal.clone() } else { gamma.to_vec() },
        proposal: Some(proposal),
        accepted,
    })
}

/// Evidence tables keyed by allocation, shared by the allocation and rank
/// draws of one state within one sweep.
#[derive(Default)]
pub struct EvidenceCache {
    inner: Mutex<HashMap<Vec<bool>, Arc<EvidenceTable>>>,
}

impl EvidenceCache {
    pub fn get_or_insert<F>(&self, gamma: &[bool], build: F) -> Result<Arc<EvidenceTable>>
    where
        F: FnOnce() -> Result<EvidenceTable>,
    {
        if let Some(t) = self.inner.lock().expect("cache lock").get(gamma) {
            return Ok(Arc::clone(t));
        }
        let table = Arc::new(build()?);
        let mut map = self.inner.lock().expect("cache lock");
        Ok(Arc::clone(map.entry(gamma.to_vec()).or_insert(table)))
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draws `r ∈ {1..r̄}` from its posterior probabilities.
pub fn sample_rank<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    sample_categorical(probs, rng) + 1
}

pub fn sample_rho<R: Rng + ?Sized>(gamma: &[bool], config: &PriorConfig, rng: &mut R) -> f64 {
    let qg = gamma.iter().filter(|g| **g).count() as f64;
    let q = gamma.len() as f64;
    let beta = Beta::new(config.a_rho + qg, config.b_rho + q - qg).expect("positive Beta parameters");
    // keep strictly inside (0, 1) so log-priors stay finite
    beta.sample(rng).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)
}

/// `N[k][l] = #{t ≥ 2 : s_{t−1} = k, s_t = l}`.
pub fn transition_counts(s: &[usize], k: usize) -> DMatrix<f64> {
    let mut n = DMatrix::zeros(k, k);
    for w in s.windows(2) {
        n[(w[0], w[1])] += 1.0;
    }
    n
}

pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    let mut draws: Vec<f64> = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("positive concentration").sample(rng))
        .collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 {
        draws.iter_mut().for_each(|d| *d /= total);
    } else {
        // every gamma draw underflowed; fall back to the largest concentration
        let best = (0..alpha.len()).max_by(|&i, &j| alpha[i].total_cmp(&alpha[j])).unwrap_or(0);
        draws.iter_mut().enumerate().for_each(|(i, d)| *d = f64::from(u8::from(i == best)));
    }
    draws
}

/// One row of the transition matrix from its Dirichlet conditional.
pub fn sample_xi_row<R: Rng + ?Sized>(s: &[usize], row: usize, config: &PriorConfig, rng: &mut R) -> Vec<f64> {
    let n = transition_counts(s, config.k);
    let d = config.dirichlet();
    let alpha: Vec<f64> = (0..config.k).map(|l| d[l] + n[(row, l)]).collect();
    sample_dirichlet(&alpha, rng)
}

pub fn sample_xi<R: Rng + ?Sized>(s: &[usize], config: &PriorConfig, rng: &mut R) -> DMatrix<f64> {
    let k = config.k;
    let mut xi = DMatrix::zeros(k, k);
    for row in 0..k {
        let r = sample_xi_row(s, row, config, rng);
        for (l, v) in r.into_iter().enumerate() {
            xi[(row, l)] = v;
        }
    }
    xi
}
