//! Laplace (BIC-type) approximations to the marginal likelihood of an
//! allocation and rank, integrating over the loading and coefficient factors.
//!
//! For rank `r` the approximation is the maximised log-likelihood minus
//! `(p r + (q_γ − r) r)/2 · log T_k`, the count of free parameters in `A₀`
//! and `B` times half the log sample size. No Hessian or prior-density
//! terms are included.

use crate::covariance::GlsStats;
use crate::error::Result;
use crate::grrr::{self, GrrrProblem, GrrrSolution};
use crate::linalg::{log_sum_exp, normalize_log_weights};

/// Largest admissible rank, `min(p, q_γ) − 1`.
pub fn max_rank(p: usize, q_gamma: usize) -> usize {
    p.min(q_gamma).saturating_sub(1)
}

pub fn free_parameters(p: usize, q_gamma: usize, r: usize) -> usize {
    p * r + (q_gamma - r) * r
}

pub fn laplace_penalty(p: usize, q_gamma: usize, r: usize, t_k: usize) -> f64 {
    free_parameters(p, q_gamma, r) as f64 / 2.0 * (t_k as f64).ln()
}

#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RankEvidence {
    pub r: usize,
    pub log_evidence: f64,
    pub mle: GrrrSolution,
}

/// Laplace log-evidence for rank `r`; `t_k` is the number of time points in
/// the block the statistics were built from. Accepts `r ≤ min(p, q_γ − 1)`
/// so that tiny designs (`p = 1`) can be evaluated; callers sampling ranks
/// use [`max_rank`].
pub fn log_laplace_r(stats: &GlsStats, r: usize, t_k: usize, tol: Tolerance) -> Result<RankEvidence> {
    let prob = GrrrProblem::new(stats, r)?;
    let mle = grrr::solve(&prob, tol.tol, tol.max_iter)?;
    let log_evidence = mle.loglik - laplace_penalty(stats.p, stats.q_gamma, r, t_k);
    Ok(RankEvidence { r, log_evidence, mle })
}

/// Per-rank evidences for one allocation, ranks `1..=max_rank`.
#[derive(Debug, Clone)]
pub struct EvidenceTable {
    pub entries: Vec<RankEvidence>,
}

impl EvidenceTable {
    pub fn build(stats: &GlsStats, t_k: usize, tol: Tolerance) -> Result<Self> {
        let rmax = max_rank(stats.p, stats.q_gamma);
        let entries = (1..=rmax)
            .map(|r| log_laplace_r(stats, r, t_k, tol))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { entries })
    }

    pub fn log_evidences(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.log_evidence).collect()
    }

    /// Rank-averaged marginal: `log Σ_r (1/r̄) p̃_r`.
    pub fn gamma_log_marginal(&self) -> f64 {
        log_sum_exp(&self.log_evidences()) - (self.entries.len() as f64).ln()
    }

    /// Posterior over ranks `1..=r̄` under the uniform rank prior.
    pub fn rank_posterior(&self) -> Vec<f64> {
        normalize_log_weights(&self.log_evidences()).unwrap_or_else(|| {
            let n = self.entries.len();
            vec![1.0 / n as f64; n]
        })
    }
}

pub fn gamma_log_marginal(stats: &GlsStats, t_k: usize, tol: Tolerance) -> Result<f64> {
    Ok(EvidenceTable::build(stats, t_k, tol)?.gamma_log_marginal())
}

pub fn rank_posterior(stats: &GlsStats, t_k: usize, tol: Tolerance) -> Result<Vec<f64>> {
    Ok(EvidenceTable::build(stats, t_k, tol)?.rank_posterior())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::dense_stats;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn penalty_example() {
        let v = laplace_penalty(5, 4, 2, 60);
        assert!((v - 7.0 * 60f64.ln()).abs() < 1e-12);
        assert!((v - 28.66).abs() < 0.01);
    }

    #[test]
    fn penalty_counts_free_parameters() {
        for p in 2..6 {
            for qg in 2..6 {
                for r in 1..qg.min(p) {
                    let a0 = (qg - r) * r;
                    let b = p * r;
                    assert_eq!(free_parameters(p, qg, r), a0 + b);
                    let t = 10 + p + qg;
                    assert!((laplace_penalty(p, qg, r, t) - (a0 + b) as f64 * 0.5 * (t as f64).ln()).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn penalty_grows_with_sample_size() {
        let mut prev = 0.0;
        for t in [10, 20, 40, 80] {
            let v = laplace_penalty(3, 3, 1, t);
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn single_rank_table_is_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = 20;
        let x = DMatrix::from_fn(t, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DMatrix::from_fn(t, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let stats = dense_stats(&y, &x, &DMatrix::identity(3 * t, 3 * t), 2).unwrap();
        let table = EvidenceTable::build(&stats, t, Tolerance::default()).unwrap();
        assert_eq!(table.entries.len(), 1);
        assert_eq!(table.rank_posterior(), vec![1.0]);
        assert!((table.gamma_log_marginal() - table.entries[0].log_evidence).abs() < 1e-12);
    }

    #[test]
    fn null_design_prefers_rank_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = 80;
        let x = DMatrix::from_fn(t, 5, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DMatrix::from_fn(t, 5, |_, _| rng.sample::<f64, _>(StandardNormal));
        let stats = dense_stats(&y, &x, &DMatrix::identity(5 * t, 5 * t), 4).unwrap();
        let post = rank_posterior(&stats, t, Tolerance::default()).unwrap();
        assert_eq!(post.len(), 3);
        assert!(post[0] > 0.9, "{post:?}");
        assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
