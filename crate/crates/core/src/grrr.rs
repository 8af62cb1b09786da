//! Constrained maximum likelihood for the low-rank factorisation `C = B Aᵀ`
//! with `A = [I_r; A₀]`, by alternating the two exact conditional
//! maximisers (generalised reduced-rank regression).
//!
//! Works on the sufficient statistics of [`crate::covariance`], so the same
//! solver serves the GP-marginal likelihood (Laplace evaluations) and any
//! dense `Σ_y`. Only the low-rank block of `θ` enters: with `G`, `h` its gram
//! and cross terms, `θ = (I_p ⊗ A) vec(Bᵀ) = (B ⊗ I_{q_γ}) vec(A)`, so both
//! half-steps are small generalised least-squares problems.

use nalgebra::{DMatrix, DVector};

use crate::covariance::{theta_from_coef, GlsStats, LN_2PI};
use crate::error::{Error, Result};
use crate::state::assemble_loading;
use crate::linalg::solve_psd_min_norm;

pub struct GrrrProblem<'a> {
    pub stats: &'a GlsStats,
    pub r: usize,
    /// Gram and cross terms of the low-rank block, index `i + q_γ·a`.
    gram: DMatrix<f64>,
    cross: DVector<f64>,
}

impl<'a> GrrrProblem<'a> {
    /// Requires `1 ≤ r < q_γ` and `r ≤ p`.
    pub fn new(stats: &'a GlsStats, r: usize) -> Result<Self> {
        if r > stats.p {
            return Err(Error::dimension(format!("rank {r} exceeds p = {}", stats.p)));
        }
        if r == 0 || r >= stats.q_gamma {
            return Err(Error::dimension(format!(
                "rank {r} must satisfy 1 <= r < q_gamma = {}",
                stats.q_gamma
            )));
        }
        let idx = stats.active();
        let gram = stats.gram.select_rows(&idx).select_columns(&idx);
        let cross = DVector::from_iterator(idx.len(), idx.iter().map(|&i| stats.cross[i]));
        Ok(Self { stats, r, gram, cross })
    }

    pub fn q_gamma(&self) -> usize {
        self.stats.q_gamma
    }

    pub fn log_lik(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        let st = self.stats;
        let c = b * a.transpose();
        let th = DVector::from_iterator(c.len(), c.transpose().iter().copied());
        let quad = th.dot(&(&self.gram * &th));
        -0.5 * (st.n_obs as f64 * LN_2PI + st.log_det + st.yy - 2.0 * th.dot(&self.cross) + quad)
    }
}

#[derive(Debug, Clone)]
pub struct Step {
    pub value: DMatrix<f64>,
    pub rank_deficient: bool,
}

/// Exact maximiser over `A` (identity top block) given `B`.
pub fn update_alpha(problem: &GrrrProblem, b: &DMatrix<f64>) -> Result<Step> {
    let (p, g, r) = (problem.stats.p, problem.q_gamma(), problem.r);
    // M = (B ⊗ I)ᵀ G (B ⊗ I), n = (B ⊗ I)ᵀ h over vec(A), index i + g·ℓ
    let mut m = DMatrix::zeros(g * r, g * r);
    let mut n = DVector::zeros(g * r);
    for a in 0..p {
        for l in 0..r {
            let bal = b[(a, l)];
            if bal == 0.0 {
                continue;
            }
            for i in 0..g {
                n[i + g * l] += bal * problem.cross[i + g * a];
            }
            for c in 0..p {
                for k in 0..r {
                    let w = bal * b[(c, k)];
                    if w == 0.0 {
                        continue;
                    }
                    for jj in 0..g {
                        for ii in 0..g {
                            m[(g * l + ii, g * k + jj)] += w * problem.gram[(g * a + ii, g * c + jj)];
                        }
                    }
                }
            }
        }
    }
    let free: Vec<usize> = (0..r).flat_map(|l| (r..g).map(move |i| i + g * l)).collect();
    let fixed: Vec<usize> = (0..r).map(|l| l + g * l).collect();
    let lhs = m.select_rows(&free).select_columns(&free);
    let mut rhs = n.select_rows(&free);
    for &f in &fixed {
        for (row, &i) in free.iter().enumerate() {
            rhs[row] -= m[(i, f)];
        }
    }
    let (sol, rank_deficient) = solve_psd_min_norm(&lhs, &rhs)
        .ok_or_else(|| Error::numerical("loading normal equations are zero or not finite"))?;
    if rank_deficient {
        log::debug!("loading update is rank deficient; took the minimum-norm solution");
    }
    let a0 = DMatrix::from_fn(g - r, r, |i, l| sol[i + (g - r) * l]);
    Ok(Step {
        value: assemble_loading(&a0, r),
        rank_deficient,
    })
}

/// Exact maximiser over `B` given `A`.
pub fn update_beta(problem: &GrrrProblem, a: &DMatrix<f64>) -> Result<Step> {
    let (p, g, r) = (problem.stats.p, problem.q_gamma(), problem.r);
    // θ = (I_p ⊗ A) vec(Bᵀ): block (a, c) of M is Aᵀ G_ac A, index ℓ + r·a
    let mut m = DMatrix::zeros(p * r, p * r);
    let mut n = DVector::zeros(p * r);
    for ia in 0..p {
        let h = problem.cross.rows(g * ia, g);
        n.rows_mut(r * ia, r).copy_from(&(a.transpose() * h));
        for ic in 0..p {
            let blk = problem.gram.view((g * ia, g * ic), (g, g));
            m.view_mut((r * ia, r * ic), (r, r)).copy_from(&(a.transpose() * blk * a));
        }
    }
    let (beta, rank_deficient) = solve_psd_min_norm(&m, &n)
        .ok_or_else(|| Error::numerical("coefficient normal equations are zero or not finite"))?;
    if rank_deficient {
        log::debug!("coefficient update is rank deficient; took the minimum-norm solution");
    }
    Ok(Step {
        value: DMatrix::from_fn(p, r, |ia, l| beta[l + r * ia]),
        rank_deficient,
    })
}

#[derive(Debug, Clone)]
pub struct GrrrSolution {
    pub a_hat: DMatrix<f64>,
    pub b_hat: DMatrix<f64>,
    pub c_hat: DMatrix<f64>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood after every accepted update.
    pub trace: Vec<f64>,
    pub rank_deficient: bool,
}

impl GrrrSolution {
    pub fn a0(&self) -> DMatrix<f64> {
        let r = self.b_hat.ncols();
        self.a_hat.rows(r, self.a_hat.nrows() - r).clone_owned()
    }

    /// Whether the trace never decreased beyond round-off.
    pub fn is_monotone(&self) -> bool {
        self.trace
            .windows(2)
            .all(|w| w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0))
    }
}

/// Warm start from the rank-`r` truncation `C_r = U_r S_r V_rᵀ` of the
/// unrestricted GLS estimate. Under `A = [I_r; A₀]` the coefficient block
/// equals the first `r` columns of `C`, so `B⁰ = C_r[:, ..r]`; when that
/// block is (near) singular, falls back to `U_r S_r`.
pub fn initial_b(problem: &GrrrProblem) -> DMatrix<f64> {
    let (p, r) = (problem.stats.p, problem.r);
    let fallback = || DMatrix::identity(p, r);
    let Some(c) = problem.stats.unrestricted_coef() else {
        return fallback();
    };
    let svd = c.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else { return fallback() };
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let mut us = DMatrix::zeros(p, r);
    let mut vt = DMatrix::zeros(r, v_t.ncols());
    for (col, &i) in order.iter().take(r).enumerate() {
        let s = svd.singular_values[i];
        if s <= 0.0 {
            return fallback();
        }
        us.set_column(col, &(u.column(i) * s));
        vt.set_row(col, &v_t.row(i));
    }
    let top = vt.columns(0, r).clone_owned();
    let sv = top.clone().svd(false, false).singular_values;
    if sv.min() > 1e-8 * sv.max().max(1e-300) {
        us * top
    } else {
        us
    }
}

pub fn solve(problem: &GrrrProblem, tol: f64, max_iter: usize) -> Result<GrrrSolution> {
    solve_from(problem, initial_b(problem), tol, max_iter)
}

/// Alternates loading and coefficient updates from `b0`, each pass followed
/// by a safeguarded joint Gauss-Newton step, until the relative Frobenius
/// change of `C` drops below `tol` or `max_iter` is reached.
pub fn solve_from(problem: &GrrrProblem, b0: DMatrix<f64>, tol: f64, max_iter: usize) -> Result<GrrrSolution> {
    alternate(problem, b0, tol, max_iter, true)
}

/// Plain alternation without the joint Gauss-Newton step.
pub fn solve_from_plain(problem: &GrrrProblem, b0: DMatrix<f64>, tol: f64, max_iter: usize) -> Result<GrrrSolution> {
    alternate(problem, b0, tol, max_iter, false)
}

/// One Gauss-Newton step on `(A₀, B)` jointly, halved until the
/// log-likelihood improves; `None` if no trial step does.
fn gauss_newton_step(
    problem: &GrrrProblem,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    ll: f64,
) -> Option<(DMatrix<f64>, DMatrix<f64>, f64)> {
    let (p, g, r) = (problem.stats.p, problem.q_gamma(), problem.r);
    let n_a = (g - r) * r;
    let n_par = n_a + p * r;
    // θ[i + g·c] = Σ_ℓ A[i, ℓ] B[c, ℓ]
    let mut jac = DMatrix::zeros(p * g, n_par);
    for l in 0..r {
        for i in r..g {
            let col = (i - r) + (g - r) * l;
            for c in 0..p {
                jac[(i + g * c, col)] = b[(c, l)];
            }
        }
        for c in 0..p {
            let col = n_a + c + p * l;
            for i in 0..g {
                jac[(i + g * c, col)] = a[(i, l)];
            }
        }
    }
    let c_mat = b * a.transpose();
    let theta = DVector::from_iterator(c_mat.len(), c_mat.transpose().iter().copied());
    let grad = &problem.cross - &problem.gram * &theta;
    let gj = &problem.gram * &jac;
    let lhs = jac.transpose() * gj;
    let rhs = jac.transpose() * grad;
    let (delta, _) = solve_psd_min_norm(&lhs, &rhs)?;
    let mut step = 1.0;
    for _ in 0..6 {
        let mut a_new = a.clone();
        let mut b_new = b.clone();
        for l in 0..r {
            for i in r..g {
                a_new[(i, l)] += step * delta[(i - r) + (g - r) * l];
            }
            for c in 0..p {
                b_new[(c, l)] += step * delta[n_a + c + p * l];
            }
        }
        let ll_new = problem.log_lik(&a_new, &b_new);
        if ll_new > ll {
            return Some((a_new, b_new, ll_new));
        }
        step *= 0.5;
    }
    None
}

fn alternate(problem: &GrrrProblem, b0: DMatrix<f64>, tol: f64, max_iter: usize, accelerate: bool) -> Result<GrrrSolution> {
    let mut b = b0;
    let mut a = assemble_loading(&DMatrix::zeros(problem.q_gamma() - problem.r, problem.r), problem.r);
    let mut prev_c: Option<DMatrix<f64>> = None;
    let mut trace = Vec::with_capacity(2 * max_iter.min(64));
    let mut rank_deficient = false;
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=max_iter {
        iterations = it;
        let sa = update_alpha(problem, &b)?;
        a = sa.value;
        trace.push(problem.log_lik(&a, &b));
        let sb = update_beta(problem, &a)?;
        b = sb.value;
        let mut ll = problem.log_lik(&a, &b);
        trace.push(ll);
        rank_deficient |= sa.rank_deficient || sb.rank_deficient;
        if accelerate {
            if let Some((a_gn, b_gn, ll_gn)) = gauss_newton_step(problem, &a, &b, ll) {
                a = a_gn;
                b = b_gn;
                ll = ll_gn;
                trace.push(ll);
            }
        }
        let _ = ll;
        let c = &b * a.transpose();
        if let Some(prev) = &prev_c {
            let denom = c.norm().max(1e-300);
            if (&c - prev).norm() / denom < tol {
                converged = true;
                prev_c = Some(c);
                break;
            }
        }
        prev_c = Some(c);
    }
    let c_hat = prev_c.expect("at least one iteration");
    let loglik = *trace.last().expect("non-empty trace");
    let sol = GrrrSolution {
        a_hat: a,
        b_hat: b,
        c_hat,
        loglik,
        iterations,
        converged,
        trace,
        rank_deficient,
    };
    if !sol.is_monotone() {
        log::warn!("reduced-rank log-likelihood decreased during alternation");
    }
    if !sol.converged {
        log::debug!("reduced-rank alternation stopped at max_iter = {max_iter}");
    }
    Ok(sol)
}

/// Rank of the low-rank coefficient block implied by a solution.
pub fn numerical_rank(c: &DMatrix<f64>, rel_tol: f64) -> usize {
    let sv = c.clone().svd(false, false).singular_values;
    let top = sv.max();
    sv.iter().filter(|s| **s > rel_tol * top).count()
}

pub fn theta_of(sol: &GrrrSolution, q: usize) -> DVector<f64> {
    theta_from_coef(&sol.c_hat, q)
}
