//! Generalised-least-squares sufficient statistics for one state's block of
//! observations, with the GP flexible group either marginalised out
//! (`Σ_y = Σ̃ + U₂ Ω̄ U₂ᵀ`) or conditioned on (`Σ̃` alone).
//!
//! Responses are reordered so that the low-rank group comes first (see
//! [`crate::state::gamma_permutation`]); in those coordinates the selection
//! matrices are `V₁ = [I | 0]` and `V₂ = [0 | I]`. Coefficients are
//! parameterised by `θ = vec(C_fullᵀ)` with `C_full = C V₁` (`p × q`), so
//! `θ[i + q·a] = C[a, i]` and the entries of flexible responses are zero.
//! For any `θ`,
//!
//! `log N(ỹ | Zθ, Σ_y) = −½ (n log 2π + log|Σ_y| + yy − 2θᵀ cross + θᵀ gram θ)`.
//!
//! Two exact routes compute the marginal statistics:
//! * constant noise covariance: rotate time by the eigenvectors of `Ω`,
//!   which block-diagonalises `Σ_y` into `Σ + λ_τ E_F`;
//! * time-varying covariance: Woodbury with inner matrix
//!   `Ω̄⁻¹ + U₂ᵀ Σ̃⁻¹ U₂`, which is also the posterior precision of the GP values.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::gp::KernelMatrix;
use crate::linalg::{chol_log_det, spd_inverse, standard_normal_vector, GaussianConditional};
use crate::state::gamma_permutation;

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Noise covariance of the observations in one state's block, in original
/// response order.
#[derive(Debug, Clone)]
pub enum NoiseCov {
    Constant(DMatrix<f64>),
    PerTime(Vec<DMatrix<f64>>),
}

impl NoiseCov {
    pub fn at(&self, t: usize) -> &DMatrix<f64> {
        match self {
            NoiseCov::Constant(s) => s,
            NoiseCov::PerTime(v) => &v[t],
        }
    }
}

#[derive(Debug, Clone)]
pub struct GlsStats {
    pub gram: DMatrix<f64>,
    pub cross: DVector<f64>,
    pub yy: f64,
    pub log_det: f64,
    pub n_obs: usize,
    pub p: usize,
    pub q: usize,
    pub q_gamma: usize,
}

impl GlsStats {
    pub fn log_lik(&self, theta: &DVector<f64>) -> f64 {
        let quad = theta.dot(&(&self.gram * theta));
        -0.5 * (self.n_obs as f64 * LN_2PI + self.log_det + self.yy - 2.0 * theta.dot(&self.cross) + quad)
    }

    /// Positions of `θ` that belong to the low-rank group.
    pub fn active(&self) -> Vec<usize> {
        (0..self.p)
            .flat_map(|a| (0..self.q_gamma).map(move |i| i + self.q * a))
            .collect()
    }

    /// Unrestricted GLS estimate of `C` (`p × q_γ`), minimum-norm when the
    /// normal equations are singular; `None` if they vanish.
    pub fn unrestricted_coef(&self) -> Option<DMatrix<f64>> {
        let idx = self.active();
        let g = self.gram.select_rows(&idx).select_columns(&idx);
        let h = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.cross[i]));
        let (sol, _) = crate::linalg::solve_psd_min_norm(&g, &h)?;
        Some(DMatrix::from_fn(self.p, self.q_gamma, |a, i| sol[i + self.q_gamma * a]))
    }
}

/// `θ = vec(C_fullᵀ)` for a `p × q_γ` coefficient matrix.
pub fn theta_from_coef(c: &DMatrix<f64>, q: usize) -> DVector<f64> {
    let (p, g) = c.shape();
    let mut th = DVector::zeros(q * p);
    for a in 0..p {
        for i in 0..g {
            th[i + q * a] = c[(a, i)];
        }
    }
    th
}

/// Statistics from an explicit dense `Σ_y` in the response-major layout
/// (entry `(t + iT, t' + jT)` couples response `i` at `t` with response `j`
/// at `t'`). Responses must already be ordered with the `q_gamma` low-rank
/// ones first. Costs `O((qT)³)`; meant for small problems and checks.
pub fn dense_stats(
    y: &DMatrix<f64>,
    x: &DMatrix<f64>,
    sigma_y: &DMatrix<f64>,
    q_gamma: usize,
) -> Result<GlsStats> {
    let (t_k, q, p) = (y.nrows(), y.ncols(), x.ncols());
    if sigma_y.shape() != (q * t_k, q * t_k) {
        return Err(Error::dimension("Σ_y must be qT × qT"));
    }
    let mut z = DMatrix::zeros(q * t_k, q * p);
    for i in 0..q_gamma {
        for t in 0..t_k {
            for a in 0..p {
                z[(t + i * t_k, i + q * a)] = x[(t, a)];
            }
        }
    }
    let yv = crate::linalg::vec(y);
    let c = Cholesky::new(sigma_y.clone()).ok_or_else(|| Error::numerical("Σ_y not PD"))?;
    let siz = c.solve(&z);
    let siy = c.solve(&yv);
    Ok(GlsStats {
        gram: z.transpose() * siz,
        cross: z.transpose() * &siy,
        yy: yv.dot(&siy),
        log_det: chol_log_det(&c),
        n_obs: q * t_k,
        p,
        q,
        q_gamma,
    })
}

struct Accum {
    gram: DMatrix<f64>,
    cross: DVector<f64>,
    yy: f64,
    p: usize,
    q: usize,
    g: usize,
}

impl Accum {
    fn new(p: usize, q: usize, g: usize) -> Self {
        Self {
            gram: DMatrix::zeros(q * p, q * p),
            cross: DVector::zeros(q * p),
            yy: 0.0,
            p,
            q,
            g,
        }
    }

    /// Adds one block `x ⊗ V₁ᵀ` with precision `prec` and response `y`,
    /// all in permuted response coordinates.
    fn add(&mut self, x: &[f64], prec: &DMatrix<f64>, y: &DVector<f64>) {
        let (p, q, g) = (self.p, self.q, self.g);
        let py = prec * y;
        self.yy += y.dot(&py);
        for a in 0..p {
            let xa = x[a];
            if xa == 0.0 {
                continue;
            }
            for i in 0..g {
                self.cross[i + q * a] += xa * py[i];
            }
            for b in 0..p {
                let xab = xa * x[b];
                for i2 in 0..g {
                    let col = i2 + q * b;
                    for i in 0..g {
                        self.gram[(i + q * a, col)] += xab * prec[(i, i2)];
                    }
                }
            }
        }
    }

    fn finish(self, log_det: f64, n_obs: usize) -> GlsStats {
        GlsStats {
            gram: self.gram,
            cross: self.cross,
            yy: self.yy,
            log_det,
            n_obs,
            p: self.p,
            q: self.q,
            q_gamma: self.g,
        }
    }
}

fn permute_sym(m: &DMatrix<f64>, perm: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(perm.len(), perm.len(), |i, j| m[(perm[i], perm[j])])
}

fn permute_vec<'a>(v: impl Iterator<Item = &'a f64>, perm: &[usize]) -> DVector<f64> {
    let v: Vec<f64> = v.copied().collect();
    DVector::from_iterator(perm.len(), perm.iter().map(|&j| v[j]))
}

/// Statistics with the GP values held fixed (`Σ̃` only); `target` is the
/// response block with the GP contribution already removed.
pub fn conditional_stats(
    target: &DMatrix<f64>,
    x_k: &DMatrix<f64>,
    noise: &NoiseCov,
    gamma: &[bool],
) -> Result<GlsStats> {
    let (t_k, q, p) = (target.nrows(), target.ncols(), x_k.ncols());
    let perm = gamma_permutation(gamma);
    let g = gamma.iter().filter(|v| **v).count();
    let mut acc = Accum::new(p, q, g);
    let mut log_det = 0.0;
    let constant = match noise {
        NoiseCov::Constant(s) => {
            let c = Cholesky::new(s.clone()).ok_or_else(|| Error::numerical("noise covariance not PD"))?;
            Some((permute_sym(&c.inverse(), &perm), chol_log_det(&c)))
        }
        NoiseCov::PerTime(_) => None,
    };
    for t in 0..t_k {
        let (prec, ld) = match &constant {
            Some((pr, ld)) => (pr.clone(), *ld),
            None => {
                let c = Cholesky::new(noise.at(t).clone())
                    .ok_or_else(|| Error::numerical(format!("noise covariance at block row {t} not PD")))?;
                (permute_sym(&c.inverse(), &perm), chol_log_det(&c))
            }
        };
        log_det += ld;
        let x: Vec<f64> = x_k.row(t).iter().copied().collect();
        acc.add(&x, &prec, &permute_vec(target.row(t).iter(), &perm));
    }
    Ok(acc.finish(log_det, q * t_k))
}

/// Per-state precomputation shared by every allocation vector evaluated in
/// one sweep: the kernel, its eigen/inverse form and the noise precisions.
pub struct CollapsedModel<'a> {
    y: &'a DMatrix<f64>,
    x: &'a DMatrix<f64>,
    kernel: &'a KernelMatrix,
    route: Route,
}

enum Route {
    Rotated {
        sigma: DMatrix<f64>,
        eigvecs: DMatrix<f64>,
        eigvals: DVector<f64>,
        y_rot: DMatrix<f64>,
        x_rot: DMatrix<f64>,
    },
    Woodbury {
        precisions: Vec<DMatrix<f64>>,
        noise_log_det: f64,
        omega_inv: DMatrix<f64>,
        omega_log_det: f64,
    },
}

impl<'a> CollapsedModel<'a> {
    pub fn new(
        y: &'a DMatrix<f64>,
        x: &'a DMatrix<f64>,
        noise: &NoiseCov,
        kernel: &'a KernelMatrix,
    ) -> Result<Self> {
        let t_k = y.nrows();
        if x.nrows() != t_k || kernel.dim() != t_k {
            return Err(Error::dimension("state block, covariates and kernel disagree on T_k"));
        }
        let route = match noise {
            NoiseCov::Constant(sigma) => {
                let eig = kernel.omega.clone().symmetric_eigen();
                let eigvals = eig.eigenvalues.map(|l| l.max(0.0));
                let qt = eig.eigenvectors.transpose();
                Route::Rotated {
                    sigma: sigma.clone(),
                    y_rot: &qt * y,
                    x_rot: &qt * x,
                    eigvecs: eig.eigenvectors,
                    eigvals,
                }
            }
            NoiseCov::PerTime(blocks) => {
                if blocks.len() != t_k {
                    return Err(Error::dimension("one noise covariance per time point required"));
                }
                let mut precisions = Vec::with_capacity(t_k);
                let mut noise_log_det = 0.0;
                for (t, b) in blocks.iter().enumerate() {
                    let c = Cholesky::new(b.clone())
                        .ok_or_else(|| Error::numerical(format!("noise covariance {t} not PD")))?;
                    noise_log_det += chol_log_det(&c);
                    precisions.push(c.inverse());
                }
                Route::Woodbury {
                    precisions,
                    noise_log_det,
                    omega_inv: kernel.inverse(),
                    omega_log_det: kernel.log_det(),
                }
            }
        };
        Ok(Self { y, x, kernel, route })
    }

    pub fn t_k(&self) -> usize {
        self.y.nrows()
    }

    pub fn kernel(&self) -> &KernelMatrix {
        self.kernel
    }

    /// Marginal statistics for the allocation `gamma`.
    pub fn gls_stats(&self, gamma: &[bool]) -> Result<GlsStats> {
        let (t_k, q, p) = (self.y.nrows(), self.y.ncols(), self.x.ncols());
        let perm = gamma_permutation(gamma);
        let g = gamma.iter().filter(|v| **v).count();
        let m = q - g;
        let mut acc = Accum::new(p, q, g);
        match &self.route {
            Route::Rotated {
                sigma,
                eigvals,
                y_rot,
                x_rot,
                ..
            } => {
                let sg = permute_sym(sigma, &perm);
                let mut log_det = 0.0;
                for tau in 0..t_k {
                    let mut block = sg.clone();
                    for j in g..q {
                        block[(j, j)] += eigvals[tau];
                    }
                    let c = Cholesky::new(block).ok_or_else(|| Error::numerical("rotated block not PD"))?;
                    log_det += chol_log_det(&c);
                    let x: Vec<f64> = x_rot.row(tau).iter().copied().collect();
                    acc.add(&x, &c.inverse(), &permute_vec(y_rot.row(tau).iter(), &perm));
                }
                Ok(acc.finish(log_det, q * t_k))
            }
            Route::Woodbury {
                precisions,
                noise_log_det,
                omega_inv,
                omega_log_det,
            } => {
                let nz = q * p;
                let mut v = DMatrix::zeros(m * t_k, nz + 1);
                let mut perm_prec = Vec::with_capacity(t_k);
                for t in 0..t_k {
                    let pr = permute_sym(&precisions[t], &perm);
                    let yt = permute_vec(self.y.row(t).iter(), &perm);
                    let x: Vec<f64> = self.x.row(t).iter().copied().collect();
                    acc.add(&x, &pr, &yt);
                    let py = &pr * &yt;
                    for j in 0..m {
                        let row = t * m + j;
                        for a in 0..p {
                            for i in 0..g {
                                v[(row, i + q * a)] = pr[(g + j, i)] * x[a];
                            }
                        }
                        v[(row, nz)] = py[g + j];
                    }
                    perm_prec.push(pr);
                }
                let inner = woodbury_inner(omega_inv, &perm_prec, g, m);
                let chol = Cholesky::new(inner)
                    .ok_or_else(|| Error::numerical("GP-marginal inner matrix not PD"))?;
                let wv = chol.l().solve_lower_triangular(&v).expect("triangular solve");
                let wz = wv.columns(0, nz);
                let wy = wv.column(nz);
                let mut stats = acc.finish(
                    noise_log_det + m as f64 * omega_log_det + chol_log_det(&chol),
                    q * t_k,
                );
                stats.gram -= wz.transpose() * wz;
                stats.cross -= wz.transpose() * wy;
                stats.yy -= wy.norm_squared();
                Ok(stats)
            }
        }
    }

    /// Conditional Gaussian of the GP values (`T_k × m`, columns ordered as
    /// the flexible responses) given the residual block `resid`
    /// (`y − U₁c*`, original response order).
    pub fn sample_f<R: Rng + ?Sized>(
        &self,
        gamma: &[bool],
        resid: &DMatrix<f64>,
        rng: &mut R,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let (t_k, q) = (self.y.nrows(), self.y.ncols());
        let perm = gamma_permutation(gamma);
        let g = gamma.iter().filter(|v| **v).count();
        let m = q - g;
        match &self.route {
            Route::Rotated {
                sigma,
                eigvecs,
                eigvals,
                ..
            } => {
                let prec = permute_sym(&spd_inverse(sigma)?, &perm);
                let pff = prec.view((g, g), (m, m)).clone_owned();
                let r_rot = eigvecs.transpose() * resid;
                let mut mean_rot = DMatrix::zeros(t_k, m);
                let mut draw_rot = DMatrix::zeros(t_k, m);
                let floor = eigvals.amax() * 1e-14;
                for tau in 0..t_k {
                    let lam = eigvals[tau];
                    if lam <= floor {
                        continue;
                    }
                    let rt = permute_vec(r_rot.row(tau).iter(), &perm);
                    let pr = &prec * rt;
                    let lin = pr.rows(g, m).clone_owned();
                    let mut pf = pff.clone();
                    for j in 0..m {
                        pf[(j, j)] += 1.0 / lam;
                    }
                    let gc = GaussianConditional::from_precision(&pf, &lin)?;
                    let d = gc.sample(rng);
                    for j in 0..m {
                        mean_rot[(tau, j)] = gc.mean[j];
                        draw_rot[(tau, j)] = d[j];
                    }
                }
                Ok((eigvecs * draw_rot, eigvecs * mean_rot))
            }
            Route::Woodbury {
                precisions,
                omega_inv,
                ..
            } => {
                let perm_prec: Vec<DMatrix<f64>> =
                    precisions.iter().map(|p| permute_sym(p, &perm)).collect();
                let inner = woodbury_inner(omega_inv, &perm_prec, g, m);
                let mut lin = DVector::zeros(m * t_k);
                for t in 0..t_k {
                    let rt = permute_vec(resid.row(t).iter(), &perm);
                    let pr = &perm_prec[t] * rt;
                    for j in 0..m {
                        lin[t * m + j] = pr[g + j];
                    }
                }
                let gc = GaussianConditional::from_precision(&inner, &lin)?;
                let d = gc.sample(rng);
                let draw = DMatrix::from_fn(t_k, m, |t, j| d[t * m + j]);
                let mean = DMatrix::from_fn(t_k, m, |t, j| gc.mean[t * m + j]);
                Ok((draw, mean))
            }
        }
    }
}

/// `Ω⁻¹ ⊗ I_m + blockdiag_t(P_t[F, F])`, indexed `(t·m + j)`.
fn woodbury_inner(omega_inv: &DMatrix<f64>, perm_prec: &[DMatrix<f64>], g: usize, m: usize) -> DMatrix<f64> {
    let t_k = perm_prec.len();
    let mut inner = DMatrix::zeros(m * t_k, m * t_k);
    for t in 0..t_k {
        for t2 in 0..t_k {
            let o = omega_inv[(t, t2)];
            for j in 0..m {
                inner[(t * m + j, t2 * m + j)] = o;
            }
        }
        for j in 0..m {
            for j2 in 0..m {
                inner[(t * m + j, t * m + j2)] += perm_prec[t][(g + j, g + j2)];
            }
        }
    }
    inner
}

/// Draw from `N(0, Ω)` for each of `cols` independent columns.
pub fn sample_gp_prior<R: Rng + ?Sized>(kernel: &KernelMatrix, cols: usize, rng: &mut R) -> DMatrix<f64> {
    let l = kernel.chol().l();
    let mut out = DMatrix::zeros(kernel.dim(), cols);
    for c in 0..cols {
        let z = standard_normal_vector(kernel.dim(), rng);
        out.set_column(c, &(&l * z));
    }
    out
}
