//! Dense linear-algebra utilities shared by every sampler block.
//!
//! Index origin is 0 throughout. The restriction vector `g` therefore has
//! its ones at `ℓ(q+1)` for `ℓ = 0..r`, which is the 1-based set
//! `{(ℓ−1)(q+1)+1}` shifted down by one.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Column-major vectorisation.
pub fn vec(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec`].
pub fn unvec(v: &DVector<f64>, nrows: usize, ncols: usize) -> DMatrix<f64> {
    assert_eq!(v.len(), nrows * ncols, "unvec length mismatch");
    DMatrix::from_column_slice(nrows, ncols, v.as_slice())
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for j in 0..ac {
        for i in 0..ar {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            for l in 0..bc {
                for k in 0..br {
                    out[(i * br + k, j * bc + l)] = aij * b[(k, l)];
                }
            }
        }
    }
    out
}

/// `K_{m,n}` with `K vec(M) = vec(Mᵀ)` for every `m × n` matrix `M`.
pub fn commutation_matrix(m: usize, n: usize) -> DMatrix<f64> {
    let mut k = DMatrix::zeros(m * n, m * n);
    for i in 0..m {
        for j in 0..n {
            k[(j + n * i, i + m * j)] = 1.0;
        }
    }
    k
}

/// Canonical selection matrices `V₁ = [I | 0]` and `V₂ = [0 | I]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionPair {
    pub v1: DMatrix<f64>,
    pub v2: DMatrix<f64>,
}

impl SelectionPair {
    pub fn canonical(q: usize, q_gamma: usize) -> Self {
        assert!(q_gamma <= q);
        let mut v1 = DMatrix::zeros(q_gamma, q);
        let mut v2 = DMatrix::zeros(q - q_gamma, q);
        for i in 0..q_gamma {
            v1[(i, i)] = 1.0;
        }
        for i in 0..q - q_gamma {
            v2[(i, q_gamma + i)] = 1.0;
        }
        Self { v1, v2 }
    }
}

/// The linear restriction `vec(V₁ᵀA) = G vec(A₀) + g` that pins the top
/// `r × r` block of `A` to the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct RestrictionPair {
    pub g_mat: DMatrix<f64>,
    pub g_vec: DVector<f64>,
    pub q: usize,
    pub q_gamma: usize,
    pub r: usize,
}

impl RestrictionPair {
    /// `vec(V₁ᵀA)` for `A = [I_r; A₀]`.
    pub fn embed(&self, a0: &DMatrix<f64>) -> DVector<f64> {
        &self.g_mat * vec(a0) + &self.g_vec
    }
}

/// Builds `(G, g)` for a response vector of length `q`, a low-rank group of
/// size `q_gamma` and rank `r`. Requires `1 ≤ r < q_gamma ≤ q`.
pub fn build_restrictions(q: usize, q_gamma: usize, r: usize) -> Result<RestrictionPair> {
    if r == 0 || r >= q_gamma {
        return Err(Error::dimension(format!(
            "rank {r} must satisfy 1 <= r < q_gamma = {q_gamma}"
        )));
    }
    if q_gamma > q {
        return Err(Error::dimension(format!("q_gamma {q_gamma} exceeds q {q}")));
    }
    let free = q_gamma - r;
    let mut g_mat = DMatrix::zeros(q * r, r * free);
    let mut g_vec = DVector::zeros(q * r);
    for l in 0..r {
        g_vec[l * (q + 1)] = 1.0;
        // block l: rows q·l + r .. q·l + q_gamma carry column l of A₀
        for i in 0..free {
            g_mat[(q * l + r + i, l * free + i)] = 1.0;
        }
    }
    Ok(RestrictionPair {
        g_mat,
        g_vec,
        q,
        q_gamma,
        r,
    })
}

/// Block-diagonal covariance `Σ̃ₖ`: one `q × q` block per time point, stored
/// without the `(qT)²` zeros.
#[derive(Debug, Clone)]
pub struct BlockSigma {
    blocks: Vec<DMatrix<f64>>,
    q: usize,
}

impl BlockSigma {
    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Dense `qT × qT` matrix in the response-major layout where entry
    /// `(t + iT, t + jT)` holds `Σ_t(i, j)`.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let t_len = self.blocks.len();
        let q = self.q;
        let mut out = DMatrix::zeros(q * t_len, q * t_len);
        for (t, b) in self.blocks.iter().enumerate() {
            for i in 0..q {
                for j in 0..q {
                    out[(t + i * t_len, t + j * t_len)] = b[(i, j)];
                }
            }
        }
        out
    }

    /// Blockwise inverse; the inverse of a block-diagonal matrix keeps the pattern.
    pub fn inverse(&self) -> Result<BlockSigma> {
        let blocks = self
            .blocks
            .iter()
            .map(|b| spd_inverse(b))
            .collect::<Result<Vec<_>>>()?;
        Ok(BlockSigma { blocks, q: self.q })
    }

    pub fn log_det(&self) -> Result<f64> {
        self.blocks.iter().try_fold(0.0, |acc, b| {
            let c = Cholesky::new(b.clone())
                .ok_or_else(|| Error::numerical("block is not positive definite"))?;
            Ok(acc + chol_log_det(&c))
        })
    }
}

/// Scatters per-time covariances into the block pattern of `Σ̃ₖ`.
pub fn scatter_sigma(per_time: &[DMatrix<f64>], t_k: usize) -> Result<BlockSigma> {
    if per_time.len() != t_k {
        return Err(Error::dimension(format!(
            "expected {t_k} covariance blocks, got {}",
            per_time.len()
        )));
    }
    let q = per_time.first().map(|m| m.nrows()).unwrap_or(0);
    for (t, m) in per_time.iter().enumerate() {
        if m.nrows() != q || m.ncols() != q {
            return Err(Error::dimension(format!("block {t} is not {q}x{q}")));
        }
        if !is_symmetric(m, 1e-10) {
            return Err(Error::numerical(format!("block {t} is not symmetric")));
        }
        if Cholesky::new(m.clone()).is_none() {
            return Err(Error::numerical(format!("block {t} is not positive definite")));
        }
    }
    Ok(BlockSigma {
        blocks: per_time.to_vec(),
        q,
    })
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = m.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > tol * scale {
                return false;
            }
        }
    }
    true
}

pub fn chol_log_det(c: &Cholesky<f64, Dyn>) -> f64 {
    let l = c.l_dirty();
    (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
}

pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Cholesky::new(m.clone())
        .map(|c| c.inverse())
        .ok_or_else(|| Error::numerical("matrix is not positive definite"))
}

/// Cholesky with diagonal jitter escalation. Returns the factor and the
/// jitter that was finally added (0 when the plain factorisation succeeded).
pub fn cholesky_with_jitter(
    m: &DMatrix<f64>,
    start: f64,
    max: f64,
) -> Option<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Some((c, 0.0));
    }
    let mut jitter = start;
    while jitter <= max * (1.0 + 1e-12) {
        let mut tried = m.clone();
        for i in 0..tried.nrows() {
            tried[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(tried) {
            return Some((c, jitter));
        }
        jitter *= 10.0;
    }
    None
}

/// Minimum-norm solution of `M x = b` for a symmetric PSD `M`: eigenvalues
/// below `1e-10·λ_max` are treated as zero. The flag reports whether any were
/// dropped. `None` if `M` is zero or not finite.
pub fn solve_psd_min_norm(m: &DMatrix<f64>, b: &DVector<f64>) -> Option<(DVector<f64>, bool)> {
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let top_diag = m.diagonal().amax();
    if let Some(c) = Cholesky::new(m.clone()) {
        let l = c.l_dirty();
        let min_pivot = (0..m.nrows()).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
        if min_pivot > 1e-8 * top_diag {
            return Some((c.solve(b), false));
        }
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let top = eig.eigenvalues.amax();
    if !(top > 0.0) {
        return None;
    }
    let cut = 1e-10 * top;
    let proj = eig.eigenvectors.transpose() * b;
    let mut dropped = false;
    let scaled = DVector::from_fn(proj.len(), |i, _| {
        let l = eig.eigenvalues[i];
        if l > cut {
            proj[i] / l
        } else {
            dropped = true;
            0.0
        }
    });
    Some((&eig.eigenvectors * scaled, dropped))
}

pub fn standard_normal_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Gaussian in canonical form: precision `P` and linear term `b`, so that
/// the mean is `P⁻¹b`.
#[derive(Debug, Clone)]
pub struct GaussianConditional {
    pub mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl GaussianConditional {
    pub fn from_precision(precision: &DMatrix<f64>, linear: &DVector<f64>) -> Result<Self> {
        let scale = precision.diagonal().amax().max(1e-300);
        let (chol, _) = cholesky_with_jitter(precision, 1e-12 * scale, 1e-6 * scale)
            .ok_or_else(|| Error::numerical("posterior precision is not positive definite"))?;
        let mean = chol.solve(linear);
        Ok(Self { mean, chol })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// `mean + L⁻ᵀ z` with `P = LLᵀ`, which has covariance `P⁻¹`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = standard_normal_vector(self.dim(), rng);
        // the triangular solve reads only the lower triangle of l_dirty
        let shift = self.chol.l_dirty().tr_solve_lower_triangular(&z).unwrap_or(z);
        &self.mean + shift
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Normalises log-weights into probabilities. Returns `None` when every
/// weight is `-inf` or any is NaN.
pub fn normalize_log_weights(logw: &[f64]) -> Option<Vec<f64>> {
    if logw.iter().any(|v| v.is_nan()) {
        return None;
    }
    let lse = log_sum_exp(logw);
    if !lse.is_finite() {
        return None;
    }
    Some(logw.iter().map(|v| (v - lse).exp()).collect())
}

/// Draws an index from unnormalised log-weights.
pub fn sample_log_categorical<R: Rng + ?Sized>(logw: &[f64], rng: &mut R) -> Option<usize> {
    let probs = normalize_log_weights(logw)?;
    Some(sample_categorical(&probs, rng))
}

pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the cumulative sum; take the last positive entry
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}
