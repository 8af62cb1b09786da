//! Gaussian and inverse-Wishart conditionals: loading and coefficient
//! factors, the Cholesky-type factor `W`, and the constant-volatility
//! covariance draw.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::covariance::GlsStats;
use crate::error::{Error, Result};
use crate::linalg::GaussianConditional;

/// Active block of the statistics: `(G, h)` indexed by `i + q_γ·a`.
fn active_block(stats: &GlsStats) -> (DMatrix<f64>, DVector<f64>) {
    let idx = stats.active();
    let g = stats.gram.select_rows(&idx).select_columns(&idx);
    let h = DVector::from_iterator(idx.len(), idx.iter().map(|&i| stats.cross[i]));
    (g, h)
}

/// Design mapping `vec(A)` (`q_γ × r`, column-major) to the active
/// coefficients for fixed `B`.
pub fn loading_design(b: &DMatrix<f64>, q_gamma: usize) -> DMatrix<f64> {
    let (p, r) = b.shape();
    let mut z = DMatrix::zeros(q_gamma * p, q_gamma * r);
    for a in 0..p {
        for i in 0..q_gamma {
            for l in 0..r {
                z[(i + q_gamma * a, i + q_gamma * l)] = b[(a, l)];
            }
        }
    }
    z
}

/// Design mapping `vec(B)` (`p × r`, column-major) to the active
/// coefficients for fixed `A`.
pub fn coefficient_design(a: &DMatrix<f64>, p: usize) -> DMatrix<f64> {
    let (q_gamma, r) = a.shape();
    let mut z = DMatrix::zeros(q_gamma * p, p * r);
    for a_ in 0..p {
        for i in 0..q_gamma {
            for l in 0..r {
                z[(i + q_gamma * a_, a_ + p * l)] = a[(i, l)];
            }
        }
    }
    z
}

/// Conditional of `vec(A₀)` given `B`: the identity block of `A` is held
/// fixed and the free rows get an `N(0, prior_var·I)` prior.
pub fn alpha_conditional(stats: &GlsStats, b: &DMatrix<f64>, prior_var: f64) -> Result<GaussianConditional> {
    let (g, h) = active_block(stats);
    let qg = stats.q_gamma;
    let r = b.ncols();
    if r == 0 || r >= qg || b.nrows() != stats.p {
        return Err(Error::dimension("B must be p × r with 0 < r < q_γ"));
    }
    let za = loading_design(b, qg);
    let free: Vec<usize> = (0..r).flat_map(|l| (r..qg).map(move |i| i + qg * l)).collect();
    let fixed: Vec<usize> = (0..r).flat_map(|l| (0..r).map(move |i| i + qg * l)).collect();
    let v = DVector::from_iterator(fixed.len(), fixed.iter().map(|&j| f64::from(u8::from(j % qg == j / qg))));
    let hh = za.transpose() * &g * &za;
    let m = za.transpose() * h;
    let mut prec = hh.select_rows(&free).select_columns(&free);
    for d in 0..free.len() {
        prec[(d, d)] += 1.0 / prior_var;
    }
    let cross = hh.select_rows(&free).select_columns(&fixed);
    let lin = DVector::from_iterator(free.len(), free.iter().map(|&j| m[j])) - cross * v;
    GaussianConditional::from_precision(&prec, &lin)
}

pub fn sample_alpha<R: Rng + ?Sized>(
    stats: &GlsStats,
    b: &DMatrix<f64>,
    prior_var: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let r = b.ncols();
    let draw = alpha_conditional(stats, b, prior_var)?.sample(rng);
    Ok(DMatrix::from_column_slice(stats.q_gamma - r, r, draw.as_slice()))
}

/// Conditional of `vec(B)` given the full loading matrix `A`.
pub fn beta_conditional(stats: &GlsStats, a: &DMatrix<f64>, prior_var: f64) -> Result<GaussianConditional> {
    if a.nrows() != stats.q_gamma {
        return Err(Error::dimension("A must have q_γ rows"));
    }
    let (g, h) = active_block(stats);
    let zb = coefficient_design(a, stats.p);
    let mut prec = zb.transpose() * g * &zb;
    for d in 0..prec.nrows() {
        prec[(d, d)] += 1.0 / prior_var;
    }
    GaussianConditional::from_precision(&prec, &(zb.transpose() * h))
}

pub fn sample_beta<R: Rng + ?Sized>(
    stats: &GlsStats,
    a: &DMatrix<f64>,
    prior_var: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let draw = beta_conditional(stats, a, prior_var)?.sample(rng);
    Ok(DMatrix::from_column_slice(stats.p, a.ncols(), draw.as_slice()))
}

/// Starting values after `(γ, r)` moved. `prev_full` is the previous
/// `p × q` coefficient matrix in response order (zero at flexible
/// responses); `C*` holds its columns at the responses low-rank under the new
/// `gamma`, in γ-order, and `B*` the first `r` of those.
pub fn bridge_coefficients(prev_full: &DMatrix<f64>, gamma: &[bool], r: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let cols: Vec<usize> = (0..gamma.len()).filter(|&j| gamma[j]).collect();
    let c_star = prev_full.select_columns(&cols);
    let b_star = c_star.columns(0, r.min(cols.len())).clone_owned();
    (c_star, b_star)
}

/// `p × q` coefficient matrix with the columns of `c` placed at the
/// low-rank responses and zeros elsewhere.
pub fn embed_coef(c: &DMatrix<f64>, gamma: &[bool]) -> DMatrix<f64> {
    let mut full = DMatrix::zeros(c.nrows(), gamma.len());
    for (i, j) in (0..gamma.len()).filter(|&j| gamma[j]).enumerate() {
        full.set_column(j, &c.column(i));
    }
    full
}

/// Conditional of the free entries in row `j` of `W` (`j ≥ 1`). `resid` is
/// the `T × q` residual `y − mean`, `log_var` the `T`-vector `h_j`.
pub fn w_row_conditional(
    resid: &DMatrix<f64>,
    log_var: &[f64],
    j: usize,
    prior_var: f64,
) -> Result<GaussianConditional> {
    if j == 0 || j >= resid.ncols() || log_var.len() != resid.nrows() {
        return Err(Error::dimension("W row index or log-variance length"));
    }
    let mut prec = DMatrix::identity(j, j) / prior_var;
    let mut lin = DVector::zeros(j);
    for (t, lv) in log_var.iter().enumerate() {
        let wt = (-lv).exp();
        let x = DVector::from_fn(j, |l, _| -resid[(t, l)]);
        prec.ger(wt, &x, &x, 1.0);
        lin.axpy(wt * resid[(t, j)], &x, 1.0);
    }
    GaussianConditional::from_precision(&prec, &lin)
}

pub fn sample_w<R: Rng + ?Sized>(
    resid: &DMatrix<f64>,
    h: &DMatrix<f64>,
    prior_var: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let q = resid.ncols();
    let mut w = DMatrix::identity(q, q);
    for j in 1..q {
        let lv: Vec<f64> = h.column(j).iter().copied().collect();
        let d = w_row_conditional(resid, &lv, j, prior_var)?.sample(rng);
        for l in 0..j {
            w[(j, l)] = d[l];
        }
    }
    Ok(w)
}

/// `Σ ~ IW(df, scale)` through a Bartlett draw of `Σ⁻¹ ~ Wishart(df, scale⁻¹)`.
pub fn sample_inverse_wishart<R: Rng + ?Sized>(df: f64, scale: &DMatrix<f64>, rng: &mut R) -> Result<DMatrix<f64>> {
    let q = scale.nrows();
    if df <= q as f64 - 1.0 {
        return Err(Error::Validation(crate::error::ValidationErrors::single(
            "iw_df",
            "degrees of freedom must exceed q − 1",
        )));
    }
    let scale_inv = crate::linalg::spd_inverse(scale)?;
    let l = scale_inv
        .cholesky()
        .ok_or_else(|| Error::numerical("inverse-Wishart scale not PD"))?
        .unpack();
    let mut a = DMatrix::zeros(q, q);
    for i in 0..q {
        let chi = ChiSquared::new(df - i as f64).map_err(|e| Error::numerical(e.to_string()))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let la = l * a;
    let precision = &la * la.transpose();
    crate::linalg::spd_inverse(&precision)
}

/// `Σ = W⁻¹ D W⁻ᵀ` with unit lower-triangular `W`; returns `(W, log diag D)`.
pub fn ldl_factor(sigma: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let q = sigma.nrows();
    let g = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numerical("covariance not PD"))?
        .unpack();
    let diag = g.diagonal();
    let unit = DMatrix::from_fn(q, q, |i, j| g[(i, j)] / diag[j]);
    let w = unit
        .solve_lower_triangular(&DMatrix::identity(q, q))
        .ok_or_else(|| Error::numerical("singular unit factor"))?;
    let mut w = w;
    for i in 0..q {
        w[(i, i)] = 1.0;
        for j in i + 1..q {
            w[(i, j)] = 0.0;
        }
    }
    Ok((w, diag.map(|v| 2.0 * v.ln())))
}

/// Constant-volatility covariance update: `Σ | · ~ IW(ν + T, Ψ + Σ_t ε_t ε_tᵀ)`.
pub fn sample_constant_sigma<R: Rng + ?Sized>(
    resid: &DMatrix<f64>,
    df: f64,
    scale: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let post_scale = scale + resid.transpose() * resid;
    sample_inverse_wishart(df + resid.nrows() as f64, &post_scale, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{conditional_stats, NoiseCov};
    use crate::linalg::{kron, vec};
    use crate::state::assemble_loading;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    fn toy(seed: u64, t: usize, p: usize, q: usize, gamma: &[bool]) -> GlsStats {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(t, p, &mut rng);
        let y = randn(t, q, &mut rng);
        let s = DMatrix::from_fn(q, q, |i, j| if i == j { 1.0 } else { 0.3 });
        conditional_stats(&y, &x, &NoiseCov::Constant(s), gamma).unwrap()
    }

    #[test]
    fn designs_reproduce_vec_of_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (p, qg, r) = (4, 3, 2);
        let a = randn(qg, r, &mut rng);
        let b = randn(p, r, &mut rng);
        // active coefficients are vec(Cᵀ) with C = B Aᵀ
        let target = vec(&(a.clone() * b.transpose()));
        assert!((loading_design(&b, qg) * vec(&a) - &target).amax() < 1e-12);
        assert!((coefficient_design(&a, p) * vec(&b) - &target).amax() < 1e-12);
        // (B ⊗ I) and (I ⊗ A) written with Kronecker products
        assert!((loading_design(&b, qg) - kron(&b, &DMatrix::identity(qg, qg))).amax() < 1e-15);
    }

    /// Brute force: the joint Gaussian in all of `vec(A)` with a tight prior
    /// pinning the identity block, then read off the free block.
    #[test]
    fn alpha_mean_matches_dense_oracle() {
        let gamma = [true, true, true, true, false];
        let stats = toy(1, 40, 3, 5, &gamma);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = randn(3, 2, &mut rng);
        let cond = alpha_conditional(&stats, &b, 2.0).unwrap();

        let qg = 4;
        let (g, h) = active_block(&stats);
        let za = kron(&b, &DMatrix::identity(qg, qg));
        let prec = za.transpose() * &g * &za;
        let lin = za.transpose() * &h;
        let free: Vec<usize> = (0..2).flat_map(|l| (2..qg).map(move |i| i + qg * l)).collect();
        let fixed: Vec<usize> = (0..2).flat_map(|l| (0..2).map(move |i| i + qg * l)).collect();
        // mean of the free block given the fixed block = I (Gaussian conditioning)
        let v = DVector::from_vec(vec![1.0, 0.0, 0.0, 1.0]);
        let mut pff = prec.select_rows(&free).select_columns(&free);
        pff += DMatrix::identity(free.len(), free.len()) * 0.5;
        let pfx = prec.select_rows(&free).select_columns(&fixed);
        let lf = DVector::from_iterator(free.len(), free.iter().map(|&j| lin[j]));
        let oracle = pff.clone().lu().solve(&(lf - pfx * v)).unwrap();
        assert!((&cond.mean - &oracle).amax() < 1e-9);
        assert!((cond.covariance() - pff.try_inverse().unwrap()).amax() < 1e-9);
    }

    #[test]
    fn beta_posterior_mean_limits() {
        let gamma = [true, true, false];
        let stats = toy(3, 60, 2, 3, &gamma);
        let a = assemble_loading(&DMatrix::from_element(1, 1, 0.7), 1);
        // vanishing prior variance pulls to zero
        let tight = beta_conditional(&stats, &a, 1e-10).unwrap();
        assert!(tight.mean.amax() < 1e-6);
        // diffuse prior gives the GLS estimate for fixed A
        let diffuse = beta_conditional(&stats, &a, 1e12).unwrap();
        let (g, h) = active_block(&stats);
        let zb = coefficient_design(&a, 2);
        let gls = (zb.transpose() * &g * &zb).lu().solve(&(zb.transpose() * h)).unwrap();
        assert!((diffuse.mean - gls).amax() < 1e-6);
    }

    #[test]
    fn beta_sample_moments() {
        let gamma = [true, true, false];
        let stats = toy(4, 30, 2, 3, &gamma);
        let a = assemble_loading(&DMatrix::from_element(1, 1, -0.4), 1);
        let cond = beta_conditional(&stats, &a, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 20_000;
        let mut mean = DVector::zeros(2);
        for _ in 0..n {
            mean += sample_beta(&stats, &a, 2.0, &mut rng).unwrap().column(0);
        }
        mean /= n as f64;
        let sd = cond.covariance().diagonal().map(f64::sqrt);
        for i in 0..2 {
            assert!((mean[i] - cond.mean[i]).abs() < 5.0 * sd[i] / (n as f64).sqrt());
        }
    }

    #[test]
    fn bridge_follows_responses() {
        // previous γ = (1,0,1,1): columns at responses 0, 2, 3
        let prev = embed_coef(&DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), &[true, false, true, true]);
        let (cs, bs) = bridge_coefficients(&prev, &[true, true, false, true], 2);
        assert_eq!(cs, DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 3.0, 4.0, 0.0, 6.0]));
        assert_eq!(bs, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 4.0, 0.0]));
        let (cs, bs) = bridge_coefficients(&prev, &[true, false, true, true], 1);
        assert_eq!(embed_coef(&cs, &[true, false, true, true]), prev);
        assert_eq!(bs, DMatrix::from_row_slice(2, 1, &[1.0, 4.0]));
    }

    #[test]
    fn embed_places_low_rank_columns() {
        let c = DMatrix::from_row_slice(1, 2, &[7.0, 8.0]);
        let full = embed_coef(&c, &[false, true, false, true]);
        assert_eq!(full, DMatrix::from_row_slice(1, 4, &[0.0, 7.0, 0.0, 8.0]));
    }

    #[test]
    fn w_row_recovers_regression() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = 4000;
        let w_true = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.5, 1.0, 0.0, -0.3, 0.8, 1.0]);
        let h = DMatrix::from_fn(t, 3, |t, j| 0.3 * ((t as f64 / 50.0).sin() + j as f64 * 0.1));
        let u = DMatrix::from_fn(t, 3, |t, j| (0.5 * h[(t, j)]).exp() * rng.sample::<f64, _>(StandardNormal));
        let winv = w_true.clone().try_inverse().unwrap();
        let resid = u * winv.transpose();
        let w = sample_w(&resid, &h, 10.0, &mut rng).unwrap();
        assert!((w - w_true).amax() < 0.08);
    }

    #[test]
    fn ldl_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = randn(4, 4, &mut rng);
        let sigma = &m * m.transpose() + DMatrix::identity(4, 4);
        let (w, h) = ldl_factor(&sigma).unwrap();
        let winv = w.clone().try_inverse().unwrap();
        let back = &winv * DMatrix::from_diagonal(&h.map(f64::exp)) * winv.transpose();
        assert!((back - sigma).amax() < 1e-10);
        for i in 0..4 {
            assert_eq!(w[(i, i)], 1.0);
        }
    }

    #[test]
    fn inverse_wishart_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = 3;
        let df = 10.0;
        let scale = DMatrix::from_fn(q, q, |i, j| if i == j { 2.0 } else { 0.5 });
        let n = 20_000;
        let mut mean = DMatrix::zeros(q, q);
        for _ in 0..n {
            mean += sample_inverse_wishart(df, &scale, &mut rng).unwrap();
        }
        mean /= n as f64;
        let expected = &scale / (df - q as f64 - 1.0);
        assert!((mean - expected).amax() < 0.02, "IW mean off");
    }

    #[test]
    fn inverse_wishart_inverse_has_wishart_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (q, df) = (3, 9.0);
        let scale = DMatrix::from_fn(q, q, |i, j| if i == j { 2.0 } else { 0.5 });
        let s = scale.clone().try_inverse().unwrap();
        let n = 30_000;
        let draws: Vec<DMatrix<f64>> = (0..n)
            .map(|_| sample_inverse_wishart(df, &scale, &mut rng).unwrap().try_inverse().unwrap())
            .collect();
        for i in 0..q {
            for j in 0..q {
                let xs: Vec<f64> = draws.iter().map(|d| d[(i, j)]).collect();
                let m = xs.iter().sum::<f64>() / n as f64;
                let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n as f64 - 1.0);
                let var = df * (s[(i, j)].powi(2) + s[(i, i)] * s[(j, j)]);
                assert!((m - df * s[(i, j)]).abs() < 4.0 * (var / n as f64).sqrt(), "mean ({i},{j})");
                assert!((v / var - 1.0).abs() < 0.05, "variance ({i},{j}) {v} vs {var}");
            }
        }
    }

    #[test]
    fn inverse_wishart_rejects_low_df() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert!(sample_inverse_wishart(1.5, &DMatrix::identity(3, 3), &mut rng).is_err());
    }
}
