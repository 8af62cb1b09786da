//! The mutable chain state: one full draw of every latent quantity.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::PriorConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{component, stream_rng};

/// Parameters attached to one hidden state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateParams {
    /// `true` marks a response in the low-rank group.
    pub gamma: Vec<bool>,
    pub rank: usize,
    /// Free block of the loading matrix, `(q_γ − r) × r`.
    pub a0: DMatrix<f64>,
    /// Coefficient factor, `p × r`.
    pub b: DMatrix<f64>,
    /// GP values at the state's own time points (ascending), one column per
    /// flexible response.
    pub f: DMatrix<f64>,
    pub rho: f64,
    pub sigma2_f: f64,
    pub zeta: f64,
}

impl StateParams {
    pub fn q(&self) -> usize {
        self.gamma.len()
    }

    pub fn q_gamma(&self) -> usize {
        self.gamma.iter().filter(|g| **g).count()
    }

    pub fn low_rank(&self) -> Vec<usize> {
        low_rank_indices(&self.gamma)
    }

    pub fn flexible(&self) -> Vec<usize> {
        (0..self.q()).filter(|&j| !self.gamma[j]).collect()
    }

    /// Loading matrix `A = [I_r; A₀]`, `q_γ × r`.
    pub fn loading(&self) -> DMatrix<f64> {
        assemble_loading(&self.a0, self.rank)
    }

    /// `C = B Aᵀ`, `p × q_γ`; column `i` belongs to the `i`-th low-rank response.
    pub fn coef(&self) -> DMatrix<f64> {
        &self.b * self.loading().transpose()
    }
}

pub fn low_rank_indices(gamma: &[bool]) -> Vec<usize> {
    (0..gamma.len()).filter(|&j| gamma[j]).collect()
}

/// Low-rank responses first, then flexible ones, each ascending.
pub fn gamma_permutation(gamma: &[bool]) -> Vec<usize> {
    let mut perm = low_rank_indices(gamma);
    perm.extend((0..gamma.len()).filter(|&j| !gamma[j]));
    perm
}

pub fn assemble_loading(a0: &DMatrix<f64>, r: usize) -> DMatrix<f64> {
    let qg = a0.nrows() + r;
    let mut a = DMatrix::zeros(qg, r);
    a.view_mut((0, 0), (r, r)).fill_with_identity();
    a.view_mut((r, 0), (qg - r, r)).copy_from(a0);
    a
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    /// State label per time point, 0-based.
    pub s: Vec<usize>,
    pub states: Vec<StateParams>,
    /// Row-stochastic transition matrix.
    pub xi: DMatrix<f64>,
    /// Unit lower-triangular factor with `Σ_t = W⁻¹ D_t W⁻ᵀ`.
    pub w: DMatrix<f64>,
    /// Log-variances, `T × q`.
    pub h: DMatrix<f64>,
    pub h0: DVector<f64>,
    pub sigma2_sv: DVector<f64>,
}

impl ChainState {
    pub fn k(&self) -> usize {
        self.states.len()
    }

    pub fn t(&self) -> usize {
        self.s.len()
    }

    pub fn q(&self) -> usize {
        self.w.nrows()
    }

    pub fn times(&self, k: usize) -> Vec<usize> {
        times_of(&self.s, k)
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.k()];
        for &st in &self.s {
            c[st] += 1;
        }
        c
    }

    /// `Σ_t = W⁻¹ D_t W⁻ᵀ`.
    pub fn sigma_at(&self, t: usize) -> DMatrix<f64> {
        let w_inv = self.w_inverse();
        let d = DMatrix::from_diagonal(&self.h.row(t).transpose().map(f64::exp));
        &w_inv * d * w_inv.transpose()
    }

    pub fn sigmas(&self, times: &[usize]) -> Vec<DMatrix<f64>> {
        let w_inv = self.w_inverse();
        times
            .iter()
            .map(|&t| {
                let d = DMatrix::from_diagonal(&self.h.row(t).transpose().map(f64::exp));
                &w_inv * d * w_inv.transpose()
            })
            .collect()
    }

    pub fn w_inverse(&self) -> DMatrix<f64> {
        let q = self.q();
        self.w
            .clone()
            .solve_lower_triangular(&DMatrix::identity(q, q))
            .expect("unit-diagonal W is invertible")
    }

    /// Whether every time point shares the same covariance, which holds for
    /// the constant-volatility variant.
    pub fn has_constant_volatility(&self) -> bool {
        let t = self.t();
        (1..t).all(|i| self.h.row(i) == self.h.row(0))
    }

    /// Conditional mean of `y_t` given `s_t`, using the state's own GP values.
    pub fn fitted_mean(&self, data: &Dataset) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(data.t(), data.q());
        for (k, st) in self.states.iter().enumerate() {
            let times = self.times(k);
            let coef = st.coef();
            let lr = st.low_rank();
            let flex = st.flexible();
            for (row, &t) in times.iter().enumerate() {
                let xt = data.x.row(t);
                for (i, &j) in lr.iter().enumerate() {
                    m[(t, j)] = (xt * coef.column(i))[(0, 0)];
                }
                for (i, &j) in flex.iter().enumerate() {
                    m[(t, j)] = st.f[(row, i)];
                }
            }
        }
        m
    }

    /// Structural invariants of a chain state for data of shape `(T, p, q)`.
    pub fn check_structure(&self, t_len: usize, p: usize, q: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Dimension(m));
        if self.s.len() != t_len {
            return fail(format!("s has length {} instead of {t_len}", self.s.len()));
        }
        let k = self.k();
        if self.s.iter().any(|&v| v >= k) {
            return fail("s contains an out-of-range label".into());
        }
        if self.xi.shape() != (k, k) {
            return fail("transition matrix has the wrong shape".into());
        }
        for row in self.xi.row_iter() {
            if (row.sum() - 1.0).abs() > 1e-9 || row.iter().any(|v| *v < 0.0) {
                return fail("transition matrix is not row-stochastic".into());
            }
        }
        if self.w.shape() != (q, q) || self.h.shape() != (t_len, q) {
            return fail("volatility block has the wrong shape".into());
        }
        for i in 0..q {
            if self.w[(i, i)] != 1.0 || (i + 1..q).any(|j| self.w[(i, j)] != 0.0) {
                return fail("W is not unit lower-triangular".into());
            }
        }
        let counts = self.counts();
        for (kk, st) in self.states.iter().enumerate() {
            let qg = st.q_gamma();
            if st.gamma.len() != q || qg <= 1 || qg >= q {
                return fail(format!("state {kk}: invalid allocation"));
            }
            if st.rank == 0 || st.rank >= qg.min(p) {
                return fail(format!("state {kk}: invalid rank {}", st.rank));
            }
            if st.a0.shape() != (qg - st.rank, st.rank) || st.b.shape() != (p, st.rank) {
                return fail(format!("state {kk}: coefficient shapes"));
            }
            if st.f.shape() != (counts[kk], q - qg) {
                return fail(format!("state {kk}: GP block shape"));
            }
            if !(st.rho > 0.0 && st.rho < 1.0 && st.sigma2_f > 0.0 && st.zeta > 0.0) {
                return fail(format!("state {kk}: scalar parameter out of range"));
            }
        }
        Ok(())
    }
}

pub fn times_of(s: &[usize], k: usize) -> Vec<usize> {
    (0..s.len()).filter(|&t| s[t] == k).collect()
}

/// Initial chain state. Labels are drawn uniformly and then moved until
/// every state owns at least `max(p, q) + 2` time points.
pub fn init_state(config: &PriorConfig, data: &Dataset, seed: u64) -> Result<ChainState> {
    let (t_len, p, q, k) = (data.t(), data.p(), data.q(), config.k);
    let need = p.max(q) + 2;
    if t_len < k * need {
        return Err(Error::Infeasible(format!(
            "T = {t_len} cannot give each of {k} states at least {need} time points"
        )));
    }
    let mut rng = stream_rng(seed, 0, component::INIT);
    let mut s: Vec<usize> = (0..t_len).map(|_| rng.random_range(0..k)).collect();
    loop {
        let mut counts = vec![0usize; k];
        for &v in &s {
            counts[v] += 1;
        }
        let Some(short) = (0..k).find(|&j| counts[j] < need) else {
            break;
        };
        let donor = (0..k).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
        let pool = times_of(&s, donor);
        let t = pool[rng.random_range(0..pool.len())];
        s[t] = short;
    }
    let mut states = Vec::with_capacity(k);
    for kk in 0..k {
        let mut gamma = vec![true; q];
        let mut order: Vec<usize> = (0..q).collect();
        order.shuffle(&mut rng);
        gamma[order[0]] = false;
        let t_k = s.iter().filter(|&&v| v == kk).count();
        states.push(StateParams {
            gamma,
            rank: 1,
            a0: DMatrix::zeros(q - 2, 1),
            b: DMatrix::zeros(p, 1),
            f: DMatrix::zeros(t_k, 1),
            rho: 0.5,
            sigma2_f: 1.0,
            zeta: 1.0,
        });
    }
    let d = config.dirichlet();
    let total: f64 = d.iter().sum();
    let xi = DMatrix::from_fn(k, k, |_, j| d[j] / total);
    Ok(ChainState {
        s,
        states,
        xi,
        w: DMatrix::identity(q, q),
        h: DMatrix::zeros(t_len, q),
        h0: DVector::zeros(q),
        sigma2_sv: DVector::from_element(q, 0.1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_data(t: usize, p: usize, q: usize) -> Dataset {
        let y = DMatrix::from_fn(t, q, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0);
        let x = DMatrix::from_fn(t, p, |i, j| ((i * 5 + j) % 13) as f64 / 13.0);
        Dataset::new(y, x).unwrap()
    }

    #[test]
    fn single_state_owns_everything() {
        let st = init_state(&PriorConfig::with_states(1), &toy_data(100, 5, 5), 1).unwrap();
        assert!(st.s.iter().all(|&v| v == 0));
        st.check_structure(100, 5, 5).unwrap();
    }

    #[test]
    fn init_is_deterministic_and_valid() {
        let data = toy_data(100, 5, 5);
        let cfg = PriorConfig::with_states(2);
        let a = init_state(&cfg, &data, 42).unwrap();
        let b = init_state(&cfg, &data, 42).unwrap();
        assert_eq!(a, b);
        a.check_structure(100, 5, 5).unwrap();
        assert!(a.counts().iter().all(|&c| c >= 7));
        for st in &a.states {
            assert_eq!(st.q_gamma(), 4);
            assert_eq!(st.rank, 1);
        }
    }

    #[test]
    fn too_short_series_is_infeasible() {
        let err = init_state(&PriorConfig::with_states(2), &toy_data(10, 5, 5), 0).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)));
    }

    #[test]
    fn minimum_occupancy_enforced_at_boundary() {
        let data = toy_data(14, 5, 5);
        let st = init_state(&PriorConfig::with_states(2), &data, 3).unwrap();
        assert_eq!(st.counts(), vec![7, 7]);
    }

    #[test]
    fn sigma_matches_factorisation() {
        let data = toy_data(20, 3, 3);
        let mut st = init_state(&PriorConfig::with_states(1), &data, 0).unwrap();
        st.w[(1, 0)] = 0.5;
        st.w[(2, 1)] = -0.3;
        st.h[(4, 2)] = 0.7;
        let sigma = st.sigma_at(4);
        let back = &st.w * sigma * st.w.transpose();
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 0.7f64.exp()]));
        assert!((back - d).amax() < 1e-12);
    }

    #[test]
    fn serde_round_trip_is_bit_exact() {
        let data = toy_data(30, 3, 4);
        let mut st = init_state(&PriorConfig::with_states(2), &data, 9).unwrap();
        st.states[0].b[(0, 0)] = 0.1 + 0.2;
        st.h[(3, 1)] = std::f64::consts::PI / 7.0;
        st.sigma2_sv[2] = 1e-300;
        let text = serde_json::to_string(&st).unwrap();
        let back: ChainState = serde_json::from_str(&text).unwrap();
        assert_eq!(back, st);
        assert_eq!(back.h[(3, 1)].to_bits(), st.h[(3, 1)].to_bits());
    }

    #[test]
    fn permutation_puts_low_rank_first() {
        assert_eq!(gamma_permutation(&[false, true, true, false, true]), vec![1, 2, 4, 0, 3]);
    }
}
