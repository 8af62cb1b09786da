//! Hidden-state path: emission densities, forward-filtering backward
//! sampling, and label identification.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gp::{build_kernel, default_jitter};
use crate::linalg::{log_sum_exp, sample_log_categorical};
use crate::state::{times_of, ChainState, StateParams};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// GP values of a state at arbitrary time points: its own values where it
/// has them, the posterior-predictive mean elsewhere.
pub fn gp_values_at(st: &StateParams, own_times: &[usize], data: &Dataset, at: &[usize]) -> Result<DMatrix<f64>> {
    let m = st.f.ncols();
    let mut out = DMatrix::zeros(at.len(), m);
    let missing: Vec<usize> = (0..at.len()).filter(|&i| own_times.binary_search(&at[i]).is_err()).collect();
    for (i, &t) in at.iter().enumerate() {
        if let Ok(row) = own_times.binary_search(&t) {
            out.set_row(i, &st.f.row(row));
        }
    }
    if !missing.is_empty() && !own_times.is_empty() && m > 0 {
        let x_train = data.x.select_rows(own_times);
        let x_new = data.x.select_rows(missing.iter().map(|&i| &at[i]));
        let kernel = build_kernel(&x_train, st.sigma2_f, st.zeta, default_jitter(st.sigma2_f))?;
        let pred = kernel.predict_mean(&x_train, &x_new, &st.f);
        for (r, &i) in missing.iter().enumerate() {
            out.set_row(i, &pred.row(r));
        }
    }
    Ok(out)
}

/// Mean of `y_t` under state `k` at every time point (`T × q`).
pub fn state_mean_path(chain: &ChainState, data: &Dataset, k: usize) -> Result<DMatrix<f64>> {
    let st = &chain.states[k];
    let all: Vec<usize> = (0..data.t()).collect();
    let f = gp_values_at(st, &chain.times(k), data, &all)?;
    let coef = crate::continuous::embed_coef(&st.coef(), &st.gamma);
    let mut mean = &data.x * coef;
    for (i, j) in st.flexible().into_iter().enumerate() {
        mean.set_column(j, &f.column(i));
    }
    Ok(mean)
}

/// `log N(y; mean, W⁻¹ diag(e^h) W⁻ᵀ)`.
pub fn gaussian_loglik(y: &[f64], mean: &[f64], w: &DMatrix<f64>, h: &[f64]) -> f64 {
    let q = y.len();
    let mut quad = 0.0;
    for j in 0..q {
        let u: f64 = (0..=j).map(|l| w[(j, l)] * (y[l] - mean[l])).sum();
        quad += u * u * (-h[j]).exp();
    }
    -0.5 * (q as f64 * LN_2PI + h.iter().sum::<f64>() + quad)
}

/// Log emission densities, `T × K`.
pub fn emission_loglik(chain: &ChainState, data: &Dataset) -> Result<DMatrix<f64>> {
    let means = (0..chain.k())
        .into_par_iter()
        .map(|k| state_mean_path(chain, data, k))
        .collect::<Result<Vec<_>>>()?;
    let (t_len, q) = (data.t(), data.q());
    Ok(DMatrix::from_fn(t_len, chain.k(), |t, k| {
        let y: Vec<f64> = (0..q).map(|j| data.y[(t, j)]).collect();
        let mu: Vec<f64> = (0..q).map(|j| means[k][(t, j)]).collect();
        let h: Vec<f64> = (0..q).map(|j| chain.h[(t, j)]).collect();
        gaussian_loglik(&y, &mu, &chain.w, &h)
    }))
}

/// Model log-likelihood `Σ_t log p(y_t | s_t, ·)`.
pub fn path_loglik(chain: &ChainState, data: &Dataset) -> Result<f64> {
    let em = emission_loglik(chain, data)?;
    Ok(chain.s.iter().enumerate().map(|(t, &k)| em[(t, k)]).sum())
}

/// Filtered log-probabilities `log p(s_t = k | y_{1:t})`, starting from a
/// uniform distribution.
pub fn forward_filter(log_em: &DMatrix<f64>, xi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (t_len, k) = log_em.shape();
    let log_xi = xi.map(f64::ln);
    let mut filt = DMatrix::zeros(t_len, k);
    let mut prev: Vec<f64> = vec![-(k as f64).ln(); k];
    for t in 0..t_len {
        let mut row: Vec<f64> = (0..k)
            .map(|j| {
                let pred = if t == 0 {
                    prev[j]
                } else {
                    log_sum_exp(&(0..k).map(|i| prev[i] + log_xi[(i, j)]).collect::<Vec<_>>())
                };
                pred + log_em[(t, j)]
            })
            .collect();
        let norm = log_sum_exp(&row);
        if !norm.is_finite() {
            return Err(Error::numerical(format!("no state can emit observation {}", t + 1)));
        }
        row.iter_mut().for_each(|v| *v -= norm);
        for j in 0..k {
            filt[(t, j)] = row[j];
        }
        prev = row;
    }
    Ok(filt)
}

pub fn ffbs<R: Rng + ?Sized>(log_em: &DMatrix<f64>, xi: &DMatrix<f64>, rng: &mut R) -> Result<Vec<usize>> {
    let filt = forward_filter(log_em, xi)?;
    let (t_len, k) = filt.shape();
    let mut s = vec![0; t_len];
    if t_len == 0 {
        return Ok(s);
    }
    let last: Vec<f64> = filt.row(t_len - 1).iter().copied().collect();
    s[t_len - 1] = sample_log_categorical(&last, rng).expect("normalised filter");
    for t in (0..t_len - 1).rev() {
        let next = s[t + 1];
        let w: Vec<f64> = (0..k).map(|j| filt[(t, j)] + xi[(j, next)].ln()).collect();
        s[t] = sample_log_categorical(&w, rng)
            .ok_or_else(|| Error::numerical(format!("backward pass stalled at t = {}", t + 1)))?;
    }
    Ok(s)
}

/// Moves each state's GP values onto a new allocation of time points,
/// keeping existing values and filling new points with the predictive mean.
pub fn reproject_gp(chain: &mut ChainState, data: &Dataset, new_s: &[usize]) -> Result<()> {
    for k in 0..chain.k() {
        let old = chain.times(k);
        let new = times_of(new_s, k);
        let f = gp_values_at(&chain.states[k], &old, data, &new)?;
        chain.states[k].f = f;
    }
    chain.s = new_s.to_vec();
    Ok(())
}

fn hamming(a: &[bool], b: &[bool]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| x != y).count() as f64
}

/// Row-softmax of `−D` for a 2 × 2 block of Hamming distances and the
/// resulting swap score `D₁₂ + D₂₁ − (D₁₁ + D₂₂)`.
pub fn swap_score(current: [&[bool]; 2], previous: [&[bool]; 2]) -> f64 {
    let mut dn = [[0.0; 2]; 2];
    for u in 0..2 {
        let row = [-hamming(current[u], previous[0]), -hamming(current[u], previous[1])];
        let lse = log_sum_exp(&row);
        for v in 0..2 {
            dn[u][v] = (row[v] - lse).exp();
        }
    }
    dn[0][1] + dn[1][0] - (dn[0][0] + dn[1][1])
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

/// New label order: `order[i]` is the old label that becomes label `i`.
pub fn relabel_order(chain: &ChainState, previous_gammas: &[Vec<bool>], d_val: f64) -> Vec<usize> {
    let counts = chain.counts();
    let key = |k: usize| (counts[k], chain.states[k].q_gamma());
    let mut order: Vec<usize> = (0..chain.k()).collect();
    order.sort_by(|&a, &b| key(b).cmp(&key(a)));
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && key(order[end]) == key(order[start]) {
            end += 1;
        }
        let group = order[start..end].to_vec();
        let prev = |pos: usize| previous_gammas[pos].as_slice();
        if group.len() == 2 {
            let cur = [chain.states[group[0]].gamma.as_slice(), chain.states[group[1]].gamma.as_slice()];
            if swap_score(cur, [prev(start), prev(start + 1)]) > d_val {
                order.swap(start, start + 1);
            }
        } else if group.len() > 2 {
            let cost = |perm: &[usize]| -> f64 {
                perm.iter()
                    .enumerate()
                    .map(|(i, &lab)| hamming(&chain.states[lab].gamma, prev(start + i)))
                    .sum()
            };
            let mut best = group.clone();
            let mut best_cost = cost(&group);
            for perm in permutations(&group) {
                let c = cost(&perm);
                if c < best_cost {
                    best_cost = c;
                    best = perm;
                }
            }
            order[start..end].copy_from_slice(&best);
        }
        start = end;
    }
    order
}

/// Relabels every per-state container so that old label `order[i]` becomes `i`.
pub fn apply_order(chain: &mut ChainState, order: &[usize]) {
    let k = chain.k();
    let mut inv = vec![0; k];
    for (i, &o) in order.iter().enumerate() {
        inv[o] = i;
    }
    chain.states = order.iter().map(|&o| chain.states[o].clone()).collect();
    chain.s.iter_mut().for_each(|v| *v = inv[*v]);
    chain.xi = DMatrix::from_fn(k, k, |i, j| chain.xi[(order[i], order[j])]);
}

pub fn relabel(chain: &mut ChainState, previous_gammas: &[Vec<bool>], d_val: f64) -> Vec<usize> {
    let order = relabel_order(chain, previous_gammas, d_val);
    apply_order(chain, &order);
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PriorConfig;
    use crate::state::init_state;
    use nalgebra::DVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn toy_data(t: usize, q: usize, p: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = DMatrix::from_fn(t, q, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = DMatrix::from_fn(t, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        Dataset::new(y, x).unwrap()
    }

    fn toy_chain(k: usize, seed: u64) -> (ChainState, Dataset) {
        let data = toy_data(40, 4, 3, seed);
        let mut chain = init_state(&PriorConfig::with_states(k), &data, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for st in &mut chain.states {
            st.b = DMatrix::from_fn(3, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
            st.a0 = DMatrix::from_fn(st.a0.nrows(), 1, |_, _| rng.sample::<f64, _>(StandardNormal));
            st.f = st.f.map(|_| rng.sample::<f64, _>(StandardNormal));
        }
        chain.w[(2, 0)] = 0.4;
        chain.w[(3, 1)] = -0.2;
        chain.h = DMatrix::from_fn(40, 4, |t, j| 0.1 * (t as f64 / 7.0).sin() - 0.05 * j as f64);
        (chain, data)
    }

    #[test]
    fn standard_normal_at_zero() {
        let w = DMatrix::identity(3, 3);
        let v = gaussian_loglik(&[0.0; 3], &[0.0; 3], &w, &[0.0; 3]);
        assert!((v + 1.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn emissions_match_dense_density() {
        let (chain, data) = toy_chain(2, 1);
        let em = emission_loglik(&chain, &data).unwrap();
        for k in 0..2 {
            let mean = state_mean_path(&chain, &data, k).unwrap();
            for t in [0, 7, 39] {
                let sigma = chain.sigma_at(t);
                let diff = DVector::from_fn(4, |j, _| data.y[(t, j)] - mean[(t, j)]);
                let chol = sigma.clone().cholesky().unwrap();
                let quad = diff.dot(&chol.solve(&diff));
                let oracle = -0.5 * (4.0 * LN_2PI + sigma.determinant().ln() + quad);
                assert!((em[(t, k)] - oracle).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn in_state_means_use_own_gp_values() {
        let (chain, data) = toy_chain(2, 2);
        let mean = state_mean_path(&chain, &data, 0).unwrap();
        let st = &chain.states[0];
        for (row, &t) in chain.times(0).iter().enumerate() {
            for (i, &j) in st.flexible().iter().enumerate() {
                assert_eq!(mean[(t, j)], st.f[(row, i)]);
            }
        }
        let fitted = chain.fitted_mean(&data);
        for &t in &chain.times(0) {
            for j in 0..4 {
                assert!((mean[(t, j)] - fitted[(t, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_state_column_is_model_loglik() {
        let (chain, data) = toy_chain(1, 3);
        let em = emission_loglik(&chain, &data).unwrap();
        assert!((em.column(0).sum() - path_loglik(&chain, &data).unwrap()).abs() < 1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(ffbs(&em, &chain.xi, &mut rng).unwrap().iter().all(|&v| v == 0));
    }

    #[test]
    fn filtered_rows_sum_to_one() {
        let em = DMatrix::from_fn(6, 3, |t, k| -((t + 2 * k) as f64).sqrt());
        let xi = DMatrix::from_row_slice(3, 3, &[0.8, 0.1, 0.1, 0.2, 0.7, 0.1, 0.3, 0.3, 0.4]);
        let f = forward_filter(&em, &xi).unwrap();
        for row in f.row_iter() {
            assert!((row.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ffbs_matches_enumeration() {
        let em: DMatrix<f64> = DMatrix::from_row_slice(4, 2, &[-0.2, -1.0, -0.9, -0.4, -0.1, -0.3, -2.0, -0.5]);
        let xi: DMatrix<f64> = DMatrix::from_row_slice(2, 2, &[0.7, 0.3, 0.25, 0.75]);
        let mut exact = vec![0.0; 16];
        for (code, slot) in exact.iter_mut().enumerate() {
            let s: Vec<usize> = (0..4).map(|t| code >> t & 1).collect();
            let mut lp = 0.5f64.ln() + em[(0, s[0])];
            for t in 1..4 {
                lp += xi[(s[t - 1], s[t])].ln() + em[(t, s[t])];
            }
            *slot = lp.exp();
        }
        let z: f64 = exact.iter().sum();
        exact.iter_mut().for_each(|v| *v /= z);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mut counts = vec![0usize; 16];
        for _ in 0..n {
            let s = ffbs(&em, &xi, &mut rng).unwrap();
            counts[(0..4).map(|t| s[t] << t).sum::<usize>()] += 1;
        }
        for (c, p) in counts.iter().zip(&exact) {
            let f = *c as f64 / n as f64;
            assert!((f - p).abs() <= 3.0 * (p * (1.0 - p) / n as f64).sqrt() + 1e-4, "{f} vs {p}");
        }
    }

    #[test]
    fn deterministic_emissions_force_the_path() {
        let pattern = [0, 1, 1, 0, 1];
        let em = DMatrix::from_fn(5, 2, |t, k| if pattern[t] == k { 0.0 } else { f64::NEG_INFINITY });
        let xi = DMatrix::from_element(2, 2, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            assert_eq!(ffbs(&em, &xi, &mut rng).unwrap(), pattern);
        }
    }

    #[test]
    fn impossible_observation_is_reported() {
        let em = DMatrix::from_element(3, 2, f64::NEG_INFINITY);
        let xi = DMatrix::from_element(2, 2, 0.5);
        assert!(forward_filter(&em, &xi).is_err());
    }

    fn two_state_chain(sizes: [usize; 2], gammas: [&str; 2]) -> ChainState {
        let data = toy_data(sizes[0] + sizes[1], 5, 6, 0);
        let mut chain = init_state(&PriorConfig::with_states(2), &data, 0).unwrap();
        chain.s = (0..sizes[0] + sizes[1]).map(|t| usize::from(t >= sizes[0])).collect();
        for (k, g) in gammas.iter().enumerate() {
            let gamma: Vec<bool> = g.chars().map(|c| c == '1').collect();
            let qg = gamma.iter().filter(|v| **v).count();
            chain.states[k].gamma = gamma;
            chain.states[k].a0 = DMatrix::zeros(qg - 1, 1);
            chain.states[k].f = DMatrix::zeros(sizes[k], 5 - qg);
        }
        chain.xi = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.3, 0.7]);
        chain
    }

    fn bits(s: &str) -> Vec<bool> {
        s.chars().map(|c| c == '1').collect()
    }

    #[test]
    fn larger_state_keeps_first_label() {
        let chain = two_state_chain([60, 40], ["11110", "11000"]);
        let prev = vec![bits("11110"), bits("11000")];
        assert_eq!(relabel_order(&chain, &prev, 0.0), vec![0, 1]);
        let chain = two_state_chain([40, 60], ["11110", "11000"]);
        assert_eq!(relabel_order(&chain, &prev, 0.0), vec![1, 0]);
    }

    #[test]
    fn equal_sizes_order_by_group_size() {
        let chain = two_state_chain([50, 50], ["11110", "11000"]);
        let prev = vec![bits("11000"), bits("11110")];
        assert_eq!(relabel_order(&chain, &prev, 0.0), vec![0, 1]);
        let chain = two_state_chain([50, 50], ["11000", "11110"]);
        assert_eq!(relabel_order(&chain, &prev, 0.0), vec![1, 0]);
    }

    #[test]
    fn swap_score_by_hand() {
        // current = (a, b), previous = (b, a) with Hamming(a, b) = 2:
        // each softmax row is (e⁻², 1)/(1 + e⁻²) so the score is (1 − e⁻²)·2/(1 + e⁻²)
        let a = bits("11100");
        let b = bits("11010");
        let e = (-2.0f64).exp();
        let expected = 2.0 * (1.0 - e) / (1.0 + e);
        assert!((swap_score([&a, &b], [&b, &a]) - expected).abs() < 1e-14);
        assert!(swap_score([&a, &b], [&a, &b]) < 0.0);
    }

    #[test]
    fn full_tie_swaps_back_to_previous_labels() {
        let mut chain = two_state_chain([50, 50], ["11100", "11010"]);
        let prev = vec![bits("11010"), bits("11100")];
        let ll_before = {
            let data = toy_data(100, 5, 6, 0);
            path_loglik(&chain, &data).unwrap()
        };
        let xi_before = chain.xi.clone();
        let order = relabel(&mut chain, &prev, 0.0);
        assert_eq!(order, vec![1, 0]);
        assert_eq!(chain.states[0].gamma, bits("11010"));
        assert_eq!(chain.xi[(0, 0)], xi_before[(1, 1)]);
        assert_eq!(chain.xi[(0, 1)], xi_before[(1, 0)]);
        let data = toy_data(100, 5, 6, 0);
        assert!((path_loglik(&chain, &data).unwrap() - ll_before).abs() < 1e-9);
        // applying again leaves everything in place
        let snapshot = chain.clone();
        assert_eq!(relabel(&mut chain, &prev, 0.0), vec![0, 1]);
        assert_eq!(chain, snapshot);
    }

    #[test]
    fn three_way_tie_minimises_total_distance() {
        let data = toy_data(30, 5, 6, 0);
        let mut chain = init_state(&PriorConfig::with_states(3), &data, 0).unwrap();
        chain.s = (0..30).map(|t| t / 10).collect();
        let gs = ["11100", "11010", "11001"];
        for (k, g) in gs.iter().enumerate() {
            chain.states[k].gamma = bits(g);
            chain.states[k].a0 = DMatrix::zeros(2, 1);
            chain.states[k].f = DMatrix::zeros(10, 2);
        }
        let prev = vec![bits("11001"), bits("11100"), bits("11010")];
        let order = relabel(&mut chain, &prev, 0.0);
        assert_eq!(order, vec![2, 0, 1]);
        assert_eq!(relabel(&mut chain, &prev, 0.0), vec![0, 1, 2]);
    }

    #[test]
    fn reprojection_keeps_existing_values() {
        let (mut chain, data) = toy_chain(2, 4);
        let old_t = chain.times(0);
        let old_f = chain.states[0].f.clone();
        let mut new_s = chain.s.clone();
        new_s[old_t[0]] = 1;
        let moved = chain.times(1)[0];
        new_s[moved] = 0;
        reproject_gp(&mut chain, &data, &new_s).unwrap();
        let new_t = chain.times(0);
        for (row, &t) in new_t.iter().enumerate() {
            if let Ok(r) = old_t.binary_search(&t) {
                assert_eq!(chain.states[0].f.row(row), old_f.row(r));
            }
        }
        assert_eq!(chain.states[0].f.nrows(), new_t.len());
        assert!(chain.check_structure(40, 3, 4).is_ok());
    }
}
