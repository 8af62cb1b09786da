use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use msprr::covariance::dense_stats;
use msprr::discrete::{is_valid_gamma, msss_step, neighborhood};
use msprr::gp::build_kernel;
use msprr::grrr::{solve, GrrrProblem};
use msprr::linalg::{build_restrictions, commutation_matrix, log_sum_exp, scatter_sigma, unvec, vec};
use msprr::metrics::{classification_scores, mspe};
use msprr::state::assemble_loading;
use msprr::Dataset;

fn randn(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn spd(q: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let m = randn(q, q, rng);
    &m * m.transpose() + DMatrix::identity(q, q) * 0.5
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn commutation_transposes_and_inverts(m in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = randn(m, n, &mut rng);
        let k = commutation_matrix(m, n);
        prop_assert_eq!(&k * vec(&a), vec(&a.transpose()));
        prop_assert_eq!(&k * commutation_matrix(n, m), DMatrix::identity(m * n, m * n));
        prop_assert_eq!(unvec(&vec(&a), m, n), a);
    }

    #[test]
    fn restriction_embeds_the_loading(q in 3usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let qg = rng.random_range(2..q);
        let r = rng.random_range(1..qg);
        let res = build_restrictions(q, qg, r).unwrap();
        let a0 = randn(qg - r, r, &mut rng);
        // V₁ᵀ A as a q × r matrix
        let mut full = DMatrix::zeros(q, r);
        full.view_mut((0, 0), (qg, r)).copy_from(&assemble_loading(&a0, r));
        prop_assert!((res.embed(&a0) - vec(&full)).amax() < 1e-14);
    }

    #[test]
    fn scatter_inverts_blockwise(q in 1usize..4, t in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks: Vec<_> = (0..t).map(|_| spd(q, &mut rng)).collect();
        let s = scatter_sigma(&blocks, t).unwrap();
        let dense = s.to_dense();
        let inv = s.inverse().unwrap().to_dense();
        prop_assert!((&dense * &inv - DMatrix::identity(q * t, q * t)).amax() < 1e-8);
    }

    #[test]
    fn log_sum_exp_is_shift_equivariant(xs in prop::collection::vec(-50.0f64..50.0, 1..10), c in -100.0f64..100.0) {
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        prop_assert!((log_sum_exp(&shifted) - log_sum_exp(&xs) - c).abs() < 1e-9);
        prop_assert!(log_sum_exp(&xs) >= xs.iter().cloned().fold(f64::MIN, f64::max));
    }

    #[test]
    fn mspe_is_zero_on_the_diagonal_and_quadratic(seed in any::<u64>(), s in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = randn(6, 4, &mut rng);
        let d = randn(6, 4, &mut rng);
        prop_assert_eq!(mspe(&m, &m).unwrap(), 0.0);
        let base = mspe(&(&m + &d), &m).unwrap();
        let scaled = mspe(&(&m + &d * s), &m).unwrap();
        prop_assert!((scaled - s * s * base).abs() < 1e-9 * scaled.max(1.0));
    }

    #[test]
    fn classification_scores_are_bounded(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..40)) {
        let (est, truth): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
        let (acc, f1) = classification_scores(&est, &truth).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));
        prop_assert!((0.0..=1.0).contains(&f1));
        let mut est2 = est.clone();
        let mut truth2 = truth.clone();
        est2.extend([false; 5]);
        truth2.extend([false; 5]);
        // agreeing negatives leave precision and recall alone
        prop_assert!((classification_scores(&est2, &truth2).unwrap().1 - f1).abs() < 1e-12);
    }

    #[test]
    fn msss_stays_in_the_valid_set(bits in prop::collection::vec(any::<bool>(), 4..8), seed in any::<u64>()) {
        prop_assume!(is_valid_gamma(&bits));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = |g: &[bool]| Ok(g.iter().enumerate().filter(|(_, v)| **v).map(|(i, _)| i as f64 * 0.7).sum::<f64>());
        let mut g = bits;
        for _ in 0..20 {
            g = msss_step(&g, target, &mut rng).unwrap().gamma;
            prop_assert!(is_valid_gamma(&g));
        }
        for nb in neighborhood(&g).members {
            prop_assert!(is_valid_gamma(&nb));
        }
    }

    #[test]
    fn kernel_is_positive_definite(t in 1usize..12, p in 1usize..4, zeta in 0.05f64..10.0, s2 in 0.01f64..10.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(t, p, &mut rng);
        let k = build_kernel(&x, s2, zeta, 1e-8 * s2).unwrap();
        prop_assert!(k.log_det().is_finite());
        let sym = k.inverse();
        prop_assert!((&sym - sym.transpose()).amax() < 1e-6 * sym.amax().max(1.0));
    }

    #[test]
    fn csv_round_trip(seed in any::<u64>(), t in 3usize..12, q in 1usize..4, p in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Dataset::new(randn(t, q, &mut rng), randn(t, p, &mut rng)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        data.write_csv(&path).unwrap();
        prop_assert_eq!(Dataset::read_csv(&path).unwrap(), data);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn grrr_traces_never_decrease(seed in any::<u64>(), noise in 0.01f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, p, q) = (20, 3, 4);
        let qg = rng.random_range(2..q);
        let r = rng.random_range(1..qg.min(p));
        let x = randn(t, p, &mut rng);
        let a = assemble_loading(&randn(qg - r, r, &mut rng), r);
        let b = randn(p, r, &mut rng);
        let mut y = randn(t, q, &mut rng) * noise;
        let low = &x * &b * a.transpose();
        for i in 0..qg {
            for s in 0..t {
                y[(s, i)] += low[(s, i)];
            }
        }
        let l = randn(q * t, q * t, &mut rng) * 0.1;
        let sigma = &l * l.transpose() + DMatrix::identity(q * t, q * t);
        let stats = dense_stats(&y, &x, &sigma, qg).unwrap();
        let sol = solve(&GrrrProblem::new(&stats, r).unwrap(), 1e-8, 300).unwrap();
        prop_assert!(sol.is_monotone());
        prop_assert!(sol.loglik.is_finite());
        let theta = msprr::grrr::theta_of(&sol, q);
        prop_assert!((stats.log_lik(&theta) - sol.loglik).abs() < 1e-6 * sol.loglik.abs().max(1.0));
        prop_assert_eq!(sol.a_hat.rows(0, r).clone_owned(), DMatrix::<f64>::identity(r, r));
    }
}
