mod common;

use common::rng;
use maestrocut_core::allocator::{
    allocate, build_covariance, diagonal_objective, integer_project, spectral_bound, variance_bound, waterfill, Cadence,
    KernelParams, TailParams, Topology,
};
use maestrocut_core::drifttrack::KalmanState;
use maestrocut_core::selftest::{exhaustive_integer, numeric_minimizer, random_psd};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn reallocation_is_idempotent() {
    let topo = Topology::heavy_hex(3, 3).unwrap().with_spread_anchors(6).unwrap();
    let kernel = KernelParams::new(1.0, 0.5).unwrap();
    let tail = TailParams::new(0.05, 6.0).unwrap();
    let states: Vec<KalmanState> = [0.5, 1.0, 2.0, 4.0, 0.1, 3.0].iter().map(|&m| KalmanState::new(m, 0.2)).collect();
    let a = allocate(&states, &topo, &kernel, &tail, 32_000, 20).unwrap();
    let b = allocate(&states, &topo, &kernel, &tail, 32_000, 20).unwrap();
    assert_eq!(a.plan, b.plan);
    // projecting an integer plan again leaves it unchanged
    let again = integer_project(&a.plan.as_f64(), 32_000, &a.u, 20).unwrap();
    assert_eq!(again, a.plan);
}

#[test]
fn cadence_counts_events() {
    let mut c = Cadence::new(500).unwrap();
    assert_eq!(c.record(499), 0);
    assert_eq!(c.record(1), 1);
    assert_eq!(c.record(32_000), 64);
    assert_eq!(c.record(250), 0);
    assert_eq!(c.record(1250), 3);
    assert!(Cadence::new(0).is_err());
}

#[test]
fn two_fragment_covariance_has_closed_form_spectrum() {
    let path = Topology::from_edges(4, &[(0, 1), (1, 2), (2, 3)]).unwrap();
    let params = KernelParams::new(2.0, 1.5).unwrap();
    for (d, p) in [(1usize, 0.3), (3, 0.1), (2, 1e-3)] {
        let topo = path.clone().with_anchors(vec![0, d]).unwrap();
        let cov = build_covariance(&topo, &params, &[p, p]).unwrap();
        let off = 2.0 * (-(d as f64) / 1.5).exp();
        assert!((cov.sigma_tilde[(0, 1)] - off).abs() < 1e-15);
        // [[a, b], [b, a]] has eigenvalues a - b and a + b
        let a = 2.0 + p;
        assert!(a - off > 0.0);
        assert!((cov.lambda_max().unwrap() - (a + off)).abs() < 1e-12);
    }
}

#[test]
fn quadratic_form_matches_double_sum() {
    let mut r = rng(21);
    for _ in 0..200 {
        let cov = random_psd(4, &mut r);
        let u: Vec<f64> = (0..4).map(|_| r.random_range(0.0..3.0)).collect();
        let s: Vec<f64> = (0..4).map(|_| r.random_range(1.0..50.0)).collect();
        let mut direct = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                direct += u[i] * u[j] * cov.sigma_tilde[(i, j)] / (s[i] * s[j]);
            }
        }
        let got = variance_bound(&u, &s, &cov).unwrap();
        assert!((got - direct).abs() <= 1e-12 * direct.abs().max(1.0));
    }
}

#[test]
fn floor_binds_on_small_fragment() {
    let s = waterfill(&[1.0, 100.0], 10.0, 2.0).unwrap();
    let oracle = numeric_minimizer(&[1.0, 100.0], 10.0, 2.0);
    assert!((s[0] - 2.0).abs() < 1e-12 && (s[1] - 8.0).abs() < 1e-12);
    assert!((oracle[0] - 2.0).abs() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn spectral_bound_dominates(n in 1usize..=8, seed in any::<u64>()) {
        let mut r = rng(seed);
        let cov = random_psd(n, &mut r);
        let u: Vec<f64> = (0..n).map(|_| r.random_range(0.0..5.0)).collect();
        let s: Vec<f64> = (0..n).map(|_| r.random_range(1.0..100.0)).collect();
        let v = variance_bound(&u, &s, &cov).unwrap();
        prop_assert!(spectral_bound(&u, &s, &cov).unwrap() >= v - 1e-12 * v.abs().max(1.0));
    }

    #[test]
    fn waterfill_matches_numeric_minimizer(n in 1usize..=16, seed in any::<u64>()) {
        let mut r = rng(seed);
        let u: Vec<f64> = (0..n).map(|_| r.random_range(0.01..10.0)).collect();
        let s_min = r.random_range(0.0..5.0);
        let total = n as f64 * s_min + r.random_range(1.0..500.0);
        let got = waterfill(&u, total, s_min).unwrap();
        let oracle = numeric_minimizer(&u, total, s_min);
        let (a, b) = (diagonal_objective(&u, &got), diagonal_objective(&u, &oracle));
        prop_assert!(a <= b * (1.0 + 1e-6), "waterfill {} vs oracle {}", a, b);
        prop_assert!((got.iter().sum::<f64>() - total).abs() < 1e-9 * total);
        prop_assert!(got.iter().all(|&x| x >= s_min - 1e-12));
    }

    #[test]
    fn small_projection_is_exhaustively_optimal(n in 1usize..=4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let u: Vec<f64> = (0..n).map(|_| r.random_range(0.0..10.0)).collect();
        let s_min = r.random_range(0..=3u64);
        let total = r.random_range(n as u64 * s_min.max(1)..=40);
        let cont = waterfill(&u, total as f64, s_min as f64).unwrap();
        let plan = integer_project(&cont, total, &u, s_min).unwrap();
        let (_, best) = exhaustive_integer(&u, total, s_min).unwrap();
        let got = diagonal_objective(&u, &plan.as_f64());
        prop_assert!(got <= best * (1.0 + 1e-12) + 1e-300, "projection {} vs exhaustive {}", got, best);
    }

    #[test]
    fn projection_gap_within_floor_bound(n in 5usize..=16, seed in any::<u64>()) {
        let mut r = rng(seed);
        let u: Vec<f64> = (0..n).map(|_| r.random_range(0.1..10.0)).collect();
        let s_min = r.random_range(5..=50u64);
        let total = n as u64 * s_min + r.random_range(0..2000u64);
        let cont = waterfill(&u, total as f64, s_min as f64).unwrap();
        let plan = integer_project(&cont, total, &u, s_min).unwrap();
        prop_assert_eq!(plan.shots.iter().sum::<u64>(), total);
        prop_assert!(plan.shots.iter().all(|&s| s >= s_min));
        let lower = diagonal_objective(&u, &cont);
        let gap = (diagonal_objective(&u, &plan.as_f64()) - lower) / lower;
        prop_assert!(gap <= 2.0 / s_min as f64, "gap {}", gap);
    }

    #[test]
    fn plans_are_permutation_equivariant(n in 2usize..=10, seed in any::<u64>()) {
        let mut r = rng(seed);
        let u: Vec<f64> = (0..n).map(|_| r.random_range(0.1..10.0)).collect();
        let total = r.random_range(n as u64 * 20..5000);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let plan = |u: &[f64]| {
            let c = waterfill(u, total as f64, 20.0).unwrap();
            integer_project(&c, total, u, 20).unwrap().shots
        };
        let base = plan(&u);
        let permuted: Vec<f64> = perm.iter().map(|&i| u[i]).collect();
        let got = plan(&permuted);
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(got[k], base[i]);
        }
    }
}
