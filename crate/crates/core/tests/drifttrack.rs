mod common;

use common::rng;
use maestrocut_core::drifttrack::{
    calibrate_cusum_threshold, kalman_step, CusumConfig, CusumState, KalmanConfig, KalmanState, NullModel,
};
use proptest::prelude::*;
use rand_distr::{Distribution, Normal};

/// Run lengths drawn with a generator unrelated to the calibration streams.
fn independent_arl(kappa: f64, h: f64, runs: usize, cap: usize) -> f64 {
    let mut r = rng(0xa11);
    let n = Normal::new(0.0, 1.0).unwrap();
    let mut total = 0usize;
    for _ in 0..runs {
        let mut s = 0.0f64;
        let mut t = 1;
        while t < cap {
            s = (s + n.sample(&mut r) - kappa).max(0.0);
            if s >= h {
                break;
            }
            t += 1;
        }
        total += t;
    }
    total as f64 / runs as f64
}

#[test]
fn calibrated_threshold_hits_target_arl() {
    let null = NullModel::Normal { mean: 0.0, sd: 1.0 };
    let cal = calibrate_cusum_threshold(0.5, 200.0, &null, 3).unwrap();
    let arl = independent_arl(0.5, cal.h, 4000, 4000);
    assert!((160.0..=240.0).contains(&arl), "h {} gives ARL {arl}", cal.h);
}

#[test]
fn large_slack_gives_unbounded_run_length() {
    let cfg = CusumConfig::new(10.0, 1.0).unwrap();
    let mut r = rng(5);
    let n = Normal::new(0.0, 1.0).unwrap();
    let mut s = CusumState::default();
    for _ in 0..100_000 {
        let (next, alarm) = s.update(n.sample(&mut r), &cfg);
        assert!(!alarm);
        s = next;
    }
}

#[test]
fn filter_tracks_better_than_raw_observations() {
    let (q, r_var) = (0.01, 0.25);
    let cfg = KalmanConfig::new(q, r_var).unwrap();
    let walk = Normal::new(0.0, q.sqrt()).unwrap();
    let noise = Normal::new(0.0, r_var.sqrt()).unwrap();
    let (mut filt, mut raw) = (0.0, 0.0);
    for ep in 0..100 {
        let mut r = rng(1000 + ep);
        let mut x = 10.0;
        let mut st = KalmanState::new(10.0, 1.0);
        for _ in 0..200 {
            x += walk.sample(&mut r);
            let z = x + noise.sample(&mut r);
            st = kalman_step(st, z, &cfg).unwrap();
            filt += (st.mean - x).powi(2);
            raw += (z - x).powi(2);
        }
    }
    assert!(filt < raw, "filter {filt} vs raw {raw}");
}

proptest! {
    #[test]
    fn gain_is_a_fraction_and_uncertainty_shrinks(
        mean in 0.0f64..10.0,
        p in 0.0f64..5.0,
        q in 0.0f64..5.0,
        r in 1e-6f64..5.0,
        dz in 0.01f64..5.0,
    ) {
        let cfg = KalmanConfig::new(q, r).unwrap();
        let z = mean + dz;
        let next = kalman_step(KalmanState::new(mean, p), z, &cfg).unwrap();
        let gain = (next.mean - mean) / dz;
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&gain));
        prop_assert!(next.p <= p + q + 1e-15);
    }

    #[test]
    fn zero_slack_steps_are_no_ops(
        xs in proptest::collection::vec(-2.0f64..4.0, 1..40),
        inserts in proptest::collection::vec(0usize..40, 0..10),
    ) {
        let cfg = CusumConfig::new(1.0, 1e9).unwrap();
        let run = |seq: &[f64]| seq.iter().fold(CusumState::default(), |s, &x| s.update(x, &cfg).0);
        let mut padded = xs.clone();
        for &i in &inserts {
            let at = i.min(padded.len());
            padded.insert(at, cfg.kappa);
        }
        prop_assert_eq!(run(&xs), run(&padded));
    }
}
