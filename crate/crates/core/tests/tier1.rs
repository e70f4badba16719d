use maestrocut_core::allocator::Topology;
use maestrocut_core::cascade::EstimatorChoice;
use maestrocut_core::drifttrack::CusumConfig;
use maestrocut_core::rng::Stream;
use maestrocut_core::tier1::{
    default_workload_table, episode_metrics, evolve_truth, observe, run_episode, synth_workload, DriftEvent,
    EntropyClass, Episode, EpisodeConfig, Policy, Tier1Config, Tier1Error, WorkloadEntry, WorkloadName,
};

fn small() -> Tier1Config {
    Tier1Config {
        steps: 30,
        shots_per_step: 4000,
        warmup: 5,
        seeds: 4,
        ..Tier1Config::default()
    }
}

fn episode(cfg: &Tier1Config, det: &CusumConfig, name: WorkloadName, rep: u64, policy: Policy) -> Episode {
    let spec = synth_workload(cfg.workload(name).unwrap(), cfg, 0, rep).unwrap();
    run_episode(&spec, &EpisodeConfig::from_config(cfg, 0, rep, policy), cfg, det).unwrap()
}

fn post_warmup_mse(e: &Episode) -> f64 {
    let v: Vec<f64> = e.records.iter().filter(|r| !r.warmup).map(|r| r.mean_sq_error).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn specs_are_deterministic_and_sized_by_table() {
    let cfg = Tier1Config::default();
    for entry in default_workload_table() {
        let a = synth_workload(&entry, &cfg, 3, 1).unwrap();
        let b = synth_workload(&entry, &cfg, 3, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n, entry.fragments);
        let max = a.initial_variance.iter().cloned().fold(0.0, f64::max);
        let min = a.initial_variance.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!((max.sqrt() / min.sqrt() - cfg.truth.sigma_spread).abs() < 1e-12);
        assert_eq!(a.drift[0].step, cfg.steps / 2);
    }
    let mut flat = cfg.clone();
    flat.truth.sigma_spread = 1.0;
    let spec = synth_workload(flat.workload(WorkloadName::Tfim).unwrap(), &flat, 0, 0).unwrap();
    assert!(spec.initial_variance.iter().all(|&v| v == spec.initial_variance[0]));
}

#[test]
fn truth_is_frozen_without_noise_and_jumps_on_schedule() {
    let cfg = Tier1Config::default();
    let mut spec = synth_workload(cfg.workload(WorkloadName::Tfim).unwrap(), &cfg, 0, 0).unwrap();
    spec.process_noise = vec![0.0; spec.n];
    spec.drift = vec![DriftEvent {
        step: 7,
        fragments: vec![2],
        relative_change: 2.0,
    }];
    let mut rng = Stream::new(1).rng();
    let mut s = spec.initial_variance.clone();
    for t in 1..12 {
        let next = evolve_truth(&spec, &s, t, &mut rng);
        for i in 0..spec.n {
            let want = if t == 7 && i == 2 { 3.0 * s[i] } else { s[i] };
            assert_eq!(next[i], want, "t {t}, fragment {i}");
        }
        s = next;
    }
}

#[test]
fn truth_increments_have_variance_q() {
    let cfg = Tier1Config::default();
    let mut spec = synth_workload(cfg.workload(WorkloadName::Tfim).unwrap(), &cfg, 0, 0).unwrap();
    spec.drift.clear();
    spec.initial_variance = vec![100.0; spec.n];
    spec.process_noise = vec![0.04; spec.n];
    let mut rng = Stream::new(2).rng();
    let mut incs = Vec::new();
    for t in 1..4001 {
        let next = evolve_truth(&spec, &spec.initial_variance, t, &mut rng);
        incs.extend(next.iter().map(|x| x - 100.0));
    }
    let m = incs.iter().sum::<f64>() / incs.len() as f64;
    let var = incs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (incs.len() - 1) as f64;
    assert!(m.abs() < 0.01 && (var / 0.04 - 1.0).abs() < 0.03, "mean {m}, var {var}");
}

#[test]
fn observations_concentrate_and_are_unbiased() {
    let z = observe(&[0.0, 1.0], &[1000, 1_000_000], &Stream::new(3));
    assert_eq!(z[0], 0.0);
    assert!((z[1] - 1.0).abs() < 0.01, "{}", z[1]);
    let root = Stream::new(4);
    let zs: Vec<f64> = (0..4000).map(|k| observe(&[2.5], &[20], &root.index(k))[0]).collect();
    let m = zs.iter().sum::<f64>() / zs.len() as f64;
    let var = zs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (zs.len() - 1) as f64;
    // mean σ², variance 2σ⁴/(s-1)
    let se = (2.0 * 2.5f64.powi(2) / 19.0 / 4000.0).sqrt();
    assert!((m - 2.5).abs() < 4.0 * se, "mean {m}");
    assert!((var / (2.0 * 2.5f64.powi(2) / 19.0) - 1.0).abs() < 0.1, "var {var}");
}

#[test]
fn homogeneous_workload_has_no_contraction() {
    let mut cfg = small();
    cfg.truth.sigma_spread = 1.0;
    cfg.truth.drift_relative = 0.0;
    cfg.workloads = vec![WorkloadEntry {
        name: WorkloadName::Tfim,
        fragments: 10,
        entropy: EntropyClass::Low,
    }];
    cfg.reference_workload = WorkloadName::Tfim;
    let det = cfg.calibrate_detector(0).unwrap();
    let ratios: Vec<f64> = (0..50)
        .map(|r| {
            let u = episode(&cfg, &det, WorkloadName::Tfim, r, Policy::Uniform);
            let t = episode(&cfg, &det, WorkloadName::Tfim, r, Policy::TopoGp);
            episode_metrics(&t, &u).unwrap().contraction
        })
        .collect();
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    assert!((0.9..=1.1).contains(&mean), "mean ratio {mean}");
}

#[test]
fn arms_share_truth_and_proxy_matches_quadratic_form() {
    let cfg = small();
    let det = cfg.calibrate_detector(0).unwrap();
    let name = WorkloadName::QaoaMaxCut;
    let u = episode(&cfg, &det, name, 2, Policy::Uniform);
    let t = episode(&cfg, &det, name, 2, Policy::TopoGp);
    for (a, b) in u.records.iter().zip(&t.records) {
        assert_eq!(a.true_variance, b.true_variance);
    }
    let spec = synth_workload(cfg.workload(name).unwrap(), &cfg, 0, 2).unwrap();
    let topo = Topology::parse_generator(&cfg.topology).unwrap();
    let tail = (spec.n as f64 / cfg.tail.rho).ln().sqrt();
    for r in t.records.iter().step_by(7) {
        let mut q = 0.0;
        for i in 0..spec.n {
            for j in 0..spec.n {
                let d = topo.distance(spec.anchors[i], spec.anchors[j]).unwrap() as f64;
                let k = cfg.kernel.sigma_k2 * (-d / cfg.kernel.ell).exp();
                let ui = r.true_variance[i].sqrt() * tail;
                let uj = r.true_variance[j].sqrt() * tail;
                q += ui * uj * k / (r.plan[i] as f64 * r.plan[j] as f64);
            }
        }
        assert!((r.variance_proxy - q).abs() <= 1e-10 * q, "step {}", r.step);
    }
}

#[test]
fn repartition_only_on_trigger() {
    let cfg = small();
    let det = cfg.calibrate_detector(0).unwrap();
    for rep in 0..4 {
        let e = episode(&cfg, &det, WorkloadName::UccsdLih, rep, Policy::TopoGp);
        for r in &e.records {
            assert_eq!(r.repartitioned, !r.triggers.is_empty(), "step {}", r.step);
        }
    }
}

#[test]
fn metric_identities_and_pairing() {
    let cfg = small();
    let det = cfg.calibrate_detector(0).unwrap();
    let u = episode(&cfg, &det, WorkloadName::QaoaMaxCut, 0, Policy::Uniform);
    let m = episode_metrics(&u, &u).unwrap();
    assert_eq!(m.contraction, 1.0);
    assert_eq!(m.p95_tail, cfg.shots_per_step as f64 / 16.0);
    let other = episode(&cfg, &det, WorkloadName::QaoaMaxCut, 1, Policy::TopoGp);
    assert!(matches!(episode_metrics(&other, &u), Err(Tier1Error::Pairing(_))));
}

#[test]
fn cascade_helps_low_entropy_workloads() {
    let on = small();
    let mut off = on.clone();
    off.cascade.enabled = false;
    let det = on.calibrate_detector(0).unwrap();
    for name in [WorkloadName::QaoaMaxCut, WorkloadName::Tfim, WorkloadName::PhaseEstimation] {
        let (mut a, mut b) = (0.0, 0.0);
        for rep in 0..8 {
            let e_on = episode(&on, &det, name, rep, Policy::TopoGp);
            let e_off = episode(&off, &det, name, rep, Policy::TopoGp);
            assert!(e_off.records.iter().all(|r| r.choices.iter().all(|&c| c == EstimatorChoice::Shadows)));
            a += post_warmup_mse(&e_on);
            b += post_warmup_mse(&e_off);
        }
        assert!(b >= a, "{name}: forced shadows {b} vs cascade {a}");
    }
}
