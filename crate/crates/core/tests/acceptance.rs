//! Acceptance criteria, one line each. Run with `cargo test --test acceptance`.

mod common;

use std::time::Instant;

use maestrocut_core::allocator::{
    diagonal_objective, integer_project, spectral_bound, variance_bound, waterfill,
};
use maestrocut_core::cascade::{choose_estimator, crossover_shots, BiasModel, CascadeFit, Crossover, EstimatorChoice};
use maestrocut_core::config::RunConfig;
use maestrocut_core::cutgraph::{fm_refine, initial_partition, objective, BlockCaps};
use maestrocut_core::drifttrack::{cusum_update, CusumState};
use maestrocut_core::phasepad::{
    accept_incorrect_bound, detection_lower_bound, honest_backend, Decision, FragmentJob, PhasePad, SecurityParams,
};
use maestrocut_core::report::{bootstrap_ci, median, Statistic, CONFIG_ECHO_JSON};
use maestrocut_core::rng::Stream;
use maestrocut_core::runner::{self, PadTiming, Tiers};
use maestrocut_core::selftest::{exhaustive_integer, numeric_minimizer, random_psd};
use maestrocut_core::tier1::{self, EpisodeConfig, Policy, Tier1Config, WorkloadName};
use maestrocut_core::tier2::{self, ScenarioConfig, ScenarioName};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn waterfill_optimality() -> Outcome {
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let n = rng.random_range(1..=16);
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..10.0)).collect();
        let s_min = rng.random_range(1.0..50.0);
        let total = n as f64 * s_min * rng.random_range(1.0..30.0);
        let closed = waterfill(&u, total, s_min).unwrap();
        assert!((closed.iter().sum::<f64>() - total).abs() <= 1e-9 * total);
        assert!(closed.iter().all(|&s| s >= s_min * (1.0 - 1e-12)));
        let numeric = numeric_minimizer(&u, total, s_min);
        let (a, b) = (diagonal_objective(&u, &closed), diagonal_objective(&u, &numeric));
        worst = worst.max((a - b) / b);
    }
    outcome(worst <= 1e-6, format!("1000 instances, worst relative excess over numeric minimizer {worst:.2e}"))
}

fn integer_projection() -> Outcome {
    let mut rng = ChaCha12Rng::seed_from_u64(12);
    let mut mismatches = 0;
    for _ in 0..500 {
        let n = rng.random_range(1..=4);
        let s_min = rng.random_range(1..=5u64);
        if n as u64 * s_min > 40 {
            continue;
        }
        let total = rng.random_range(n as u64 * s_min..=40);
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..5.0)).collect();
        let cont = waterfill(&u, total as f64, s_min as f64).unwrap();
        let plan = integer_project(&cont, total, &u, s_min).unwrap();
        let (_, best) = exhaustive_integer(&u, total, s_min).unwrap();
        if diagonal_objective(&u, &plan.as_f64()) > best * (1.0 + 1e-12) {
            mismatches += 1;
        }
    }
    let mut worst_ratio = 0.0f64;
    for _ in 0..500 {
        let n = rng.random_range(1..=64);
        let s_min = [5u64, 20, 100][rng.random_range(0..3)];
        let total = n as u64 * s_min * rng.random_range(1..=20) + rng.random_range(0..n as u64);
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..10.0)).collect();
        let cont = waterfill(&u, total as f64, s_min as f64).unwrap();
        let plan = integer_project(&cont, total, &u, s_min).unwrap();
        assert_eq!(plan.shots.iter().sum::<u64>(), total);
        let (fi, fc) = (diagonal_objective(&u, &plan.as_f64()), diagonal_objective(&u, &cont));
        worst_ratio = worst_ratio.max((fi - fc) / fc * s_min as f64 / 2.0);
    }
    outcome(
        mismatches == 0 && worst_ratio <= 1.0,
        format!("exhaustive mismatches {mismatches}; worst gap / (2/s_min) = {worst_ratio:.3}"),
    )
}

fn spectral_relaxation() -> Outcome {
    let mut rng = ChaCha12Rng::seed_from_u64(13);
    let mut violations = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=16);
        let cov = random_psd(n, &mut rng);
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..1000.0)).collect();
        let v = variance_bound(&u, &s, &cov).unwrap();
        let sb = spectral_bound(&u, &s, &cov).unwrap();
        if sb < v - 1e-10 * v.abs().max(1e-300) {
            violations += 1;
        }
    }
    outcome(violations == 0, format!("1000 PSD instances, {violations} violations"))
}

fn kalman_cusum() -> Outcome {
    let t1 = Tier1Config::default();
    let detector = t1.calibrate_detector(0).unwrap();
    // null innovations |N(0,1)| on streams disjoint from calibration
    let root = Stream::new(777).child("arl-check");
    let cap = 20 * t1.cusum.target_arl0 as usize;
    let runs = 2000;
    let total: usize = (0..runs)
        .map(|i| {
            let mut rng = root.index(i).rng();
            let mut st = CusumState::default();
            for t in 1..=cap {
                let x: f64 = StandardNormal.sample(&mut rng);
                let (next, alarm) = cusum_update(st, x.abs(), &detector);
                if alarm {
                    return t;
                }
                st = next;
            }
            cap
        })
        .sum();
    let arl = total as f64 / runs as f64;
    let rel = (arl - t1.cusum.target_arl0) / t1.cusum.target_arl0;

    let entry = t1.workload(t1.reference_workload).unwrap();
    let mut detected = 0;
    for r in 0..200u64 {
        let spec = tier1::synth_workload(entry, &t1, 0, r).unwrap();
        let ep = tier1::run_episode(&spec, &EpisodeConfig::from_config(&t1, 0, r, Policy::TopoGp), &t1, &detector).unwrap();
        let d = &spec.drift[0];
        detected += usize::from(ep.detected(&d.fragments, d.step, t1.cusum.detection_budget));
    }
    outcome(
        rel.abs() <= 0.2 && detected >= 180,
        format!(
            "h={:.3}, ARL0 {arl:.1} vs target {} ({:+.1}%); detected within {} steps in {detected}/200",
            detector.h,
            t1.cusum.target_arl0,
            100.0 * rel,
            t1.cusum.detection_budget
        ),
    )
}

fn variance_contraction() -> Outcome {
    let cfg = RunConfig {
        tier1: Tier1Config {
            policies: vec![Policy::TopoGp],
            ..Tier1Config::default()
        },
        ..RunConfig::default()
    };
    let detector = cfg.tier1.calibrate_detector(cfg.seed).unwrap();
    let mut lines = Vec::new();
    let mut pass = true;
    for w in WorkloadName::ALL {
        let ratios: Vec<f64> = (0..100u64)
            .map(|r| {
                let eps = runner::run_paired(&cfg, w, r, &detector).unwrap();
                tier1::episode_metrics(&eps[1], &eps[0]).unwrap().contraction
            })
            .collect();
        let ci = bootstrap_ci(&ratios, Statistic::Mean, 10_000, 0.95, 5).unwrap();
        let reference = w == cfg.tier1.reference_workload;
        pass &= ci.upper < 1.0 && (!reference || ci.value <= 0.6);
        lines.push(format!(
            "{}{} {:.3} [{:.3}, {:.3}]",
            w.label(),
            if reference { "*" } else { "" },
            ci.value,
            ci.lower,
            ci.upper
        ));
    }
    outcome(pass, format!("TopoGP/Uniform over 100 seeds: {}", lines.join(", ")))
}

fn cascade_optimality() -> Outcome {
    let (alpha, beta) = (3.0, 200.0);
    let biased = CascadeFit::new(alpha, beta, BiasModel { b0: 0.05, h_thr: 1.0 }).unwrap();
    let mut disagreements = 0;
    let mut cells = 0;
    for hi in 0..=80 {
        let h = hi as f64 * 0.05;
        for s in 1..=5000u64 {
            let b = 0.05 * (h - 1.0).max(0.0);
            let shadows = alpha / s as f64;
            let mle = beta / (s as f64 * s as f64) + b * b;
            let want = if mle <= shadows { EstimatorChoice::Mle } else { EstimatorChoice::Shadows };
            cells += 1;
            disagreements += usize::from(choose_estimator(&biased, s, h).unwrap() != want);
        }
    }
    let zero = CascadeFit::new(alpha, beta, BiasModel::zero()).unwrap();
    let mut switches_ok = true;
    for hi in 0..=40 {
        let h = hi as f64 * 0.1;
        let seq: Vec<bool> = (1..=5000u64)
            .map(|s| choose_estimator(&zero, s, h).unwrap() == EstimatorChoice::Mle)
            .collect();
        switches_ok &= seq.windows(2).filter(|w| w[0] != w[1]).count() == 1 && !seq[0];
    }
    let want_cross = (beta / alpha).ceil() as u64;
    let cross_ok = crossover_shots(&zero, 0.5) == Crossover::At(want_cross);
    outcome(
        disagreements == 0 && switches_ok && cross_ok,
        format!(
            "{cells} cells, {disagreements} disagreements; single switch when bias=0: {switches_ok}; s_cross={want_cross}: {cross_ok}"
        ),
    )
}

fn jobs(n: usize, rng: &mut ChaCha12Rng) -> Vec<FragmentJob> {
    (0..n as u64)
        .map(|i| FragmentJob {
            fragment_id: i,
            shots: 100,
            payload: (0..32).map(|_| rng.random()).collect(),
        })
        .collect()
}

fn decoy_bounds() -> Outcome {
    let mut rng = ChaCha12Rng::seed_from_u64(14);
    let mut pad = PhasePad::new(SecurityParams::default(), 14);
    let trials = 300;
    let mut worst = f64::INFINITY;
    let mut points = 0;
    for n in [50usize, 100, 500] {
        for h in [1usize, 5, 10] {
            for k in [1usize, 5, 20] {
                let batch_jobs = jobs(n - h, &mut rng);
                let mut hits = 0;
                for _ in 0..trials {
                    let (batch, pending) = pad.dispatch_with_decoys(&batch_jobs, h, &mut rng).unwrap();
                    let mut results = honest_backend(&batch);
                    for i in sample(&mut rng, n, k) {
                        results[i].payload[0] ^= 1;
                    }
                    let v = pad.verify_and_recover(&pending, &results).unwrap();
                    hits += usize::from(v.report.decoys_passed < v.report.decoys_dispatched);
                }
                let rate = hits as f64 / trials as f64;
                let bound = detection_lower_bound(n, h, k);
                let se = (bound * (1.0 - bound) / trials as f64).sqrt();
                worst = worst.min((rate - (bound - 3.0 * se)) / 1.0);
                points += 1;
            }
        }
    }
    // adversary corrupts every envelope w.p. 2 eps; accepting is an error
    let eps = SecurityParams::default().eps_ver;
    let mut accept_ok = true;
    let mut accept_lines = Vec::new();
    for h in [10usize, 25, 50] {
        let batch_jobs = jobs(40, &mut rng);
        let mut accepted = 0;
        let runs = 400;
        for _ in 0..runs {
            let (batch, pending) = pad.dispatch_with_decoys(&batch_jobs, h, &mut rng).unwrap();
            let mut results = honest_backend(&batch);
            for r in results.iter_mut() {
                if rng.random_bool(2.0 * eps) {
                    r.payload[0] ^= 1;
                }
            }
            let v = pad.verify_and_recover(&pending, &results).unwrap();
            accepted += usize::from(v.report.decision == Decision::Accept);
        }
        let freq = accepted as f64 / runs as f64;
        let bound = accept_incorrect_bound(h, eps);
        accept_ok &= freq <= bound;
        accept_lines.push(format!("h={h}: {freq:.3} <= {bound:.3}"));
    }
    outcome(
        worst >= 0.0 && accept_ok,
        format!(
            "{points} (N,h,k) points, min margin over bound-3SE {worst:.3}; accept-incorrect {}",
            accept_lines.join(", ")
        ),
    )
}

fn phasepad_integrity_and_cost() -> Outcome {
    let mut rng = ChaCha12Rng::seed_from_u64(15);
    let mut pad = PhasePad::new(SecurityParams::default(), 15);
    let mut bad = 0;
    for _ in 0..10_000 {
        let len = rng.random_range(1..=256);
        let job = FragmentJob {
            fragment_id: rng.random(),
            shots: rng.random_range(1..10_000),
            payload: (0..len).map(|_| rng.random()).collect(),
        };
        let (batch, pending) = pad.dispatch(std::slice::from_ref(&job), &mut rng).unwrap();
        let v = pad.verify_and_recover(&pending, &honest_backend(&batch)).unwrap();
        bad += usize::from(v.recovered != vec![(job.fragment_id, job.payload.clone())]);
    }
    let (batch, pending) = pad.dispatch(&jobs(1, &mut rng), &mut rng).unwrap();
    let sealed_len = batch.envelopes[0].sealed_header.len();
    let mut accepted = 0;
    for t in 0..256 {
        let bit = (t * 8 * sealed_len / 256) + t % 8;
        let mut results = honest_backend(&batch);
        results[0].sealed_header[(bit / 8) % sealed_len] ^= 1 << (bit % 8);
        let v = pad.verify_and_recover(&pending, &results).unwrap();
        accepted += usize::from(!v.recovered.is_empty());
    }

    let t1 = Tier1Config::default();
    let detector = t1.calibrate_detector(0).unwrap();
    let entry = t1.workload(t1.reference_workload).unwrap();
    let mut timing = PadTiming::default();
    for r in 0..20u64 {
        let spec = tier1::synth_workload(entry, &t1, 0, r).unwrap();
        let ep = tier1::run_episode(&spec, &EpisodeConfig::from_config(&t1, 0, r, Policy::TopoGp), &t1, &detector).unwrap();
        timing.add(&ep);
    }
    let share = timing.mask_seal_share();
    outcome(
        bad == 0 && accepted == 0 && share <= 0.01,
        format!(
            "10^4 round trips, {bad} mismatches; 256 header bit flips, {accepted} accepted; mask+seal share {:.2}% (with open+unmask {:.2}%) of {} default episodes",
            100.0 * share,
            100.0 * timing.round_trip_share(),
            timing.episodes
        ),
    )
}

fn tier2_direction_and_caps() -> Outcome {
    let episodes = 50;
    let mut jitter = Vec::new();
    let mut ttfr = std::collections::BTreeMap::new();
    let mut partition_ok = true;
    for name in ScenarioName::ALL {
        let sc = ScenarioConfig::defaults(name);
        let m = tier2::simulate_queue(&sc, 0.01, episodes, 0).unwrap();
        partition_ok &= m
            .iter()
            .all(|x| (x.success_frac + x.timeout_frac + x.error_frac - 1.0).abs() <= 1e-9);
        jitter.push((name, median(&m.iter().map(|x| x.jitter_ms).collect::<Vec<_>>())));
        ttfr.insert(name, m.iter().map(|x| x.ttfr_ms).collect::<Vec<_>>());
    }
    let jitter_ok = jitter.iter().all(|(_, j)| *j <= 150.0);
    let (adv, base) = (median(&ttfr[&ScenarioName::Adversarial]), median(&ttfr[&ScenarioName::Baseline]));
    let sweep = tier2::overhead_sweep(&ScenarioConfig::baseline(), &[0.0, 0.01], episodes, 0).unwrap();
    let rel = sweep[1].relative_throughput;
    outcome(
        jitter_ok && adv > base && partition_ok && rel >= 0.98,
        format!(
            "jitter medians {}; TTFR Adversarial {adv:.1} > Baseline {base:.1}; fractions partition: {partition_ok}; relative throughput at 1% {rel:.4}",
            jitter.iter().map(|(n, j)| format!("{n} {j:.1}")).collect::<Vec<_>>().join("/")
        ),
    )
}

fn partitioner_oracle() -> Outcome {
    let k = 3;
    let caps = BlockCaps { max_qubits: 4, max_depth: 16 };
    let budget = 64;
    let (mut hits, mut increases, mut violations) = (0, 0, 0);
    for seed in 0..50u64 {
        let hg = common::random_circuit(12, 6, seed);
        let setup = common::Setup::new(k, hg.num_vertices());
        let cost = setup.cost();
        let best = common::exhaustive_optimum(&hg, k, caps, budget, &cost);
        let start = initial_partition(&hg, &vec![caps; k], budget, seed, &cost).unwrap();
        let j0 = objective(&hg, &start, &cost).unwrap().j;
        let refined = fm_refine(&hg, &start, &cost, 2).unwrap();
        let j1 = objective(&hg, &refined, &cost).unwrap().j;
        increases += usize::from(j1 > j0 + 1e-12);
        violations += usize::from(refined.validate(&hg).is_err());
        hits += usize::from(j1 <= best + 1e-9);
    }
    outcome(
        hits >= 40 && increases == 0 && violations == 0,
        format!("optimum reached on {hits}/50; J increases {increases}; cap violations {violations}"),
    )
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig {
        seed: 9,
        out_root: dir.path().join("a").display().to_string(),
        ..RunConfig::default()
    };
    cfg.tier1.seeds = 3;
    cfg.tier1.steps = 30;
    cfg.tier2.episodes = 30;
    let a = runner::run(&cfg, Tiers::Both).unwrap();
    cfg.out_root = dir.path().join("b").display().to_string();
    let b = runner::run(&cfg, Tiers::Both).unwrap();
    let mut same = 0;
    let mut differ = Vec::new();
    for (fa, fb) in a.files.iter().zip(&b.files) {
        let name = fa.file_name().unwrap().to_string_lossy().to_string();
        let (x, y) = (std::fs::read(fa).unwrap(), std::fs::read(fb).unwrap());
        let equal = if name == CONFIG_ECHO_JSON {
            // the echo records the output root, which differs by construction
            let strip = |bytes: &[u8]| {
                let mut v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
                v.as_object_mut().unwrap().remove("out_root");
                v
            };
            strip(&x) == strip(&y)
        } else {
            x == y
        };
        if equal {
            same += 1;
        } else {
            differ.push(name);
        }
    }
    let csvs = a.files.iter().filter(|f| f.extension().is_some_and(|e| e == "csv")).count();
    outcome(
        differ.is_empty() && csvs == 3,
        format!("{same}/{} files identical across two runs ({csvs} CSVs, echo without out_root); differing: {differ:?}", a.files.len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("water-filling optimality", waterfill_optimality),
        ("integer projection", integer_projection),
        ("spectral relaxation", spectral_relaxation),
        ("kalman/cusum calibration and detection", kalman_cusum),
        ("variance contraction", variance_contraction),
        ("cascade optimality", cascade_optimality),
        ("decoy bounds", decoy_bounds),
        ("phasepad integrity and cost", phasepad_integrity_and_cost),
        ("tier2 direction and caps", tier2_direction_and_caps),
        ("partitioner oracle", partitioner_oracle),
        ("reproducibility", reproducibility),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = Vec::new();
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|x| name.contains(x.as_str())) {
            continue;
        }
        let t = Instant::now();
        let o = f();
        println!(
            "[{}] {name} ({:.1}s): {}",
            if o.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            o.detail
        );
        if !o.pass {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {}", failed.join(", "));
        std::process::exit(1);
    }
}
