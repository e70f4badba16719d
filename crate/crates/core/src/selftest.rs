//! Brute-force oracle batteries run by `maestrocut selftest`. Each battery
//! checks an optimized routine against a slow, independent computation on
//! small random instances.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use crate::allocator::{diagonal_objective, integer_project, spectral_bound, variance_bound, waterfill, CovarianceModel};
use crate::cascade::{choose_estimator, crossover_shots, BiasModel, CascadeFit, Crossover, EstimatorChoice};
use crate::cutgraph::{
    fm_refine, initial_partition, objective, BlockCaps, CostModel, Gate, Hypergraph, MaxLoadQueue, NormalizationRefs,
    Partition, PolicyWeights,
};
use crate::phasepad::{honest_backend, Decision, FragmentJob, PhasePad, SecurityParams};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatteryResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn result(name: &'static str, passed: bool, detail: String) -> BatteryResult {
    BatteryResult { name, passed, detail }
}

/// Minimize `Σ u_i²/s_i²` over `Σ s = total`, `s >= s_min` by repeated
/// pairwise transfers, each a golden-section line search.
pub fn numeric_minimizer(u: &[f64], total: f64, s_min: f64) -> Vec<f64> {
    let n = u.len();
    let mut s = vec![total / n as f64; n];
    let f = |u: f64, s: f64| if u == 0.0 { 0.0 } else { u * u / (s * s) };
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _sweep in 0..400 {
        let before = diagonal_objective(u, &s);
        for i in 0..n {
            for j in i + 1..n {
                let pool = s[i] + s[j];
                let (mut a, mut b) = (s_min, pool - s_min);
                if b <= a {
                    continue;
                }
                let g = |x: f64| f(u[i], x) + f(u[j], pool - x);
                let mut c = b - phi * (b - a);
                let mut d = a + phi * (b - a);
                let (mut gc, mut gd) = (g(c), g(d));
                while b - a > 1e-11 * pool {
                    if gc < gd {
                        b = d;
                        d = c;
                        gd = gc;
                        c = b - phi * (b - a);
                        gc = g(c);
                    } else {
                        a = c;
                        c = d;
                        gc = gd;
                        d = a + phi * (b - a);
                        gd = g(d);
                    }
                }
                let x = (a + b) / 2.0;
                if g(x) < g(s[i]) {
                    s[i] = x;
                    s[j] = pool - x;
                }
            }
        }
        let after = diagonal_objective(u, &s);
        if before - after <= 1e-15 * before {
            break;
        }
    }
    s
}

/// Best integer plan by enumeration; `None` when infeasible.
pub fn exhaustive_integer(u: &[f64], total: u64, s_min: u64) -> Option<(Vec<u64>, f64)> {
    fn rec(u: &[f64], left: u64, s_min: u64, cur: &mut Vec<u64>, best: &mut Option<(Vec<u64>, f64)>) {
        let i = cur.len();
        if i + 1 == u.len() {
            if left < s_min {
                return;
            }
            cur.push(left);
            let s: Vec<f64> = cur.iter().map(|&x| x as f64).collect();
            let v = diagonal_objective(u, &s);
            if best.as_ref().is_none_or(|(_, b)| v < *b) {
                *best = Some((cur.clone(), v));
            }
            cur.pop();
            return;
        }
        let rest = (u.len() - i - 1) as u64 * s_min;
        let mut x = s_min;
        while x + rest <= left {
            cur.push(x);
            rec(u, left - x, s_min, cur, best);
            cur.pop();
            x += 1;
        }
    }
    if u.is_empty() {
        return None;
    }
    let mut best = None;
    rec(u, total, s_min, &mut Vec::new(), &mut best);
    best
}

/// `A Aᵀ` with Gaussian `A`, `n x n`.
pub fn random_psd<R: Rng + ?Sized>(n: usize, rng: &mut R) -> CovarianceModel {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let m = &a * a.transpose();
    let m = (&m + m.transpose()) * 0.5;
    CovarianceModel::from_matrix(m).expect("symmetric")
}

fn waterfill_battery(instances: usize, seed: u64) -> BatteryResult {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = rng.random_range(1..=16);
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..10.0)).collect();
        let s_min = rng.random_range(1.0..20.0);
        let total = n as f64 * s_min * rng.random_range(1.0..20.0);
        let closed = waterfill(&u, total, s_min).expect("feasible");
        let numeric = numeric_minimizer(&u, total, s_min);
        let (a, b) = (diagonal_objective(&u, &closed), diagonal_objective(&u, &numeric));
        worst = worst.max((a - b) / b);
    }
    result("waterfill", worst <= 1e-6, format!("{instances} instances, worst relative excess {worst:.2e}"))
}

fn integer_battery(instances: usize, seed: u64) -> BatteryResult {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..instances {
        let n = rng.random_range(1..=4);
        let s_min = rng.random_range(1..=4u64);
        let total = rng.random_range(n as u64 * s_min..=40);
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..5.0)).collect();
        let cont = waterfill(&u, total as f64, s_min as f64).expect("feasible");
        let plan = integer_project(&cont, total, &u, s_min).expect("feasible");
        let (_, best) = exhaustive_integer(&u, total, s_min).expect("feasible");
        let got = diagonal_objective(&u, &plan.as_f64());
        if got > best * (1.0 + 1e-12) {
            mismatches += 1;
        }
    }
    result("integer_projection", mismatches == 0, format!("{instances} instances, {mismatches} worse than exhaustive"))
}

fn spectral_battery(instances: usize, seed: u64) -> BatteryResult {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut violations = 0;
    for _ in 0..instances {
        let n = rng.random_range(1..=12);
        let cov = random_psd(n, &mut rng);
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..100.0)).collect();
        let (v, sb) = (variance_bound(&u, &s, &cov).unwrap(), spectral_bound(&u, &s, &cov).unwrap());
        if sb < v * (1.0 - 1e-10) - 1e-12 {
            violations += 1;
        }
    }
    result("spectral_relaxation", violations == 0, format!("{instances} instances, {violations} violations"))
}

fn cascade_battery() -> BatteryResult {
    let fit = CascadeFit::new(3.0, 200.0, BiasModel { b0: 0.02, h_thr: 2.0 }).expect("valid");
    let mut disagreements = 0;
    let mut cells = 0;
    for hi in 0..=40 {
        let h = hi as f64 * 0.1;
        for s in 1..=2000u64 {
            let b = 0.02 * (h - 2.0).max(0.0);
            let (sh, ml) = (3.0 / s as f64, 200.0 / (s * s) as f64 + b * b);
            let want = if ml <= sh { EstimatorChoice::Mle } else { EstimatorChoice::Shadows };
            cells += 1;
            if choose_estimator(&fit, s, h).unwrap() != want {
                disagreements += 1;
            }
        }
    }
    let zero = CascadeFit::new(3.0, 200.0, BiasModel::zero()).expect("valid");
    let cross_ok = crossover_shots(&zero, 1.0) == Crossover::At((200.0f64 / 3.0).ceil() as u64);
    result(
        "cascade",
        disagreements == 0 && cross_ok,
        format!("{cells} grid cells, {disagreements} disagreements, bias-free crossover ok: {cross_ok}"),
    )
}

fn random_circuit<R: Rng + ?Sized>(n_gates: usize, n_qubits: u32, rng: &mut R) -> Hypergraph {
    let mut free = vec![0u32; n_qubits as usize];
    let mut gates = Vec::with_capacity(n_gates);
    for id in 0..n_gates as u64 {
        let a = rng.random_range(0..n_qubits);
        let qubits = if rng.random_bool(0.7) {
            let b = (a + rng.random_range(1..n_qubits)) % n_qubits;
            vec![a, b]
        } else {
            vec![a]
        };
        let depth = qubits.iter().map(|&q| free[q as usize]).max().unwrap_or(0);
        for &q in &qubits {
            free[q as usize] = depth + 1;
        }
        gates.push(Gate { id, qubits, depth });
    }
    Hypergraph::from_gates(gates).expect("valid circuit")
}

fn partition_battery(instances: usize, seed: u64) -> BatteryResult {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let k = 2;
    let caps = BlockCaps { max_qubits: 4, max_depth: 16 };
    let budget = 64;
    let queue = MaxLoadQueue::uniform(k, 0.0, 1.0);
    let (mut hits, mut regressions, mut violations) = (0, 0, 0);
    for i in 0..instances {
        let hg = random_circuit(10, 5, &mut rng);
        let cost = CostModel {
            weights: PolicyWeights::new(0.4, 0.3, 0.3).expect("valid"),
            refs: NormalizationRefs::new(4.0, hg.num_vertices() as f64).expect("valid"),
            queue: &queue,
        };
        let mut best = f64::INFINITY;
        let n = hg.num_vertices();
        for mask in 0u32..(1 << n) {
            let a: Vec<usize> = (0..n).map(|v| ((mask >> v) & 1) as usize).collect();
            let part = Partition::uniform(a, k, caps, budget).expect("valid");
            if part.validate(&hg).is_ok() {
                best = best.min(objective(&hg, &part, &cost).expect("covers").j);
            }
        }
        let Ok(start) = initial_partition(&hg, &vec![caps; k], budget, seed ^ i as u64, &cost) else {
            continue;
        };
        let j0 = objective(&hg, &start, &cost).expect("covers").j;
        let refined = fm_refine(&hg, &start, &cost, 2).expect("valid start");
        let j1 = objective(&hg, &refined, &cost).expect("covers").j;
        regressions += usize::from(j1 > j0 + 1e-12);
        violations += usize::from(refined.validate(&hg).is_err());
        hits += usize::from(j1 <= best + 1e-9);
    }
    let rate = hits as f64 / instances as f64;
    result(
        "partitioner",
        rate >= 0.8 && regressions == 0 && violations == 0,
        format!("{instances} instances, optimum reached {hits}, J increases {regressions}, cap violations {violations}"),
    )
}

fn phasepad_battery(rounds: usize, seed: u64) -> BatteryResult {
    let params = SecurityParams::default();
    let mut pad = PhasePad::new(params, seed);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for r in 0..rounds {
        let jobs: Vec<FragmentJob> = (0..4)
            .map(|i| FragmentJob {
                fragment_id: i,
                shots: 100 + r as u64,
                payload: (0..rng.random_range(1..200)).map(|_| rng.random()).collect(),
            })
            .collect();
        let (batch, pending) = pad.dispatch_with_decoys(&jobs, 2, &mut rng).expect("dispatch");
        let v = pad.verify_and_recover(&pending, &honest_backend(&batch)).expect("verify");
        let mut got = v.recovered.clone();
        got.sort();
        let want: Vec<(u64, Vec<u8>)> = jobs.iter().map(|j| (j.fragment_id, j.payload.clone())).collect();
        mismatches += usize::from(v.report.decision != Decision::Accept || got != want);
    }
    let jobs = vec![FragmentJob {
        fragment_id: 0,
        shots: 10,
        payload: vec![1, 2, 3],
    }];
    let (batch, pending) = pad.dispatch_with_decoys(&jobs, 0, &mut rng).expect("dispatch");
    let sealed = &batch.envelopes[0].sealed_header;
    let mut accepted_tampers = 0;
    for bit in 0..sealed.len() * 8 {
        let mut results = honest_backend(&batch);
        results[0].sealed_header[bit / 8] ^= 1 << (bit % 8);
        let v = pad.verify_and_recover(&pending, &results).expect("verify");
        accepted_tampers += usize::from(!v.recovered.is_empty());
    }
    result(
        "phasepad",
        mismatches == 0 && accepted_tampers == 0,
        format!("{rounds} round trips, {mismatches} mismatches; {} header bit flips, {accepted_tampers} accepted", sealed.len() * 8),
    )
}

/// Every battery at self-test size.
pub fn run_all(seed: u64) -> Vec<BatteryResult> {
    vec![
        waterfill_battery(100, seed),
        integer_battery(200, seed),
        spectral_battery(200, seed),
        cascade_battery(),
        partition_battery(20, seed),
        phasepad_battery(200, seed),
    ]
}
