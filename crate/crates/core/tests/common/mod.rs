#![allow(dead_code)]

use maestrocut_core::cutgraph::{
    BlockCaps, CostModel, Gate, Hypergraph, MaxLoadQueue, NormalizationRefs, Partition, PolicyWeights,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random layered circuit: one- and two-qubit gates, depth = first free layer.
pub fn random_circuit(n_gates: usize, n_qubits: u32, seed: u64) -> Hypergraph {
    let mut r = rng(seed);
    let mut free = vec![0u32; n_qubits as usize];
    let mut gates = Vec::new();
    for id in 0..n_gates as u64 {
        let a = r.random_range(0..n_qubits);
        let qubits = if r.random_bool(0.7) {
            let mut b = r.random_range(0..n_qubits - 1);
            if b >= a {
                b += 1;
            }
            vec![a, b]
        } else {
            vec![a]
        };
        let depth = qubits.iter().map(|&q| free[q as usize]).max().unwrap();
        for &q in &qubits {
            free[q as usize] = depth + 1;
        }
        gates.push(Gate { id, qubits, depth });
    }
    Hypergraph::from_gates(gates).unwrap()
}

pub struct Setup {
    pub queue: MaxLoadQueue,
    pub weights: PolicyWeights,
    pub refs: NormalizationRefs,
}

impl Setup {
    pub fn new(k: usize, n: usize) -> Self {
        Self {
            queue: MaxLoadQueue::uniform(k, 0.0, 1.0),
            weights: PolicyWeights::new(0.4, 0.3, 0.3).unwrap(),
            refs: NormalizationRefs::new(4.0, n as f64).unwrap(),
        }
    }

    pub fn cost(&self) -> CostModel<'_> {
        CostModel {
            weights: self.weights,
            refs: self.refs,
            queue: &self.queue,
        }
    }
}

/// Enumerate every assignment of `n` vertices to `k` blocks.
pub fn for_each_assignment(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    let mut a = vec![0usize; n];
    loop {
        f(&a);
        let mut i = 0;
        loop {
            if i == n {
                return;
            }
            a[i] += 1;
            if a[i] < k {
                break;
            }
            a[i] = 0;
            i += 1;
        }
    }
}

/// Brute-force minimum of J over all cap- and budget-feasible assignments.
pub fn exhaustive_optimum(hg: &Hypergraph, k: usize, caps: BlockCaps, budget: usize, cost: &CostModel<'_>) -> f64 {
    let mut best = f64::INFINITY;
    for_each_assignment(hg.num_vertices(), k, |a| {
        let part = Partition::uniform(a.to_vec(), k, caps, budget).unwrap();
        if part.validate(hg).is_ok() {
            let j = maestrocut_core::cutgraph::objective(hg, &part, cost).unwrap().j;
            best = best.min(j);
        }
    });
    best
}
