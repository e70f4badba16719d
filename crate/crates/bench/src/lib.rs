//! Shared inputs for the criterion benches.

use maestrocut_core::cutgraph::{Gate, Hypergraph};
use maestrocut_core::phasepad::FragmentJob;
use maestrocut_core::rng::Stream;
use rand::Rng;

/// Layered circuit with 70% two-qubit gates.
pub fn circuit(n_gates: usize, n_qubits: u32, seed: u64) -> Hypergraph {
    let mut r = Stream::new(seed).rng();
    let mut free = vec![0u32; n_qubits as usize];
    let mut gates = Vec::with_capacity(n_gates);
    for id in 0..n_gates as u64 {
        let a = r.random_range(0..n_qubits);
        let qubits = if r.random_bool(0.7) {
            let b = (a + r.random_range(1..n_qubits)) % n_qubits;
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
    Hypergraph::from_gates(gates).expect("generated circuit is valid")
}

pub fn fragment_jobs(n: usize, payload_len: usize, seed: u64) -> Vec<FragmentJob> {
    let mut r = Stream::new(seed).rng();
    (0..n as u64)
        .map(|i| FragmentJob {
            fragment_id: i,
            shots: r.random_range(20..4000),
            payload: (0..payload_len).map(|_| r.random()).collect(),
        })
        .collect()
}
