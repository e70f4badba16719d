use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{Hypergraph, PartitionError};

/// Per-block resource limits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCaps {
    pub max_qubits: usize,
    /// Maximum number of distinct depth levels a block may span.
    pub max_depth: usize,
}

/// Block assignment of every vertex, plus the limits it must respect.
/// Blocks are numbered `0..k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    assignment: Vec<usize>,
    caps: Vec<BlockCaps>,
    cut_budget: usize,
}

impl Partition {
    pub fn new(
        assignment: Vec<usize>,
        caps: Vec<BlockCaps>,
        cut_budget: usize,
    ) -> Result<Self, PartitionError> {
        if caps.is_empty() {
            return Err(PartitionError::Config("partition needs at least one block".into()));
        }
        if let Some((v, &b)) = assignment.iter().enumerate().find(|(_, &b)| b >= caps.len()) {
            return Err(PartitionError::Assignment(format!(
                "vertex {v} assigned to block {b}, but only {} blocks exist",
                caps.len()
            )));
        }
        Ok(Self {
            assignment,
            caps,
            cut_budget,
        })
    }

    /// Uniform caps for all `k` blocks.
    pub fn uniform(
        assignment: Vec<usize>,
        k: usize,
        caps: BlockCaps,
        cut_budget: usize,
    ) -> Result<Self, PartitionError> {
        Self::new(assignment, vec![caps; k], cut_budget)
    }

    pub fn k(&self) -> usize {
        self.caps.len()
    }

    pub fn block_of(&self, v: usize) -> usize {
        self.assignment[v]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn caps(&self) -> &[BlockCaps] {
        &self.caps
    }

    pub fn cut_budget(&self) -> usize {
        self.cut_budget
    }

    pub(crate) fn with_assignment(&self, assignment: Vec<usize>) -> Self {
        Self {
            assignment,
            caps: self.caps.clone(),
            cut_budget: self.cut_budget,
        }
    }

    fn check_covers(&self, hg: &Hypergraph) -> Result<(), PartitionError> {
        if self.assignment.len() < hg.num_vertices() {
            return Err(PartitionError::Assignment(format!(
                "vertex {} (gate {}) is unassigned",
                self.assignment.len(),
                hg.gates()[self.assignment.len()].id
            )));
        }
        if self.assignment.len() > hg.num_vertices() {
            return Err(PartitionError::Assignment(format!(
                "assignment has {} entries for {} vertices",
                self.assignment.len(),
                hg.num_vertices()
            )));
        }
        Ok(())
    }

    /// Full validity: coverage, caps, and cut budget.
    pub fn validate(&self, hg: &Hypergraph) -> Result<(), PartitionError> {
        let state = PartitionState::new(hg, self)?;
        for b in 0..self.k() {
            if !state.block_within_caps(b) {
                return Err(PartitionError::CapsViolated(b));
            }
        }
        if state.cut_count() > self.cut_budget {
            return Err(PartitionError::CutBudget {
                cut: state.cut_count(),
                budget: self.cut_budget,
            });
        }
        Ok(())
    }
}

/// Policy weights of the composite objective; they sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyWeights {
    alpha: f64,
    beta: f64,
    gamma: f64,
}

impl PolicyWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self, PartitionError> {
        let ok = [alpha, beta, gamma].iter().all(|w| w.is_finite() && *w >= 0.0);
        if !ok || ((alpha + beta + gamma) - 1.0).abs() > 1e-12 {
            return Err(PartitionError::Config(format!(
                "policy weights ({alpha}, {beta}, {gamma}) must be nonnegative and sum to 1"
            )));
        }
        Ok(Self { alpha, beta, gamma })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn beta(&self) -> f64 {
        self.beta
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

/// Moving-average references that make the e-bit and queue terms
/// dimensionless. Updated as an exponential moving average whose half-life
/// is counted in refinement events.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRefs {
    pub e_ref: f64,
    pub q_ref: f64,
    pub half_life: u32,
    pub samples: u64,
}

impl NormalizationRefs {
    pub const DEFAULT_HALF_LIFE: u32 = 8;

    pub fn new(e_ref: f64, q_ref: f64) -> Result<Self, PartitionError> {
        if !(e_ref > 0.0 && e_ref.is_finite() && q_ref > 0.0 && q_ref.is_finite()) {
            return Err(PartitionError::Config(format!(
                "normalization references must be positive (e_ref={e_ref}, q_ref={q_ref})"
            )));
        }
        Ok(Self {
            e_ref,
            q_ref,
            half_life: Self::DEFAULT_HALF_LIFE,
            samples: 1,
        })
    }

    /// Fold one observation into the moving averages. Non-positive
    /// observations are ignored so the references stay positive.
    pub fn observe(&mut self, ebit_per_cut: f64, queue_delay: f64) {
        let w = 1.0 - 0.5f64.powf(1.0 / f64::from(self.half_life.max(1)));
        if ebit_per_cut > 0.0 && ebit_per_cut.is_finite() {
            self.e_ref += w * (ebit_per_cut - self.e_ref);
        }
        if queue_delay > 0.0 && queue_delay.is_finite() {
            self.q_ref += w * (queue_delay - self.q_ref);
        }
        self.samples += 1;
    }
}

/// Size summary of one block, handed to queue models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BlockLoad {
    pub gates: usize,
    pub qubits: usize,
    pub depth: usize,
}

/// Expected queueing delay (ms) of a partition, given its block loads.
pub trait QueueModel: Send + Sync {
    fn expected_delay(&self, blocks: &[BlockLoad]) -> f64;
}

impl<F> QueueModel for F
where
    F: Fn(&[BlockLoad]) -> f64 + Send + Sync,
{
    fn expected_delay(&self, blocks: &[BlockLoad]) -> f64 {
        self(blocks)
    }
}

/// Fragments run in parallel; the job waits for the slowest block.
/// Delay = `base_ms + max_b per_gate_ms[b] * gates_b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxLoadQueue {
    pub base_ms: f64,
    pub per_gate_ms: Vec<f64>,
}

impl MaxLoadQueue {
    pub fn uniform(k: usize, base_ms: f64, per_gate_ms: f64) -> Self {
        Self {
            base_ms,
            per_gate_ms: vec![per_gate_ms; k],
        }
    }
}

impl QueueModel for MaxLoadQueue {
    fn expected_delay(&self, blocks: &[BlockLoad]) -> f64 {
        let worst = blocks
            .iter()
            .zip(&self.per_gate_ms)
            .map(|(b, &c)| c * b.gates as f64)
            .fold(0.0, f64::max);
        self.base_ms + worst
    }
}

/// Everything the objective needs besides the hypergraph and the partition.
#[derive(Clone, Copy)]
pub struct CostModel<'a> {
    pub weights: PolicyWeights,
    pub refs: NormalizationRefs,
    pub queue: &'a dyn QueueModel,
}

/// The three normalized terms and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionObjective {
    pub c_bar: f64,
    pub e_bar: f64,
    pub q_bar: f64,
    pub j: f64,
}

impl PartitionObjective {
    pub fn combine(weights: &PolicyWeights, c_bar: f64, e_bar: f64, q_bar: f64) -> Self {
        Self {
            c_bar,
            e_bar,
            q_bar,
            j: weights.alpha * c_bar + weights.beta * e_bar + weights.gamma * q_bar,
        }
    }
}

/// Hyperedges whose pins span two or more blocks.
pub fn cut_set(hg: &Hypergraph, part: &Partition) -> Result<BTreeSet<usize>, PartitionError> {
    part.check_covers(hg)?;
    Ok(hg
        .edges()
        .iter()
        .enumerate()
        .filter(|(_, e)| {
            let first = part.block_of(e.pins[0]);
            e.pins.iter().any(|&p| part.block_of(p) != first)
        })
        .map(|(i, _)| i)
        .collect())
}

/// Normalized composite objective of a partition.
pub fn objective(
    hg: &Hypergraph,
    part: &Partition,
    cost: &CostModel<'_>,
) -> Result<PartitionObjective, PartitionError> {
    PartitionState::new(hg, part)?.objective(cost)
}

/// `J(part) - J(part with vertex moved to target)`; positive means the move helps.
pub fn move_gain(
    hg: &Hypergraph,
    part: &Partition,
    vertex: usize,
    target: usize,
    cost: &CostModel<'_>,
) -> Result<f64, PartitionError> {
    let mut state = PartitionState::new(hg, part)?;
    if vertex >= hg.num_vertices() {
        return Err(PartitionError::Assignment(format!("no vertex {vertex}")));
    }
    if target >= part.k() {
        return Err(PartitionError::InfeasibleMove {
            vertex,
            target,
            reason: "no such block".into(),
        });
    }
    if let Some(reason) = state.move_violation(vertex, target, part.cut_budget()) {
        return Err(PartitionError::InfeasibleMove {
            vertex,
            target,
            reason,
        });
    }
    let before = state.objective(cost)?.j;
    state.apply_move(vertex, target);
    let after = state.objective(cost)?.j;
    Ok(before - after)
}

/// Incrementally maintained bookkeeping for a partition: pin counts per
/// (edge, block), cut size and e-bits, and per-block qubit/depth occupancy.
#[derive(Debug, Clone)]
pub struct PartitionState<'h> {
    hg: &'h Hypergraph,
    k: usize,
    caps: Vec<BlockCaps>,
    cut_budget: usize,
    assign: Vec<usize>,
    pins: Vec<u32>,
    spans: Vec<u32>,
    cut: usize,
    ebits: f64,
    qubit_use: Vec<u32>,
    level_use: Vec<u32>,
    loads: Vec<BlockLoad>,
}

impl<'h> PartitionState<'h> {
    pub fn new(hg: &'h Hypergraph, part: &Partition) -> Result<Self, PartitionError> {
        part.check_covers(hg)?;
        let k = part.k();
        let nq = hg.num_qubits();
        let nl = hg.num_levels();
        let mut s = Self {
            hg,
            k,
            caps: part.caps.clone(),
            cut_budget: part.cut_budget,
            assign: part.assignment.clone(),
            pins: vec![0; hg.num_edges() * k],
            spans: vec![0; hg.num_edges()],
            cut: 0,
            ebits: 0.0,
            qubit_use: vec![0; k * nq],
            level_use: vec![0; k * nl],
            loads: vec![BlockLoad::default(); k],
        };
        for (ei, e) in hg.edges().iter().enumerate() {
            for &p in &e.pins {
                let slot = &mut s.pins[ei * k + s.assign[p]];
                if *slot == 0 {
                    s.spans[ei] += 1;
                }
                *slot += 1;
            }
            if s.spans[ei] >= 2 {
                s.cut += 1;
                s.ebits += e.weight;
            }
        }
        for v in 0..hg.num_vertices() {
            s.add_vertex_resources(v, s.assign[v]);
        }
        Ok(s)
    }

    fn add_vertex_resources(&mut self, v: usize, b: usize) {
        let (nq, nl) = (self.hg.num_qubits(), self.hg.num_levels());
        for &q in self.hg.qubits_of(v) {
            let c = &mut self.qubit_use[b * nq + q];
            if *c == 0 {
                self.loads[b].qubits += 1;
            }
            *c += 1;
        }
        let c = &mut self.level_use[b * nl + self.hg.level_of(v)];
        if *c == 0 {
            self.loads[b].depth += 1;
        }
        *c += 1;
        self.loads[b].gates += 1;
    }

    fn remove_vertex_resources(&mut self, v: usize, b: usize) {
        let (nq, nl) = (self.hg.num_qubits(), self.hg.num_levels());
        for &q in self.hg.qubits_of(v) {
            let c = &mut self.qubit_use[b * nq + q];
            *c -= 1;
            if *c == 0 {
                self.loads[b].qubits -= 1;
            }
        }
        let c = &mut self.level_use[b * nl + self.hg.level_of(v)];
        *c -= 1;
        if *c == 0 {
            self.loads[b].depth -= 1;
        }
        self.loads[b].gates -= 1;
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn hypergraph(&self) -> &'h Hypergraph {
        self.hg
    }

    pub fn block_of(&self, v: usize) -> usize {
        self.assign[v]
    }

    pub fn cut_count(&self) -> usize {
        self.cut
    }

    pub fn ebits(&self) -> f64 {
        self.ebits
    }

    pub fn loads(&self) -> &[BlockLoad] {
        &self.loads
    }

    pub fn is_cut(&self, e: usize) -> bool {
        self.spans[e] >= 2
    }

    pub fn block_within_caps(&self, b: usize) -> bool {
        self.loads[b].qubits <= self.caps[b].max_qubits && self.loads[b].depth <= self.caps[b].max_depth
    }

    /// Number of cut hyperedges incident to `v`.
    pub fn cut_pressure(&self, v: usize) -> u32 {
        self.hg.incident(v).iter().filter(|&&e| self.is_cut(e)).count() as u32
    }

    /// Move `v` to block `to` with no feasibility check.
    pub fn apply_move(&mut self, v: usize, to: usize) {
        let from = self.assign[v];
        if from == to {
            return;
        }
        let k = self.k;
        for &e in self.hg.incident(v) {
            let was_cut = self.spans[e] >= 2;
            let a = &mut self.pins[e * k + from];
            *a -= 1;
            if *a == 0 {
                self.spans[e] -= 1;
            }
            let b = &mut self.pins[e * k + to];
            if *b == 0 {
                self.spans[e] += 1;
            }
            *b += 1;
            let now_cut = self.spans[e] >= 2;
            match (was_cut, now_cut) {
                (false, true) => {
                    self.cut += 1;
                    self.ebits += self.hg.edge(e).weight;
                }
                (true, false) => {
                    self.cut -= 1;
                    self.ebits -= self.hg.edge(e).weight;
                }
                _ => {}
            }
        }
        self.remove_vertex_resources(v, from);
        self.add_vertex_resources(v, to);
        self.assign[v] = to;
        if self.cut == 0 {
            // keep the float sum exact at the empty cut
            self.ebits = 0.0;
        }
    }

    /// Why moving `v` to `to` would break caps or the cut limit, if it would.
    pub fn move_violation(&mut self, v: usize, to: usize, cut_limit: usize) -> Option<String> {
        let from = self.assign[v];
        if from == to {
            return None;
        }
        self.apply_move(v, to);
        let reason = if !self.block_within_caps(to) {
            Some(format!("block {to} would exceed its qubit/depth caps"))
        } else if self.cut > cut_limit {
            Some(format!("cut size {} would exceed limit {cut_limit}", self.cut))
        } else {
            None
        };
        self.apply_move(v, from);
        reason
    }

    pub fn objective(&self, cost: &CostModel<'_>) -> Result<PartitionObjective, PartitionError> {
        if self.cut_budget == 0 {
            return Err(PartitionError::Config("cut budget C_max must be positive".into()));
        }
        if !(cost.refs.e_ref > 0.0 && cost.refs.q_ref > 0.0) {
            return Err(PartitionError::Config("normalization references must be positive".into()));
        }
        let c_bar = self.cut as f64 / self.cut_budget as f64;
        let e_bar = self.ebits.max(0.0) / cost.refs.e_ref;
        let q_bar = cost.queue.expected_delay(&self.loads).max(0.0) / cost.refs.q_ref;
        Ok(PartitionObjective::combine(&cost.weights, c_bar, e_bar, q_bar))
    }

    pub fn to_partition(&self) -> Partition {
        Partition {
            assignment: self.assign.clone(),
            caps: self.caps.clone(),
            cut_budget: self.cut_budget,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::Gate;
    use super::*;

    fn caps() -> BlockCaps {
        BlockCaps {
            max_qubits: 64,
            max_depth: 64,
        }
    }

    fn no_queue(_: &[BlockLoad]) -> f64 {
        0.0
    }

    fn path4() -> Hypergraph {
        let gates = (0..4)
            .map(|i| Gate {
                id: i,
                qubits: vec![i as u32],
                depth: 0,
            })
            .collect();
        Hypergraph::new(gates, vec![(vec![0, 1], 1.0), (vec![1, 2], 1.0), (vec![2, 3], 1.0)]).unwrap()
    }

    #[test]
    fn single_block_has_empty_cut() {
        let hg = path4();
        let p = Partition::uniform(vec![0; 4], 1, caps(), 5).unwrap();
        assert!(cut_set(&hg, &p).unwrap().is_empty());
    }

    #[test]
    fn minimal_spanning_edge_is_cut() {
        let gates = vec![
            Gate { id: 1, qubits: vec![0], depth: 0 },
            Gate { id: 2, qubits: vec![1], depth: 0 },
        ];
        let hg = Hypergraph::new(gates, vec![(vec![0, 1], 1.0)]).unwrap();
        let p = Partition::uniform(vec![0, 1], 2, caps(), 5).unwrap();
        assert_eq!(cut_set(&hg, &p).unwrap().into_iter().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn unassigned_vertex_is_an_error() {
        let hg = path4();
        let p = Partition::uniform(vec![0; 3], 1, caps(), 5).unwrap();
        assert!(matches!(cut_set(&hg, &p), Err(PartitionError::Assignment(_))));
    }

    #[test]
    fn weighted_sum_examples() {
        let w = PolicyWeights::new(0.5, 0.3, 0.2).unwrap();
        let o = PartitionObjective::combine(&w, 0.4, 0.5, 1.0);
        assert!((o.j - 0.55).abs() < 1e-12);
        let o = PartitionObjective::combine(&w, 1.0, 1.0, 1.0);
        assert!((o.j - 1.0).abs() < 1e-12);
        assert!(PolicyWeights::new(0.5, 0.5, 0.1).is_err());
        assert!(PolicyWeights::new(-0.1, 0.6, 0.5).is_err());
    }

    #[test]
    fn cut_only_weight_gives_cut_fraction() {
        // three separate two-pin edges, each cut
        let gates: Vec<Gate> = (0..6)
            .map(|i| Gate { id: i, qubits: vec![i as u32], depth: 0 })
            .collect();
        let hg = Hypergraph::new(
            gates,
            vec![(vec![0, 1], 1.0), (vec![2, 3], 1.0), (vec![4, 5], 1.0)],
        )
        .unwrap();
        let p = Partition::uniform(vec![0, 1, 0, 1, 0, 1], 2, caps(), 10).unwrap();
        let cost = CostModel {
            weights: PolicyWeights::new(1.0, 0.0, 0.0).unwrap(),
            refs: NormalizationRefs::new(1.0, 1.0).unwrap(),
            queue: &no_queue,
        };
        let o = objective(&hg, &p, &cost).unwrap();
        assert!((o.j - 0.3).abs() < 1e-12);
        let zero_budget = Partition::uniform(vec![0; 6], 2, caps(), 0).unwrap();
        assert!(matches!(objective(&hg, &zero_budget, &cost), Err(PartitionError::Config(_))));
    }

    #[test]
    fn ema_half_life() {
        let mut r = NormalizationRefs::new(1.0, 10.0).unwrap();
        for _ in 0..8 {
            r.observe(3.0, 10.0);
        }
        // after one half-life the gap to the new level has halved
        assert!((r.e_ref - 2.0).abs() < 1e-12);
        assert!((r.q_ref - 10.0).abs() < 1e-12);
        r.observe(-1.0, 0.0);
        assert!(r.e_ref > 0.0 && r.q_ref > 0.0);
    }

    #[test]
    fn infeasible_move_is_reported() {
        let hg = path4();
        let tight = BlockCaps { max_qubits: 2, max_depth: 4 };
        let p = Partition::uniform(vec![0, 0, 1, 1], 2, tight, 5).unwrap();
        let cost = CostModel {
            weights: PolicyWeights::new(1.0, 0.0, 0.0).unwrap(),
            refs: NormalizationRefs::new(1.0, 1.0).unwrap(),
            queue: &no_queue,
        };
        assert!(matches!(
            move_gain(&hg, &p, 1, 1, &cost),
            Err(PartitionError::InfeasibleMove { .. })
        ));
    }
}
