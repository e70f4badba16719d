use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::PartitionError;

/// One gate instance of the circuit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gate {
    pub id: u64,
    pub qubits: Vec<u32>,
    pub depth: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperedge {
    /// Vertex indices (not gate ids), sorted and unique.
    pub pins: Vec<usize>,
    /// E-bit cost paid when this edge is cut.
    pub weight: f64,
}

/// Gate hypergraph of a circuit. Vertices are gates; each hyperedge joins a
/// gate with its wire predecessors.
#[derive(Debug, Clone)]
pub struct Hypergraph {
    gates: Vec<Gate>,
    edges: Vec<Hyperedge>,
    incidence: Vec<Vec<usize>>,
    // dense qubit / depth-level ids per vertex
    vertex_qubits: Vec<Vec<usize>>,
    vertex_level: Vec<usize>,
    num_qubits: usize,
    num_levels: usize,
    index_of: HashMap<u64, usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CircuitDoc {
    gates: Vec<Gate>,
}

impl Hypergraph {
    /// Build from gates and explicit hyperedges given as (vertex indices, weight).
    pub fn new(gates: Vec<Gate>, edges: Vec<(Vec<usize>, f64)>) -> Result<Self, PartitionError> {
        let n = gates.len();
        let mut index_of = HashMap::with_capacity(n);
        for (i, g) in gates.iter().enumerate() {
            if index_of.insert(g.id, i).is_some() {
                return Err(PartitionError::InvalidHypergraph(format!(
                    "duplicate gate id {}",
                    g.id
                )));
            }
            if g.qubits.is_empty() {
                return Err(PartitionError::InvalidHypergraph(format!(
                    "gate {} acts on no qubits",
                    g.id
                )));
            }
        }
        let mut out_edges = Vec::with_capacity(edges.len());
        for (ei, (mut pins, weight)) in edges.into_iter().enumerate() {
            pins.sort_unstable();
            pins.dedup();
            if pins.len() < 2 {
                return Err(PartitionError::InvalidHypergraph(format!(
                    "hyperedge {ei} has fewer than two members"
                )));
            }
            if let Some(&bad) = pins.iter().find(|&&p| p >= n) {
                return Err(PartitionError::InvalidHypergraph(format!(
                    "hyperedge {ei} references missing vertex {bad}"
                )));
            }
            if !(weight.is_finite() && weight >= 0.0) {
                return Err(PartitionError::InvalidHypergraph(format!(
                    "hyperedge {ei} has invalid weight {weight}"
                )));
            }
            out_edges.push(Hyperedge { pins, weight });
        }

        let mut incidence = vec![Vec::new(); n];
        for (ei, e) in out_edges.iter().enumerate() {
            for &p in &e.pins {
                incidence[p].push(ei);
            }
        }

        let mut qubit_ids: Vec<u32> = gates.iter().flat_map(|g| g.qubits.iter().copied()).collect();
        qubit_ids.sort_unstable();
        qubit_ids.dedup();
        let mut levels: Vec<u32> = gates.iter().map(|g| g.depth).collect();
        levels.sort_unstable();
        levels.dedup();
        let vertex_qubits = gates
            .iter()
            .map(|g| {
                let mut q: Vec<usize> = g
                    .qubits
                    .iter()
                    .map(|x| qubit_ids.binary_search(x).unwrap())
                    .collect();
                q.sort_unstable();
                q.dedup();
                q
            })
            .collect();
        let vertex_level = gates
            .iter()
            .map(|g| levels.binary_search(&g.depth).unwrap())
            .collect();

        Ok(Self {
            gates,
            edges: out_edges,
            incidence,
            vertex_qubits,
            vertex_level,
            num_qubits: qubit_ids.len(),
            num_levels: levels.len(),
            index_of,
        })
    }

    /// Derive hyperedges from wire/time predecessors: every gate forms one
    /// edge with the most recent earlier gate on each of its qubits.
    pub fn from_gates(gates: Vec<Gate>) -> Result<Self, PartitionError> {
        let mut order: Vec<usize> = (0..gates.len()).collect();
        order.sort_by_key(|&i| (gates[i].depth, i));
        let mut last_on_wire: HashMap<u32, usize> = HashMap::new();
        let mut edges = Vec::new();
        for &g in &order {
            let mut pins = vec![g];
            for q in &gates[g].qubits {
                if let Some(&prev) = last_on_wire.get(q) {
                    pins.push(prev);
                }
            }
            pins.sort_unstable();
            pins.dedup();
            if pins.len() >= 2 {
                edges.push((pins, 1.0));
            }
            for q in &gates[g].qubits {
                last_on_wire.insert(*q, g);
            }
        }
        Self::new(gates, edges)
    }

    /// Parse the line format `gate <id> q=<q1,q2,...> d=<depth>`.
    /// Blank lines and `#` comments are ignored.
    pub fn parse_text(src: &str) -> Result<Self, PartitionError> {
        let mut gates = Vec::new();
        for (lineno, raw) in src.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| PartitionError::Parse {
                line: lineno + 1,
                msg: msg.to_string(),
            };
            let mut toks = line.split_whitespace();
            if toks.next() != Some("gate") {
                return Err(bad("expected `gate`"));
            }
            let id: u64 = toks
                .next()
                .ok_or_else(|| bad("missing gate id"))?
                .parse()
                .map_err(|_| bad("gate id is not an integer"))?;
            let mut qubits = None;
            let mut depth = None;
            for tok in toks {
                if let Some(v) = tok.strip_prefix("q=") {
                    let qs: Result<Vec<u32>, _> = v.split(',').map(str::parse).collect();
                    qubits = Some(qs.map_err(|_| bad("bad qubit list"))?);
                } else if let Some(v) = tok.strip_prefix("d=") {
                    depth = Some(v.parse::<u32>().map_err(|_| bad("bad depth"))?);
                } else {
                    return Err(bad(&format!("unexpected token `{tok}`")));
                }
            }
            gates.push(Gate {
                id,
                qubits: qubits.ok_or_else(|| bad("missing q="))?,
                depth: depth.ok_or_else(|| bad("missing d="))?,
            });
        }
        Self::from_gates(gates)
    }

    /// Parse `{"gates": [{"id": .., "qubits": [..], "depth": ..}, ...]}`.
    pub fn parse_json(src: &str) -> Result<Self, PartitionError> {
        let doc: CircuitDoc = serde_json::from_str(src).map_err(|e| PartitionError::Parse {
            line: e.line(),
            msg: e.to_string(),
        })?;
        Self::from_gates(doc.gates)
    }

    pub fn num_vertices(&self) -> usize {
        self.gates.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn gates(&self) -> &[Gate] {
        &self.gates
    }

    pub fn edges(&self) -> &[Hyperedge] {
        &self.edges
    }

    pub fn edge(&self, e: usize) -> &Hyperedge {
        &self.edges[e]
    }

    /// Hyperedges incident to vertex `v`.
    pub fn incident(&self, v: usize) -> &[usize] {
        &self.incidence[v]
    }

    /// Dense qubit indices touched by vertex `v`.
    pub fn qubits_of(&self, v: usize) -> &[usize] {
        &self.vertex_qubits[v]
    }

    /// Dense depth-level index of vertex `v`.
    pub fn level_of(&self, v: usize) -> usize {
        self.vertex_level[v]
    }

    pub fn num_qubits(&self) -> usize {
        self.num_qubits
    }

    pub fn num_levels(&self) -> usize {
        self.num_levels
    }

    pub fn vertex_index(&self, gate_id: u64) -> Option<usize> {
        self.index_of.get(&gate_id).copied()
    }

    /// Replace every edge weight (per-edge e-bit cost).
    pub fn with_edge_weights(mut self, weights: &[f64]) -> Result<Self, PartitionError> {
        if weights.len() != self.edges.len() {
            return Err(PartitionError::InvalidHypergraph(format!(
                "expected {} edge weights, got {}",
                self.edges.len(),
                weights.len()
            )));
        }
        for (e, &w) in self.edges.iter_mut().zip(weights) {
            if !(w.is_finite() && w >= 0.0) {
                return Err(PartitionError::InvalidHypergraph(format!(
                    "invalid edge weight {w}"
                )));
            }
            e.weight = w;
        }
        Ok(self)
    }

    /// Vertices sharing at least one hyperedge with `v`.
    pub fn neighbours(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.incidence[v]
            .iter()
            .flat_map(move |&e| self.edges[e].pins.iter().copied())
            .filter(move |&u| u != v)
    }
}
