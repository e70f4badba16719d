//! Gate hypergraph of a cut circuit, the normalized partition objective, and
//! multilevel / incremental FM refinement.
//!
//! The objective is `J = alpha * |C|/C_max + beta * ebits/E_ref + gamma * queue/Q_ref`
//! where the cut `C` is the set of hyperedges spanning two or more blocks and
//! `ebits` sums the per-edge e-bit cost (the edge weight) over `C`.

mod hypergraph;
mod objective;
mod refine;

pub use hypergraph::{Gate, Hyperedge, Hypergraph};
pub use objective::{
    cut_set, move_gain, objective, BlockCaps, BlockLoad, CostModel, MaxLoadQueue, NormalizationRefs,
    Partition, PartitionObjective, PartitionState, PolicyWeights, QueueModel,
};
pub use refine::{fm_refine, initial_partition};

#[derive(Debug, thiserror::Error)]
pub enum PartitionError {
    #[error("invalid hypergraph: {0}")]
    InvalidHypergraph(String),
    #[error("circuit parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("assignment error: {0}")]
    Assignment(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("infeasible move of vertex {vertex} to block {target}: {reason}")]
    InfeasibleMove {
        vertex: usize,
        target: usize,
        reason: String,
    },
    #[error("block {0} violates its qubit/depth caps")]
    CapsViolated(usize),
    #[error("cut size {cut} exceeds budget {budget}")]
    CutBudget { cut: usize, budget: usize },
    #[error("infeasible: {0}")]
    Infeasible(String),
}
