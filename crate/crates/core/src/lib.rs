pub mod allocator;
pub mod cascade;
pub mod config;
pub mod cutgraph;
pub mod drifttrack;
pub mod phasepad;
pub mod report;
pub mod rng;
pub mod runner;
pub mod selftest;
pub mod tier1;
pub mod tier2;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Tier1(#[from] tier1::Tier1Error),
    #[error(transparent)]
    Tier2(#[from] tier2::Tier2Error),
    #[error(transparent)]
    Report(#[from] report::ReportError),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}
