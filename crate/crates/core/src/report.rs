//! Metric rows, bootstrap intervals, CSV/JSON emission, and the pass/fail
//! dashboard.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::Stream;
use crate::tier2::SloTargets;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("duplicate metric row {0}")]
    Duplicate(String),
    #[error("i/o error on {path}: {msg}")]
    Io { path: PathBuf, msg: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ReportError {
    ReportError::Io {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// One CSV line: `tier,name,policy,seed,metric,value,units`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub tier: String,
    /// Workload (Tier-1) or scenario (Tier-2).
    pub name: String,
    pub policy: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
    pub units: String,
}

impl MetricRow {
    pub fn new(tier: &str, name: &str, policy: &str, seed: u64, metric: &str, value: f64, units: &str) -> Self {
        Self {
            tier: tier.into(),
            name: name.into(),
            policy: policy.into(),
            seed,
            metric: metric.into(),
            value,
            units: units.into(),
        }
    }

    fn key(&self) -> (&str, &str, &str, u64, &str) {
        (&self.tier, &self.name, &self.policy, self.seed, &self.metric)
    }
}

/// Sort rows by (tier, name, policy, seed, metric) and reject duplicates.
pub fn normalize_rows(mut rows: Vec<MetricRow>) -> Result<Vec<MetricRow>, ReportError> {
    rows.sort_by(|a, b| a.key().cmp(&b.key()));
    if let Some(w) = rows.windows(2).find(|w| w[0].key() == w[1].key()) {
        return Err(ReportError::Duplicate(format!("{:?}", w[0].key())));
    }
    Ok(rows)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Linear-interpolation quantile of sorted data (`p` in [0, 1]).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let pos = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn quantile(xs: &[f64], p: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Mean,
    Median,
}

impl Statistic {
    pub fn eval(&self, xs: &[f64]) -> f64 {
        match self {
            Statistic::Mean => mean(xs),
            Statistic::Median => median(xs),
        }
    }
}

pub const DEFAULT_RESAMPLES: usize = 10_000;
pub const DEFAULT_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub resamples: usize,
}

/// Percentile bootstrap. The interval is widened if needed so that it
/// always contains the point estimate.
pub fn bootstrap_ci(
    samples: &[f64],
    stat: Statistic,
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapCi, ReportError> {
    if samples.len() < 2 {
        return Err(ReportError::TooFewSamples {
            need: 2,
            got: samples.len(),
        });
    }
    if resamples == 0 || !(level > 0.0 && level < 1.0) {
        return Err(ReportError::Invalid(format!("resamples={resamples}, level={level}")));
    }
    let value = stat.eval(samples);
    let n = samples.len();
    let mut rng = Stream::new(seed).child("bootstrap").rng();
    let mut buf = vec![0.0; n];
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| {
            for b in buf.iter_mut() {
                *b = samples[rng.random_range(0..n)];
            }
            stat.eval(&buf)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let lower = quantile_sorted(&stats, tail).min(value);
    let upper = quantile_sorted(&stats, 1.0 - tail).max(value);
    Ok(BootstrapCi {
        value,
        lower,
        upper,
        level,
        resamples,
    })
}

pub const CSV_HEADER: [&str; 7] = ["tier", "name", "policy", "seed", "metric", "value", "units"];

/// Serialize rows (sorted, LF line endings, header first).
pub fn rows_to_csv(rows: &[MetricRow]) -> Result<Vec<u8>, ReportError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .has_headers(false)
        .from_writer(Vec::new());
    let fail = |e: csv::Error| ReportError::Invalid(e.to_string());
    w.write_record(CSV_HEADER).map_err(fail)?;
    for r in rows {
        w.write_record([
            r.tier.as_str(),
            r.name.as_str(),
            r.policy.as_str(),
            &r.seed.to_string(),
            r.metric.as_str(),
            &r.value.to_string(),
            r.units.as_str(),
        ])
        .map_err(fail)?;
    }
    w.into_inner().map_err(|e| ReportError::Invalid(e.to_string()))
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<MetricRow>, ReportError> {
    let mut r = csv::ReaderBuilder::new().from_path(path).map_err(|e| io_err(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| io_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != CSV_HEADER {
        return Err(io_err(path, format!("unexpected header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(|e| io_err(path, e))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Pass,
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryStatus {
    Ok,
    /// The metric was absent (or had too few samples); never passes.
    Missing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparison {
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = ">=")]
    AtLeast,
}

impl Comparison {
    pub fn holds(&self, value: f64, target: f64) -> bool {
        match self {
            Comparison::AtMost => value <= target,
            Comparison::AtLeast => value >= target,
        }
    }
}

/// Pass/fail thresholds, inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Targets {
    pub contraction_max: f64,
    pub slo: SloTargets,
}

impl Default for Targets {
    fn default() -> Self {
        Self {
            contraction_max: 0.6,
            slo: SloTargets::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DashboardEntry {
    pub tier: String,
    pub name: String,
    pub metric: String,
    pub statistic: Statistic,
    pub comparison: Comparison,
    pub target: f64,
    pub value: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    pub samples: usize,
    pub status: EntryStatus,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dashboard {
    pub entries: Vec<DashboardEntry>,
    pub decision: Decision,
}

/// What the dashboard checks: one metric of one workload/scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub tier: String,
    pub name: String,
    pub policy: Option<String>,
    pub metric: String,
    pub statistic: Statistic,
    pub comparison: Comparison,
    pub target: f64,
    pub min_samples: usize,
}

/// Options for dashboard intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CiOptions {
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for CiOptions {
    fn default() -> Self {
        Self {
            resamples: DEFAULT_RESAMPLES,
            level: DEFAULT_LEVEL,
            seed: 0,
        }
    }
}

/// Evaluate each check against matching rows. A check with fewer than its
/// minimum number of samples is `missing` and fails.
pub fn evaluate_checks(rows: &[MetricRow], checks: &[Check], ci: CiOptions) -> Result<Dashboard, ReportError> {
    let mut entries = Vec::with_capacity(checks.len());
    for c in checks {
        let xs: Vec<f64> = rows
            .iter()
            .filter(|r| {
                r.tier == c.tier
                    && r.name == c.name
                    && r.metric == c.metric
                    && c.policy.as_ref().is_none_or(|p| *p == r.policy)
            })
            .map(|r| r.value)
            .collect();
        let enough = xs.len() >= c.min_samples.max(1);
        let (value, lo, hi) = if !enough {
            (None, None, None)
        } else if xs.len() >= 2 {
            let b = bootstrap_ci(&xs, c.statistic, ci.resamples, ci.level, ci.seed)?;
            (Some(b.value), Some(b.lower), Some(b.upper))
        } else {
            (Some(xs[0]), None, None)
        };
        let status = if enough { EntryStatus::Ok } else { EntryStatus::Missing };
        let pass = value.is_some_and(|v| c.comparison.holds(v, c.target));
        entries.push(DashboardEntry {
            tier: c.tier.clone(),
            name: c.name.clone(),
            metric: c.metric.clone(),
            statistic: c.statistic,
            comparison: c.comparison,
            target: c.target,
            value,
            ci_lower: lo,
            ci_upper: hi,
            samples: xs.len(),
            status,
            decision: if pass { Decision::Pass } else { Decision::Fail },
        });
    }
    let decision = if !entries.is_empty() && entries.iter().all(|e| e.decision == Decision::Pass) {
        Decision::Pass
    } else {
        Decision::Fail
    };
    Ok(Dashboard { entries, decision })
}

/// Standard checks: Tier-1 contraction (mean over seeds) per workload in
/// `contraction_workloads`, and per Tier-2 scenario the median jitter,
/// TTFR, outcome fractions and PhasePad overhead.
pub fn standard_checks(
    contraction_workloads: &[String],
    contraction_policy: &str,
    scenarios: &[String],
    targets: &Targets,
    min_episodes: usize,
) -> Vec<Check> {
    let mut out = Vec::new();
    for w in contraction_workloads {
        out.push(Check {
            tier: "tier1".into(),
            name: w.clone(),
            policy: Some(contraction_policy.into()),
            metric: "contraction".into(),
            statistic: Statistic::Mean,
            comparison: Comparison::AtMost,
            target: targets.contraction_max,
            min_samples: 2,
        });
    }
    out.extend(slo_checks(scenarios, &targets.slo, min_episodes));
    out
}

/// Per scenario: median jitter, TTFR, outcome fractions and PhasePad overhead.
pub fn slo_checks(scenarios: &[String], targets: &SloTargets, min_episodes: usize) -> Vec<Check> {
    let slo = [
        ("jitter_ms", Comparison::AtMost, targets.jitter_max_ms),
        ("ttfr_ms", Comparison::AtMost, targets.ttfr_max_ms),
        ("success_frac", Comparison::AtLeast, targets.success_min),
        ("timeout_frac", Comparison::AtMost, targets.timeout_max),
        ("error_frac", Comparison::AtMost, targets.error_max),
        ("phasepad_overhead", Comparison::AtMost, targets.overhead_max),
    ];
    let mut out = Vec::new();
    for s in scenarios {
        for (metric, cmp, target) in slo {
            out.push(Check {
                tier: "tier2".into(),
                name: s.clone(),
                policy: None,
                metric: metric.into(),
                statistic: Statistic::Median,
                comparison: cmp,
                target,
                min_samples: min_episodes,
            });
        }
    }
    out
}

/// Files written by [`emit`].
pub const TIER1_CSV: &str = "tier1_metrics.csv";
pub const TIER2_CSV: &str = "tier2_metrics.csv";
pub const DASHBOARD_JSON: &str = "dashboard.json";
pub const CONFIG_ECHO_JSON: &str = "config_echo.json";

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ReportError> {
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, ReportError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| ReportError::Invalid(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Write the metric CSVs, the dashboard and the config echo into `out_dir`.
pub fn emit<C: Serialize>(
    out_dir: &Path,
    tier1: &[MetricRow],
    tier2: &[MetricRow],
    dashboard: &Dashboard,
    config_echo: &C,
) -> Result<Vec<PathBuf>, ReportError> {
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let files = [
        (TIER1_CSV, rows_to_csv(&normalize_rows(tier1.to_vec())?)?),
        (TIER2_CSV, rows_to_csv(&normalize_rows(tier2.to_vec())?)?),
        (DASHBOARD_JSON, to_json_bytes(dashboard)?),
        (CONFIG_ECHO_JSON, to_json_bytes(config_echo)?),
    ];
    let mut written = Vec::new();
    for (name, bytes) in files {
        let path = out_dir.join(name);
        write_file(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}
