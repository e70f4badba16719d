//! Orchestration: Tier-1 episodes across workloads, seeds and policies,
//! Tier-2 scenarios and overhead sweeps, the dashboard, and file emission.
//! Work fans out on the current rayon pool and results are collected in
//! (workload, seed, policy) order, so output never depends on scheduling.

use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::report::{self, CiOptions, Dashboard, MetricRow};
use crate::tier1::{self, Episode, EpisodeConfig, Policy, Tier1Error, WorkloadName};
use crate::tier2::{self, Tier2Error};
use crate::Error;

pub const TIER1_STEPS_CSV: &str = "tier1_steps.csv";

/// Per-fragment, per-step trace of one episode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRow {
    pub name: String,
    pub policy: String,
    pub seed: u64,
    pub step: usize,
    pub fragment: usize,
    pub shots: u64,
    pub true_variance: f64,
    pub kalman_mean: f64,
    pub innovation: f64,
    pub trigger: bool,
    pub repartitioned: bool,
    pub estimator: String,
    pub entropy_bits: f64,
    pub variance_proxy: f64,
    pub sq_error: f64,
}

pub fn step_rows(ep: &Episode) -> Vec<StepRow> {
    let mut out = Vec::new();
    for r in &ep.records {
        for i in 0..r.plan.len() {
            out.push(StepRow {
                name: ep.workload.label().into(),
                policy: ep.policy.label().into(),
                seed: ep.replicate,
                step: r.step,
                fragment: i,
                shots: r.plan[i],
                true_variance: r.true_variance[i],
                kalman_mean: r.kalman_means[i],
                innovation: r.innovations[i],
                trigger: r.triggers.contains(&i),
                repartitioned: r.repartitioned,
                estimator: r.choices[i].as_str().into(),
                entropy_bits: r.entropy_estimates[i],
                variance_proxy: r.variance_proxy,
                sq_error: r.sq_errors[i],
            });
        }
    }
    out
}

pub fn step_rows_to_csv(rows: &[StepRow]) -> Result<Vec<u8>, report::ReportError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record([
            "name", "policy", "seed", "step", "fragment", "shots", "true_variance", "kalman_mean", "innovation",
            "trigger", "repartitioned", "estimator", "entropy_bits", "variance_proxy", "sq_error",
        ])
        .map_err(|e| report::ReportError::Invalid(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| report::ReportError::Invalid(e.to_string()))?;
    }
    w.into_inner().map_err(|e| report::ReportError::Invalid(e.to_string()))
}

/// Summed wall-clock split over Tier-1 episodes. Reported, never written to CSVs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PadTiming {
    pub episodes: usize,
    pub total: Duration,
    pub mask_seal: Duration,
    pub open_unmask: Duration,
}

impl PadTiming {
    pub fn add(&mut self, ep: &Episode) {
        self.episodes += 1;
        self.total += ep.timing.total;
        self.mask_seal += ep.timing.mask_seal;
        self.open_unmask += ep.timing.open_unmask;
    }

    pub fn mask_seal_share(&self) -> f64 {
        self.mask_seal.as_secs_f64() / self.total.as_secs_f64().max(f64::MIN_POSITIVE)
    }

    pub fn round_trip_share(&self) -> f64 {
        (self.mask_seal + self.open_unmask).as_secs_f64() / self.total.as_secs_f64().max(f64::MIN_POSITIVE)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Tier1Output {
    pub rows: Vec<MetricRow>,
    pub steps: Vec<StepRow>,
    pub timing: PadTiming,
}

/// Metric rows of one episode against its uniform arm.
pub fn episode_rows(ep: &Episode, uniform: &Episode) -> Result<Vec<MetricRow>, Tier1Error> {
    let m = tier1::episode_metrics(ep, uniform)?;
    let post: Vec<_> = ep.records.iter().filter(|r| !r.warmup).collect();
    let choices = post.iter().map(|r| r.choices.len()).sum::<usize>().max(1);
    let mle = post
        .iter()
        .flat_map(|r| &r.choices)
        .filter(|c| **c == crate::cascade::EstimatorChoice::Mle)
        .count();
    let proxy = post.iter().map(|r| r.variance_proxy).sum::<f64>() / post.len().max(1) as f64;
    let row = |metric: &str, value: f64, units: &str| {
        MetricRow::new("tier1", ep.workload.label(), ep.policy.label(), ep.replicate, metric, value, units)
    };
    Ok(vec![
        row("contraction", m.contraction, "ratio"),
        row("p95_tail", m.p95_tail, "shots"),
        row("final_mse", m.final_mse, "mse"),
        row("triggers", ep.trigger_count() as f64, "count"),
        row("repartitions", ep.repartition_count() as f64, "count"),
        row("mle_fraction", mle as f64 / choices as f64, "fraction"),
        row("mean_variance_proxy", proxy, "variance"),
    ])
}

/// Run the uniform arm plus every configured policy for one (workload, seed).
pub fn run_paired(
    cfg: &RunConfig,
    name: WorkloadName,
    replicate: u64,
    detector: &crate::drifttrack::CusumConfig,
) -> Result<Vec<Episode>, Tier1Error> {
    let t1 = &cfg.tier1;
    let spec = tier1::synth_workload(t1.workload(name)?, t1, cfg.seed, replicate)?;
    let mut policies = vec![Policy::Uniform];
    policies.extend(t1.policies.iter().copied().filter(|p| *p != Policy::Uniform));
    policies
        .into_iter()
        .map(|p| tier1::run_episode(&spec, &EpisodeConfig::from_config(t1, cfg.seed, replicate, p), t1, detector))
        .collect()
}

pub fn run_tier1(cfg: &RunConfig) -> Result<Tier1Output, Error> {
    let t1 = &cfg.tier1;
    let detector = t1.calibrate_detector(cfg.seed)?;
    let tasks: Vec<(WorkloadName, u64)> = t1
        .workloads
        .iter()
        .flat_map(|w| (0..t1.seeds as u64).map(move |r| (w.name, r)))
        .collect();
    let results: Vec<Vec<Episode>> = tasks
        .par_iter()
        .map(|&(name, r)| run_paired(cfg, name, r, &detector))
        .collect::<Result<_, _>>()?;
    let mut out = Tier1Output::default();
    for eps in &results {
        let uniform = &eps[0];
        for ep in eps {
            out.timing.add(ep);
            if !t1.policies.contains(&ep.policy) {
                continue;
            }
            out.rows.extend(episode_rows(ep, uniform)?);
            if ep.replicate == 0 {
                out.steps.extend(step_rows(ep));
            }
        }
    }
    out.rows = report::normalize_rows(out.rows)?;
    Ok(out)
}

pub fn run_tier2(cfg: &RunConfig) -> Result<Vec<MetricRow>, Error> {
    let t2 = &cfg.tier2;
    let tasks: Vec<(usize, u64)> = (0..t2.scenarios.len())
        .flat_map(|s| (0..t2.episodes as u64).map(move |e| (s, e)))
        .collect();
    let episodes: Vec<Vec<MetricRow>> = tasks
        .par_iter()
        .map(|&(s, e)| {
            let sc = &t2.scenarios[s];
            let (traces, errors) = tier2::simulate_trace(sc, t2.overhead, &tier2::episode_stream(cfg.seed, e))?;
            Ok(tier2::run_metrics(sc, t2.overhead, &traces, &errors).rows(sc.name, e))
        })
        .collect::<Result<_, Tier2Error>>()?;
    let sweeps: Vec<Vec<MetricRow>> = t2
        .scenarios
        .par_iter()
        .map(|sc| {
            let pts = tier2::overhead_sweep(sc, &t2.sweep_levels, t2.episodes, cfg.seed)?;
            Ok(pts
                .iter()
                .map(|p| {
                    MetricRow::new(
                        "tier2",
                        sc.name.label(),
                        &format!("overhead={}", p.level),
                        0,
                        "relative_throughput",
                        p.relative_throughput,
                        "ratio",
                    )
                })
                .collect())
        })
        .collect::<Result<_, Tier2Error>>()?;
    Ok(report::normalize_rows(episodes.into_iter().chain(sweeps).flatten().collect())?)
}

/// Contraction of the reference workload under TopoGP (when Tier-1 ran)
/// and the SLOs of every configured scenario (when Tier-2 ran).
pub fn dashboard(cfg: &RunConfig, tier1: Option<&[MetricRow]>, tier2: Option<&[MetricRow]>) -> Result<Dashboard, Error> {
    let reference = vec![cfg.tier1.reference_workload.label().to_string()];
    let scenarios: Vec<String> = cfg.tier2.scenarios.iter().map(|s| s.name.label().to_string()).collect();
    let mut checks = report::standard_checks(
        if tier1.is_some() { &reference } else { &[] },
        Policy::TopoGp.label(),
        if tier2.is_some() { &scenarios } else { &[] },
        &cfg.report.targets,
        cfg.report.min_episodes,
    );
    if tier1.is_none() && tier2.is_none() {
        checks.clear();
    }
    let rows: Vec<MetricRow> = tier1.unwrap_or(&[]).iter().chain(tier2.unwrap_or(&[])).cloned().collect();
    let ci = CiOptions {
        resamples: cfg.report.resamples,
        level: cfg.report.level,
        seed: cfg.seed,
    };
    Ok(report::evaluate_checks(&rows, &checks, ci)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tiers {
    One,
    Two,
    Both,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub dashboard: Dashboard,
    pub timing: Option<PadTiming>,
}

/// Run the selected tiers and write everything under `cfg.out_dir()`.
pub fn run(cfg: &RunConfig, tiers: Tiers) -> Result<RunOutput, Error> {
    cfg.validate()?;
    let t1 = match tiers {
        Tiers::One | Tiers::Both => Some(run_tier1(cfg)?),
        Tiers::Two => None,
    };
    let t2 = match tiers {
        Tiers::Two | Tiers::Both => Some(run_tier2(cfg)?),
        Tiers::One => None,
    };
    let dash = dashboard(cfg, t1.as_ref().map(|o| &o.rows[..]), t2.as_deref())?;
    let dir = cfg.out_dir();
    let mut files = report::emit(
        &dir,
        t1.as_ref().map(|o| &o.rows[..]).unwrap_or(&[]),
        t2.as_deref().unwrap_or(&[]),
        &dash,
        cfg,
    )?;
    if let Some(o) = &t1 {
        let path = dir.join(TIER1_STEPS_CSV);
        std::fs::write(&path, step_rows_to_csv(&o.steps)?).map_err(|e| Error::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        files.push(path);
    }
    Ok(RunOutput {
        dir,
        files,
        dashboard: dash,
        timing: t1.map(|o| o.timing),
    })
}

/// Re-evaluate the dashboard of an existing run directory from its CSVs
/// and config echo, rewriting `dashboard.json`.
pub fn rereport(dir: &Path) -> Result<Dashboard, Error> {
    let read = |name: &str| {
        let path = dir.join(name);
        std::fs::read_to_string(&path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    };
    let cfg = crate::config::from_echo(&read(report::CONFIG_ECHO_JSON)?)?;
    let t1 = report::read_rows_csv(&dir.join(report::TIER1_CSV))?;
    let t2 = report::read_rows_csv(&dir.join(report::TIER2_CSV))?;
    let dash = dashboard(
        &cfg,
        (!t1.is_empty()).then_some(&t1[..]),
        (!t2.is_empty()).then_some(&t2[..]),
    )?;
    let path = dir.join(report::DASHBOARD_JSON);
    std::fs::write(&path, report::to_json_bytes(&dash)?).map_err(|e| Error::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    Ok(dash)
}

/// Run `f` on a pool of `jobs` threads (0 means one per core).
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T, Error> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Io {
            path: "thread pool".into(),
            msg: e.to_string(),
        })?;
    Ok(pool.install(f))
}
