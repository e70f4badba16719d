//! Tier-2 queue emulator: jobs of several fragments pass a per-job setup
//! delay (compile and transport, not queued) and then a single FIFO
//! fragment server. Scenarios differ in arrival process, service
//! dispersion, retries, errors and adversarial head-of-line injections.
//!
//! Per episode, with `L` the job latency (admission to last fragment):
//!
//! - TTFR: median over jobs of admission to first fragment result
//! - jitter: median of `|L_j - L_{j-1}|` over jobs in completion order
//! - outcome: timeout if `L > timeout_ms`, else error with the scenario's
//!   per-job error rate, else success
//!
//! Streams live under `Stream::new(master).child("tier2").index(episode)`
//! and do not depend on the scenario, so scenarios and overhead levels run
//! on common random numbers.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use crate::report::{self, CiOptions, DashboardEntry, MetricRow, Statistic};
use crate::rng::Stream;

#[derive(Debug, thiserror::Error)]
pub enum Tier2Error {
    #[error("tier2 config: {0}")]
    Config(String),
    #[error("need at least {need} episodes for SLO evaluation, got {got}")]
    InsufficientEpisodes { need: usize, got: usize },
    #[error(transparent)]
    Report(#[from] report::ReportError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ScenarioName {
    Baseline,
    Noisy,
    Bursty,
    Adversarial,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 4] = [
        ScenarioName::Baseline,
        ScenarioName::Noisy,
        ScenarioName::Bursty,
        ScenarioName::Adversarial,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            ScenarioName::Baseline => "Baseline",
            ScenarioName::Noisy => "Noisy",
            ScenarioName::Bursty => "Bursty",
            ScenarioName::Adversarial => "Adversarial",
        }
    }
}

impl std::fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for ScenarioName {
    type Err = Tier2Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|x| x.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Tier2Error::Config(format!("unknown scenario `{s}`")))
    }
}

/// On/off modulated arrivals: exponential on and off periods, Poisson
/// arrivals at `on_rate_hz` / `off_rate_hz` within them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Burst {
    pub on_rate_hz: f64,
    pub off_rate_hz: f64,
    pub mean_on_ms: f64,
    pub mean_off_ms: f64,
}

/// Oversized jobs pushed to the head of the queue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Injection {
    pub rate_hz: f64,
    /// Service time of one injected job in units of the mean fragment service.
    pub size_multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: ScenarioName,
    /// Poisson job arrival rate, used when `burst` is absent.
    pub arrival_rate_hz: f64,
    pub burst: Option<Burst>,
    pub fragments_per_job: usize,
    pub service_mean_ms: f64,
    /// Coefficient of variation of the lognormal fragment service time.
    pub service_cv: f64,
    pub setup_mean_ms: f64,
    pub setup_cv: f64,
    /// Chance that a fragment run must be repeated (geometric retries).
    pub retry_prob: f64,
    pub error_rate: f64,
    pub injection: Option<Injection>,
    pub timeout_ms: f64,
    pub duration_ms: f64,
}

impl ScenarioConfig {
    pub fn baseline() -> Self {
        Self {
            name: ScenarioName::Baseline,
            arrival_rate_hz: 20.0,
            burst: None,
            fragments_per_job: 6,
            service_mean_ms: 5.0,
            service_cv: 0.3,
            setup_mean_ms: 150.0,
            setup_cv: 0.1,
            retry_prob: 0.0,
            error_rate: 0.0,
            injection: None,
            timeout_ms: 1000.0,
            duration_ms: 30_000.0,
        }
    }

    pub fn defaults(name: ScenarioName) -> Self {
        let base = Self::baseline();
        match name {
            ScenarioName::Baseline => base,
            ScenarioName::Noisy => Self {
                name,
                service_cv: 1.0,
                setup_cv: 0.18,
                retry_prob: 0.05,
                error_rate: 0.002,
                ..base
            },
            ScenarioName::Bursty => Self {
                name,
                burst: Some(Burst {
                    on_rate_hz: 30.0,
                    off_rate_hz: 10.0,
                    mean_on_ms: 800.0,
                    mean_off_ms: 800.0,
                }),
                error_rate: 0.001,
                ..base
            },
            ScenarioName::Adversarial => Self {
                name,
                error_rate: 0.02,
                injection: Some(Injection {
                    rate_hz: 3.0,
                    size_multiplier: 8.0,
                }),
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<(), Tier2Error> {
        let pos = |x: f64| x > 0.0 && x.is_finite();
        let prob = |x: f64| (0.0..1.0).contains(&x);
        let mut ok = pos(self.arrival_rate_hz)
            && self.fragments_per_job >= 1
            && pos(self.service_mean_ms)
            && self.service_cv >= 0.0
            && self.setup_mean_ms >= 0.0
            && self.setup_cv >= 0.0
            && prob(self.retry_prob)
            && prob(self.error_rate)
            && pos(self.timeout_ms)
            && pos(self.duration_ms);
        if let Some(b) = &self.burst {
            ok &= pos(b.on_rate_hz) && b.off_rate_hz >= 0.0 && pos(b.mean_on_ms) && pos(b.mean_off_ms);
        }
        if let Some(i) = &self.injection {
            ok &= pos(i.rate_hz) && pos(i.size_multiplier);
        }
        if ok {
            Ok(())
        } else {
            Err(Tier2Error::Config(format!("invalid scenario {}", self.name)))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tier2Config {
    pub episodes: usize,
    /// PhasePad overhead: fractional inflation of every fragment service time.
    pub overhead: f64,
    pub sweep_levels: Vec<f64>,
    pub scenarios: Vec<ScenarioConfig>,
}

impl Default for Tier2Config {
    fn default() -> Self {
        Self {
            episodes: 50,
            overhead: 0.01,
            sweep_levels: vec![0.0, 0.005, 0.01, 0.02, 0.03, 0.04, 0.05],
            scenarios: ScenarioName::ALL.iter().map(|&n| ScenarioConfig::defaults(n)).collect(),
        }
    }
}

impl Tier2Config {
    pub fn validate(&self) -> Result<(), Tier2Error> {
        if self.episodes == 0 {
            return Err(Tier2Error::Config("episodes must be positive".into()));
        }
        if !(self.overhead >= 0.0 && self.overhead.is_finite()) {
            return Err(Tier2Error::Config(format!("overhead {} must be nonnegative", self.overhead)));
        }
        if let Some(l) = self.sweep_levels.iter().find(|l| !(0.0..=0.05).contains(*l)) {
            return Err(Tier2Error::Config(format!("sweep level {l} outside [0, 0.05]")));
        }
        let mut names: Vec<_> = self.scenarios.iter().map(|s| s.name).collect();
        names.sort();
        names.dedup();
        if names.len() != self.scenarios.len() {
            return Err(Tier2Error::Config("duplicate scenario".into()));
        }
        self.scenarios.iter().try_for_each(ScenarioConfig::validate)
    }

    pub fn scenario(&self, name: ScenarioName) -> Result<&ScenarioConfig, Tier2Error> {
        self.scenarios
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Tier2Error::Config(format!("scenario {name} not configured")))
    }
}

/// Service-level targets; all comparisons inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SloTargets {
    pub jitter_max_ms: f64,
    pub ttfr_max_ms: f64,
    pub success_min: f64,
    pub timeout_max: f64,
    pub error_max: f64,
    pub overhead_max: f64,
}

impl Default for SloTargets {
    fn default() -> Self {
        Self {
            jitter_max_ms: 150.0,
            ttfr_max_ms: 220.0,
            success_min: 0.97,
            timeout_max: 0.005,
            error_max: 0.025,
            overhead_max: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub jitter_ms: f64,
    pub ttfr_ms: f64,
    pub success_frac: f64,
    pub timeout_frac: f64,
    pub error_frac: f64,
    pub qps_raw: f64,
    pub qps_success: f64,
    pub phasepad_overhead: f64,
    pub jobs: usize,
}

impl RunMetrics {
    pub const NAMES: [(&'static str, &'static str); 8] = [
        ("jitter_ms", "ms"),
        ("ttfr_ms", "ms"),
        ("success_frac", "fraction"),
        ("timeout_frac", "fraction"),
        ("error_frac", "fraction"),
        ("qps_raw", "1/s"),
        ("qps_success", "1/s"),
        ("phasepad_overhead", "fraction"),
    ];

    pub fn values(&self) -> [f64; 8] {
        [
            self.jitter_ms,
            self.ttfr_ms,
            self.success_frac,
            self.timeout_frac,
            self.error_frac,
            self.qps_raw,
            self.qps_success,
            self.phasepad_overhead,
        ]
    }

    pub fn rows(&self, scenario: ScenarioName, episode: u64) -> Vec<MetricRow> {
        Self::NAMES
            .iter()
            .zip(self.values())
            .map(|((m, u), v)| MetricRow::new("tier2", scenario.label(), "phasepad", episode, m, v, u))
            .collect()
    }
}

/// One simulated job.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JobTrace {
    pub admitted_ms: f64,
    pub first_result_ms: f64,
    pub completed_ms: f64,
}

impl JobTrace {
    pub fn ttfr(&self) -> f64 {
        self.first_result_ms - self.admitted_ms
    }

    pub fn latency(&self) -> f64 {
        self.completed_ms - self.admitted_ms
    }
}

fn lognormal(mean: f64, cv: f64) -> Result<LogNormal<f64>, Tier2Error> {
    let s2 = (1.0 + cv * cv).ln();
    LogNormal::new(mean.ln() - s2 / 2.0, s2.sqrt()).map_err(|e| Tier2Error::Config(format!("lognormal: {e}")))
}

fn exp_ms(rate_hz: f64) -> Result<Exp<f64>, Tier2Error> {
    Exp::new(rate_hz / 1000.0).map_err(|e| Tier2Error::Config(format!("exponential: {e}")))
}

/// Arrival times in ms within `[0, duration)`.
fn arrivals<R: Rng + ?Sized>(sc: &ScenarioConfig, rng: &mut R) -> Result<Vec<f64>, Tier2Error> {
    let mut out = Vec::new();
    match &sc.burst {
        None => {
            let gap = exp_ms(sc.arrival_rate_hz)?;
            let mut t = gap.sample(rng);
            while t < sc.duration_ms {
                out.push(t);
                t += gap.sample(rng);
            }
        }
        Some(b) => {
            let on_len = Exp::new(1.0 / b.mean_on_ms).map_err(|e| Tier2Error::Config(e.to_string()))?;
            let off_len = Exp::new(1.0 / b.mean_off_ms).map_err(|e| Tier2Error::Config(e.to_string()))?;
            let (mut start, mut on) = (0.0, true);
            while start < sc.duration_ms {
                let (len, rate) = if on {
                    (on_len.sample(rng), b.on_rate_hz)
                } else {
                    (off_len.sample(rng), b.off_rate_hz)
                };
                let end = (start + len).min(sc.duration_ms);
                if rate > 0.0 {
                    let gap = exp_ms(rate)?;
                    let mut t = start + gap.sample(rng);
                    while t < end {
                        out.push(t);
                        t += gap.sample(rng);
                    }
                }
                start += len;
                on = !on;
            }
        }
    }
    Ok(out)
}

/// Simulate one episode and return every admitted job's trace plus the
/// per-job error draws.
pub fn simulate_trace(
    sc: &ScenarioConfig,
    overhead: f64,
    stream: &Stream,
) -> Result<(Vec<JobTrace>, Vec<bool>), Tier2Error> {
    sc.validate()?;
    let inflate = 1.0 + overhead;
    let jobs = arrivals(sc, &mut stream.child("arrivals").rng())?;
    let mut setup_rng = stream.child("setup").rng();
    let mut service_rng = stream.child("service").rng();
    let mut error_rng = stream.child("errors").rng();
    let setup = lognormal(sc.setup_mean_ms.max(1e-9), sc.setup_cv)?;
    let service = lognormal(sc.service_mean_ms, sc.service_cv)?;

    // fragment enqueue events (time, job), FIFO by enqueue time then job id
    let f = sc.fragments_per_job;
    let mut enqueued: Vec<(f64, usize)> = Vec::with_capacity(jobs.len() * f);
    for (j, &t) in jobs.iter().enumerate() {
        let d = if sc.setup_mean_ms > 0.0 { setup.sample(&mut setup_rng) } else { 0.0 };
        enqueued.extend(std::iter::repeat_n((t + d, j), f));
    }
    enqueued.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let errors: Vec<bool> = jobs.iter().map(|_| error_rng.random_bool(sc.error_rate)).collect();

    let mut injections: VecDeque<f64> = VecDeque::new();
    let mut inj_service = 0.0;
    if let Some(inj) = &sc.injection {
        let mut rng = stream.child("adversary").rng();
        let gap = exp_ms(inj.rate_hz)?;
        let mut t = gap.sample(&mut rng);
        while t < sc.duration_ms {
            injections.push_back(t);
            t += gap.sample(&mut rng);
        }
        inj_service = inj.size_multiplier * sc.service_mean_ms * inflate;
    }

    let mut first = vec![f64::INFINITY; jobs.len()];
    let mut last = vec![0.0f64; jobs.len()];
    let mut free_at = 0.0f64;
    let mut next = 0;
    while next < enqueued.len() {
        let (ready, job) = enqueued[next];
        // injected jobs that arrived by the time the server can pick work jump the queue
        let pick_at = free_at.max(ready);
        if let Some(&ti) = injections.front() {
            if ti <= pick_at {
                injections.pop_front();
                free_at = free_at.max(ti) + inj_service;
                continue;
            }
        }
        let mut s = service.sample(&mut service_rng);
        while sc.retry_prob > 0.0 && service_rng.random_bool(sc.retry_prob) {
            s += service.sample(&mut service_rng);
        }
        let done = pick_at + s * inflate;
        free_at = done;
        first[job] = first[job].min(done);
        last[job] = last[job].max(done);
        next += 1;
    }
    let traces = jobs
        .iter()
        .enumerate()
        .map(|(j, &t)| JobTrace {
            admitted_ms: t,
            first_result_ms: first[j],
            completed_ms: last[j],
        })
        .collect();
    Ok((traces, errors))
}

/// Metrics of one trace; a trace without jobs gives zero latencies and a
/// vacuous all-success outcome.
pub fn run_metrics(sc: &ScenarioConfig, overhead: f64, traces: &[JobTrace], errors: &[bool]) -> RunMetrics {
    let n = traces.len();
    let duration_s = sc.duration_ms / 1000.0;
    if n == 0 {
        return RunMetrics {
            jitter_ms: 0.0,
            ttfr_ms: 0.0,
            success_frac: 1.0,
            timeout_frac: 0.0,
            error_frac: 0.0,
            qps_raw: 0.0,
            qps_success: 0.0,
            phasepad_overhead: overhead,
            jobs: 0,
        };
    }
    let ttfr: Vec<f64> = traces.iter().map(JobTrace::ttfr).collect();
    let mut by_completion: Vec<&JobTrace> = traces.iter().collect();
    by_completion.sort_by(|a, b| a.completed_ms.total_cmp(&b.completed_ms));
    let diffs: Vec<f64> = by_completion.windows(2).map(|w| (w[1].latency() - w[0].latency()).abs()).collect();
    let jitter = if diffs.is_empty() { 0.0 } else { report::median(&diffs) };
    let (mut ok, mut timeouts, mut errs) = (0usize, 0usize, 0usize);
    for (t, &e) in traces.iter().zip(errors) {
        if t.latency() > sc.timeout_ms {
            timeouts += 1;
        } else if e {
            errs += 1;
        } else {
            ok += 1;
        }
    }
    let frac = |k: usize| k as f64 / n as f64;
    RunMetrics {
        jitter_ms: jitter,
        ttfr_ms: report::median(&ttfr),
        success_frac: frac(ok),
        timeout_frac: frac(timeouts),
        error_frac: frac(errs),
        qps_raw: n as f64 / duration_s,
        qps_success: ok as f64 / duration_s,
        phasepad_overhead: overhead,
        jobs: n,
    }
}

pub fn episode_stream(master_seed: u64, episode: u64) -> Stream {
    Stream::new(master_seed).child("tier2").index(episode)
}

/// `episodes` independent runs of one scenario.
pub fn simulate_queue(
    sc: &ScenarioConfig,
    overhead: f64,
    episodes: usize,
    master_seed: u64,
) -> Result<Vec<RunMetrics>, Tier2Error> {
    (0..episodes as u64)
        .map(|e| {
            let (traces, errors) = simulate_trace(sc, overhead, &episode_stream(master_seed, e))?;
            Ok(run_metrics(sc, overhead, &traces, &errors))
        })
        .collect()
}

/// Fragments completed per second with the server kept busy: the
/// scenario's jobs are all queued at time zero (setup skipped) and the
/// server runs for the episode duration.
pub fn saturated_throughput(sc: &ScenarioConfig, overhead: f64, stream: &Stream) -> Result<f64, Tier2Error> {
    let backlog = ScenarioConfig {
        setup_mean_ms: 0.0,
        burst: None,
        arrival_rate_hz: 1e9,
        duration_ms: sc.duration_ms,
        ..sc.clone()
    };
    backlog.validate()?;
    let inflate = 1.0 + overhead;
    let service = lognormal(sc.service_mean_ms, sc.service_cv)?;
    let mut rng = stream.child("service").rng();
    let mut inj = stream.child("adversary").rng();
    let inj_gap = match &sc.injection {
        Some(i) => Some((exp_ms(i.rate_hz)?, i.size_multiplier * sc.service_mean_ms)),
        None => None,
    };
    let mut next_inj = inj_gap.as_ref().map(|(g, _)| g.sample(&mut inj)).unwrap_or(f64::INFINITY);
    let (mut t, mut done) = (0.0f64, 0usize);
    loop {
        let s = if t >= next_inj {
            let (g, size) = inj_gap.as_ref().expect("injection configured");
            next_inj += g.sample(&mut inj);
            t += size * inflate;
            continue;
        } else {
            let mut s = service.sample(&mut rng);
            while sc.retry_prob > 0.0 && rng.random_bool(sc.retry_prob) {
                s += service.sample(&mut rng);
            }
            s * inflate
        };
        if t + s > sc.duration_ms {
            break;
        }
        t += s;
        done += 1;
    }
    Ok(done as f64 / (sc.duration_ms / 1000.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub level: f64,
    pub relative_throughput: f64,
}

/// Saturated throughput at each overhead level, normalized per episode by
/// the zero-overhead arm on the same streams, then averaged over episodes.
pub fn overhead_sweep(
    sc: &ScenarioConfig,
    levels: &[f64],
    episodes: usize,
    master_seed: u64,
) -> Result<Vec<SweepPoint>, Tier2Error> {
    if let Some(l) = levels.iter().find(|l| !(0.0..=0.05).contains(*l)) {
        return Err(Tier2Error::Config(format!("overhead level {l} outside [0, 0.05]")));
    }
    if episodes == 0 {
        return Err(Tier2Error::Config("sweep needs at least one episode".into()));
    }
    let mut sums = vec![0.0; levels.len()];
    for e in 0..episodes as u64 {
        let stream = episode_stream(master_seed, e).child("sweep");
        let base = saturated_throughput(sc, 0.0, &stream)?;
        for (sum, &level) in sums.iter_mut().zip(levels) {
            *sum += saturated_throughput(sc, level, &stream)? / base;
        }
    }
    Ok(levels
        .iter()
        .zip(sums)
        .map(|(&level, s)| SweepPoint {
            level,
            relative_throughput: s / episodes as f64,
        })
        .collect())
}

pub const MIN_SLO_EPISODES: usize = 30;

/// Median of each metric over episodes with a bootstrap CI, checked
/// against the targets.
pub fn evaluate_slos(
    scenario: ScenarioName,
    metrics: &[RunMetrics],
    targets: &SloTargets,
    ci: CiOptions,
) -> Result<Vec<DashboardEntry>, Tier2Error> {
    if metrics.len() < MIN_SLO_EPISODES {
        return Err(Tier2Error::InsufficientEpisodes {
            need: MIN_SLO_EPISODES,
            got: metrics.len(),
        });
    }
    let rows: Vec<MetricRow> = metrics
        .iter()
        .enumerate()
        .flat_map(|(e, m)| m.rows(scenario, e as u64))
        .collect();
    let checks = report::slo_checks(&[scenario.label().to_string()], targets, MIN_SLO_EPISODES);
    debug_assert!(checks.iter().all(|c| c.statistic == Statistic::Median));
    Ok(report::evaluate_checks(&rows, &checks, ci)?.entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outcome_fractions_partition() {
        for name in ScenarioName::ALL {
            let sc = ScenarioConfig::defaults(name);
            for m in simulate_queue(&sc, 0.01, 3, 5).unwrap() {
                assert!((m.success_frac + m.timeout_frac + m.error_frac - 1.0).abs() < 1e-9);
                assert!(m.values().iter().all(|v| *v >= 0.0));
            }
        }
    }

    #[test]
    fn idle_system_ttfr_is_setup_plus_one_service() {
        let sc = ScenarioConfig {
            arrival_rate_hz: 1e-3,
            setup_cv: 0.0,
            service_cv: 0.0,
            fragments_per_job: 1,
            duration_ms: 5_000_000.0,
            ..ScenarioConfig::baseline()
        };
        let m = &simulate_queue(&sc, 0.0, 1, 2).unwrap()[0];
        assert!(m.jobs >= 2);
        assert!((m.ttfr_ms - (sc.setup_mean_ms + sc.service_mean_ms)).abs() < 1e-6);
        assert!(m.jitter_ms < 1e-6);
    }

    #[test]
    fn sweep_zero_level_is_one() {
        let pts = overhead_sweep(&ScenarioConfig::baseline(), &[0.0, 0.01], 2, 1).unwrap();
        assert_eq!(pts[0].relative_throughput, 1.0);
        assert!(pts[1].relative_throughput < 1.0);
        assert!(overhead_sweep(&ScenarioConfig::baseline(), &[0.06], 1, 1).is_err());
    }

    #[test]
    fn too_few_episodes_rejected() {
        let m = simulate_queue(&ScenarioConfig::baseline(), 0.0, 3, 1).unwrap();
        let e = evaluate_slos(ScenarioName::Baseline, &m, &SloTargets::default(), CiOptions::default());
        assert!(matches!(e, Err(Tier2Error::InsufficientEpisodes { .. })));
    }
}
