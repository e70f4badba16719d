//! Tier-1 closed loop: synthetic fragment variances with drift, sampled
//! variance observations, Kalman/CUSUM tracking, repartition on alarms,
//! shot allocation per policy, estimator choice and per-step metrics.
//!
//! Random streams, under `Stream::new(master).child("tier1").child(workload).index(replicate)`:
//!
//! - `spec`: hot/drifting fragment draws and entropy levels
//! - `truth/t`: process-noise increments at step `t`
//! - `obs/t/i`, `pilot/t/i`: observation and pilot draws of fragment `i`
//! - `err/t`: standard-normal error multipliers, one per fragment
//! - `phasepad/<policy>`: keys, tokens and decoys
//!
//! Everything but the last is shared across policies, so paired arms see
//! identical truth paths and the same draws for the same shot counts.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::distr::weighted::WeightedIndex;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::allocator::{
    allocate, floored_share, variance_bound, AllocError, Cadence, CovarianceModel, KernelParams, TailParams,
    Topology,
};
use crate::cascade::{choose_estimator, pilot_entropy, pilot_shots, predict_mse, BiasModel, CascadeError, CascadeFit, EstimatorChoice};
use crate::cutgraph::{
    fm_refine, BlockCaps, CostModel, Gate, Hypergraph, MaxLoadQueue, NormalizationRefs, Partition, PartitionError,
    PolicyWeights,
};
use crate::drifttrack::{
    calibrate_cusum_threshold_with, estimate_process_noise, kalman_step, CusumConfig, CusumState, DriftError,
    KalmanConfig, KalmanState, NullModel,
};
use crate::phasepad::{honest_backend, Decision, FragmentJob, PhasePad, PhasePadError, SecurityParams};
use crate::report::quantile;
use crate::rng::Stream;

#[derive(Debug, thiserror::Error)]
pub enum Tier1Error {
    #[error("tier1 config: {0}")]
    Config(String),
    #[error("unknown workload `{0}`")]
    UnknownWorkload(String),
    #[error("unknown policy `{0}`")]
    UnknownPolicy(String),
    #[error("episodes are not paired: {0}")]
    Pairing(String),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Drift(#[from] DriftError),
    #[error(transparent)]
    Cascade(#[from] CascadeError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    PhasePad(#[from] PhasePadError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum WorkloadName {
    #[serde(rename = "QAOA-MaxCut")]
    QaoaMaxCut,
    #[serde(rename = "UCCSD-LiH")]
    UccsdLih,
    #[serde(rename = "TFIM")]
    Tfim,
    #[serde(rename = "RandomCliffordT")]
    RandomCliffordT,
    #[serde(rename = "PhaseEstimation")]
    PhaseEstimation,
}

impl WorkloadName {
    pub const ALL: [WorkloadName; 5] = [
        WorkloadName::QaoaMaxCut,
        WorkloadName::UccsdLih,
        WorkloadName::Tfim,
        WorkloadName::RandomCliffordT,
        WorkloadName::PhaseEstimation,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            WorkloadName::QaoaMaxCut => "QAOA-MaxCut",
            WorkloadName::UccsdLih => "UCCSD-LiH",
            WorkloadName::Tfim => "TFIM",
            WorkloadName::RandomCliffordT => "RandomCliffordT",
            WorkloadName::PhaseEstimation => "PhaseEstimation",
        }
    }
}

impl fmt::Display for WorkloadName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for WorkloadName {
    type Err = Tier1Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|w| w.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Tier1Error::UnknownWorkload(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Policy {
    #[serde(rename = "uniform")]
    Uniform,
    #[serde(rename = "proportional")]
    Proportional,
    #[serde(rename = "topogp")]
    TopoGp,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::Uniform, Policy::Proportional, Policy::TopoGp];

    pub fn label(&self) -> &'static str {
        match self {
            Policy::Uniform => "uniform",
            Policy::Proportional => "proportional",
            Policy::TopoGp => "topogp",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Policy {
    type Err = Tier1Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|p| p.label() == key)
            .ok_or_else(|| Tier1Error::UnknownPolicy(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyClass {
    Low,
    High,
}

/// Fragment count and entropy class of one workload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadEntry {
    pub name: WorkloadName,
    pub fragments: usize,
    pub entropy: EntropyClass,
}

pub fn default_workload_table() -> Vec<WorkloadEntry> {
    use EntropyClass::*;
    use WorkloadName::*;
    [(QaoaMaxCut, 16, Low), (UccsdLih, 12, High), (Tfim, 10, Low), (RandomCliffordT, 24, High), (PhaseEstimation, 8, Low)]
        .into_iter()
        .map(|(name, fragments, entropy)| WorkloadEntry { name, fragments, entropy })
        .collect()
}

/// Synthetic ground-truth profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruthConfig {
    /// Variance of a cold fragment.
    pub base_variance: f64,
    /// Ratio of hot to cold standard deviation.
    pub sigma_spread: f64,
    pub hot_fraction: f64,
    /// Random-walk standard deviation as a fraction of the initial variance.
    pub process_noise_rel: f64,
    /// Relative variance step of drifting fragments (2.0 = +200%).
    pub drift_relative: f64,
    /// Fraction of cold fragments that drift (at least one).
    pub drift_fraction: f64,
    /// Drift step; `None` means halfway through the episode.
    pub drift_at: Option<usize>,
    pub low_entropy_bits: f64,
    pub high_entropy_bits: f64,
    /// Per-fragment uniform jitter around the class entropy.
    pub entropy_jitter: f64,
}

impl Default for TruthConfig {
    fn default() -> Self {
        Self {
            base_variance: 1.0,
            sigma_spread: 4.0,
            hot_fraction: 0.25,
            process_noise_rel: 0.01,
            drift_relative: 2.0,
            drift_fraction: 0.125,
            drift_at: None,
            low_entropy_bits: 1.0,
            high_entropy_bits: 3.5,
            entropy_jitter: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftEvent {
    pub step: usize,
    pub fragments: Vec<usize>,
    /// `σ² ← σ² (1 + relative_change)`.
    pub relative_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub name: WorkloadName,
    pub n: usize,
    /// Physical anchor node of each fragment; the true correlation kernel
    /// is evaluated on these.
    pub anchors: Vec<usize>,
    pub initial_variance: Vec<f64>,
    /// Random-walk variance `q_i` of the truth.
    pub process_noise: Vec<f64>,
    pub drift: Vec<DriftEvent>,
    pub entropy_bits: Vec<f64>,
    /// Outcome distribution over 16 outcomes with the target entropy.
    pub outcome_probs: Vec<Vec<f64>>,
}

impl WorkloadSpec {
    pub fn validate(&self, steps: usize) -> Result<(), Tier1Error> {
        let n = self.n;
        if n == 0 {
            return Err(Tier1Error::Config("workload needs at least one fragment".into()));
        }
        let lens = [self.anchors.len(), self.initial_variance.len(), self.process_noise.len(), self.entropy_bits.len(), self.outcome_probs.len()];
        if lens.iter().any(|&l| l != n) {
            return Err(Tier1Error::Config(format!("per-fragment vectors must have length {n}")));
        }
        if self.initial_variance.iter().chain(&self.process_noise).any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Tier1Error::Config("variances must be finite and nonnegative".into()));
        }
        for d in &self.drift {
            if d.step >= steps || d.fragments.iter().any(|&i| i >= n) || !(d.relative_change > -1.0) {
                return Err(Tier1Error::Config(format!("drift event {d:?} outside the episode")));
            }
        }
        Ok(())
    }
}

pub const OUTCOMES: usize = 16;

/// `p_k ∝ exp(-τ k)` over 16 outcomes with entropy `bits` (clamped to [0, 4]).
pub fn outcome_profile(bits: f64) -> Vec<f64> {
    let target = bits.clamp(0.0, (OUTCOMES as f64).log2());
    let probs = |tau: f64| {
        let w: Vec<f64> = (0..OUTCOMES).map(|k| (-tau * k as f64).exp()).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|x| x / z).collect::<Vec<f64>>()
    };
    let entropy = |p: &[f64]| -> f64 { p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.log2()).sum() };
    let (mut lo, mut hi) = (0.0, 60.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if entropy(&probs(mid)) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    probs(0.5 * (lo + hi))
}

/// Deterministic workload profile: `⌈hot_fraction · n⌉` hot fragments with
/// standard deviation `sigma_spread` times the cold one, a drift step on a
/// few cold fragments, and per-fragment outcome entropies.
pub fn synth_workload(
    entry: &WorkloadEntry,
    cfg: &Tier1Config,
    master_seed: u64,
    replicate: u64,
) -> Result<WorkloadSpec, Tier1Error> {
    let (truth, steps) = (&cfg.truth, cfg.steps);
    let n = entry.fragments;
    if n == 0 || steps == 0 {
        return Err(Tier1Error::Config("need at least one fragment and one step".into()));
    }
    if !(truth.sigma_spread >= 1.0 && truth.base_variance >= 0.0 && (0.0..=1.0).contains(&truth.hot_fraction)) {
        return Err(Tier1Error::Config(format!("invalid truth profile {truth:?}")));
    }
    let mut rng = episode_root(master_seed, entry.name, replicate).child("spec").rng();
    let n_hot = if truth.sigma_spread > 1.0 { (truth.hot_fraction * n as f64).ceil() as usize } else { 0 };
    let mut order: Vec<usize> = sample(&mut rng, n, n).into_vec();
    let hot: Vec<usize> = order.drain(..n_hot.min(n)).collect();
    let hot_var = truth.base_variance * truth.sigma_spread * truth.sigma_spread;
    let initial_variance: Vec<f64> =
        (0..n).map(|i| if hot.contains(&i) { hot_var } else { truth.base_variance }).collect();
    let process_noise = initial_variance.iter().map(|v| (truth.process_noise_rel * v).powi(2)).collect();

    let mut drift = Vec::new();
    if truth.drift_relative != 0.0 && truth.drift_fraction > 0.0 {
        let pool = if order.is_empty() { (0..n).collect() } else { order };
        let k = ((truth.drift_fraction * n as f64).floor() as usize).clamp(1, pool.len());
        let mut fragments: Vec<usize> = pool[..k].to_vec();
        fragments.sort_unstable();
        drift.push(DriftEvent {
            step: truth.drift_at.unwrap_or(steps / 2),
            fragments,
            relative_change: truth.drift_relative,
        });
    }
    let base = match entry.entropy {
        EntropyClass::Low => truth.low_entropy_bits,
        EntropyClass::High => truth.high_entropy_bits,
    };
    let entropy_bits: Vec<f64> = (0..n)
        .map(|_| (base + truth.entropy_jitter * (2.0 * rng.random::<f64>() - 1.0)).clamp(0.0, 4.0))
        .collect();
    let outcome_probs = entropy_bits.iter().map(|&h| outcome_profile(h)).collect();
    let layout = snake_layout(&cfg.topology, 2 * n)?;
    let spec = WorkloadSpec {
        name: entry.name,
        n,
        anchors: (0..n).map(|b| layout[2 * b]).collect(),
        initial_variance,
        process_noise,
        drift,
        entropy_bits,
        outcome_probs,
    };
    spec.validate(steps)?;
    Ok(spec)
}

fn episode_root(master_seed: u64, name: WorkloadName, replicate: u64) -> Stream {
    Stream::new(master_seed).child("tier1").child(name.label()).index(replicate)
}

/// Truth at step `t` from truth at `t - 1`: random walk, then any drift
/// scheduled at `t`.
pub fn evolve_truth<R: Rng + ?Sized>(spec: &WorkloadSpec, sigma2: &[f64], t: usize, rng: &mut R) -> Vec<f64> {
    let mut next: Vec<f64> = sigma2
        .iter()
        .zip(&spec.process_noise)
        .map(|(&s, &q)| {
            let w: f64 = StandardNormal.sample(rng);
            (s + q.sqrt() * w).max(0.0)
        })
        .collect();
    for d in spec.drift.iter().filter(|d| d.step == t) {
        for &i in &d.fragments {
            next[i] *= 1.0 + d.relative_change;
        }
    }
    next
}

/// Sample variance of `shots` draws from `Normal(0, σ²)`. A single shot
/// yields the squared draw; zero shots yield NaN.
pub fn sample_variance_draw<R: Rng + ?Sized>(sigma2: f64, shots: u64, rng: &mut R) -> f64 {
    if shots == 0 {
        return f64::NAN;
    }
    let (mut sum, mut sum_sq) = (0.0f64, 0.0f64);
    for _ in 0..shots {
        let x: f64 = StandardNormal.sample(rng);
        sum += x;
        sum_sq += x * x;
    }
    let v = if shots == 1 {
        sum_sq
    } else {
        let n = shots as f64;
        ((sum_sq - sum * sum / n) / (n - 1.0)).max(0.0)
    };
    sigma2 * v
}

/// One observation per fragment, fragment `i` drawing from `stream.index(i)`.
pub fn observe(sigma2: &[f64], shots: &[u64], stream: &Stream) -> Vec<f64> {
    sigma2
        .iter()
        .zip(shots)
        .enumerate()
        .map(|(i, (&s2, &s))| sample_variance_draw(s2, s, &mut stream.index(i as u64).rng()))
        .collect()
}

/// Shared knobs of the closed loop, defaults tuned for the reference profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tier1Config {
    pub steps: usize,
    pub shots_per_step: u64,
    /// Reallocation cadence B in shots.
    pub cadence: u64,
    pub s_min: u64,
    pub warmup: usize,
    pub seeds: usize,
    pub workloads: Vec<WorkloadEntry>,
    pub policies: Vec<Policy>,
    pub reference_workload: WorkloadName,
    pub topology: String,
    pub kernel: KernelParams,
    pub tail: TailTuning,
    pub truth: TruthConfig,
    pub kalman: KalmanTuning,
    pub cusum: CusumTuning,
    pub cascade: CascadeConfig,
    pub partition: PartitionConfig,
    pub phasepad: PhasePadConfig,
}

impl Default for Tier1Config {
    fn default() -> Self {
        Self {
            steps: 80,
            shots_per_step: 32_000,
            cadence: 500,
            s_min: 20,
            warmup: 10,
            seeds: 100,
            workloads: default_workload_table(),
            policies: Policy::ALL.to_vec(),
            reference_workload: WorkloadName::QaoaMaxCut,
            topology: "heavyhex:3x3".into(),
            kernel: KernelParams { sigma_k2: 1.0, ell: 0.5 },
            tail: TailTuning { rho: 0.05 },
            truth: TruthConfig::default(),
            kalman: KalmanTuning::default(),
            cusum: CusumTuning::default(),
            cascade: CascadeConfig::default(),
            partition: PartitionConfig::default(),
            phasepad: PhasePadConfig::default(),
        }
    }
}

/// Tail factor confidence. `N` is the number of fragments in the batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TailTuning {
    pub rho: f64,
}

impl Default for TailTuning {
    fn default() -> Self {
        Self { rho: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KalmanTuning {
    /// Process noise during warmup, relative to the first observation.
    pub warmup_q_rel: f64,
    /// Floor of the estimated process noise, relative to the filter mean.
    pub q_floor_rel: f64,
}

impl Default for KalmanTuning {
    fn default() -> Self {
        Self {
            warmup_q_rel: 0.05,
            q_floor_rel: 0.005,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CusumTuning {
    pub kappa: f64,
    pub target_arl0: f64,
    pub calibration_runs: usize,
    /// Steps after a drift within which an alarm counts as a detection.
    pub detection_budget: usize,
}

impl Default for CusumTuning {
    fn default() -> Self {
        Self {
            kappa: 1.0,
            target_arl0: 200.0,
            calibration_runs: 2000,
            detection_budget: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CascadeConfig {
    pub enabled: bool,
    pub alpha_shadows: f64,
    pub beta_mle: f64,
    pub bias: BiasModel,
    pub pilot_fraction: f64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            alpha_shadows: 3.0,
            beta_mle: 200.0,
            bias: BiasModel::default(),
            pilot_fraction: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub max_qubits: usize,
    pub passes: usize,
    /// Gates per fragment in the synthetic circuit.
    pub layers: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            beta: 0.3,
            gamma: 0.3,
            max_qubits: 4,
            passes: 2,
            layers: 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhasePadConfig {
    pub enabled: bool,
    pub security: SecurityParams,
}

impl Default for PhasePadConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            security: SecurityParams::default(),
        }
    }
}

impl Tier1Config {
    pub fn validate(&self) -> Result<(), Tier1Error> {
        let err = |m: String| Err(Tier1Error::Config(m));
        if self.steps == 0 || self.warmup == 0 || self.warmup >= self.steps {
            return err(format!("need 0 < warmup < steps (warmup={}, steps={})", self.warmup, self.steps));
        }
        if self.cadence == 0 || self.cadence > self.shots_per_step {
            return err(format!("cadence {} must be in 1..=shots_per_step", self.cadence));
        }
        if self.s_min < 2 {
            return err("s_min must be at least 2".into());
        }
        for w in &self.workloads {
            if w.fragments == 0 || self.shots_per_step < w.fragments as u64 * self.s_min {
                return err(format!("{}: budget {} below n x s_min", w.name, self.shots_per_step));
            }
        }
        if self.policies.is_empty() || self.workloads.is_empty() {
            return err("need at least one workload and one policy".into());
        }
        if !(self.cascade.pilot_fraction > 0.0 && self.cascade.pilot_fraction < 0.5) {
            return err(format!("pilot fraction {} outside (0, 0.5)", self.cascade.pilot_fraction));
        }
        KernelParams::new(self.kernel.sigma_k2, self.kernel.ell)?;
        let min_n = self.workloads.iter().map(|w| w.fragments).min().unwrap_or(1);
        TailParams::new(self.tail.rho, min_n as f64)?;
        CascadeFit::new(self.cascade.alpha_shadows, self.cascade.beta_mle, self.cascade.bias)?;
        PolicyWeights::new(self.partition.alpha, self.partition.beta, self.partition.gamma)?;
        SecurityParams::new(self.phasepad.security.lambda, self.phasepad.security.eta, self.phasepad.security.eps_ver)?;
        Topology::parse_generator(&self.topology)?;
        if let Some(t) = self.truth.drift_at {
            if t >= self.steps {
                return err(format!("drift step {t} beyond {} steps", self.steps));
            }
        }
        Ok(())
    }

    pub fn workload(&self, name: WorkloadName) -> Result<&WorkloadEntry, Tier1Error> {
        self.workloads
            .iter()
            .find(|w| w.name == name)
            .ok_or_else(|| Tier1Error::UnknownWorkload(name.to_string()))
    }

    /// CUSUM threshold calibrated to the target ARL under `|N(0,1)|` deltas.
    pub fn calibrate_detector(&self, seed: u64) -> Result<CusumConfig, Tier1Error> {
        let null = NullModel::HalfNormal { sd: 1.0 };
        let cal = calibrate_cusum_threshold_with(
            self.cusum.kappa,
            self.cusum.target_arl0,
            &null,
            Stream::new(seed).child("cusum-calibration").seed_u64(),
            self.cusum.calibration_runs,
        )?;
        Ok(CusumConfig::new(self.cusum.kappa, cal.h)?)
    }
}

/// Per-episode settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub steps: usize,
    pub shots_per_step: u64,
    pub cadence: u64,
    pub s_min: u64,
    pub master_seed: u64,
    pub replicate: u64,
    pub policy: Policy,
}

impl EpisodeConfig {
    pub fn from_config(cfg: &Tier1Config, master_seed: u64, replicate: u64, policy: Policy) -> Self {
        Self {
            steps: cfg.steps,
            shots_per_step: cfg.shots_per_step,
            cadence: cfg.cadence,
            s_min: cfg.s_min,
            master_seed,
            replicate,
            policy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub warmup: bool,
    pub plan: Vec<u64>,
    pub true_variance: Vec<f64>,
    pub kalman_means: Vec<f64>,
    /// Normalized innovations fed to CUSUM.
    pub innovations: Vec<f64>,
    pub triggers: Vec<usize>,
    pub repartitioned: bool,
    pub realloc_events: u64,
    pub entropy_estimates: Vec<f64>,
    pub choices: Vec<EstimatorChoice>,
    /// Stitched-variance bound of the plan under the true variances and
    /// the true correlation kernel.
    pub variance_proxy: f64,
    pub sq_errors: Vec<f64>,
    pub mean_sq_error: f64,
}

/// Wall-clock split of one episode. Never written to CSVs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EpisodeTiming {
    pub total: Duration,
    pub mask_seal: Duration,
    pub open_unmask: Duration,
}

impl EpisodeTiming {
    pub fn mask_seal_share(&self) -> f64 {
        self.mask_seal.as_secs_f64() / self.total.as_secs_f64().max(f64::MIN_POSITIVE)
    }
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub workload: WorkloadName,
    pub policy: Policy,
    pub replicate: u64,
    pub cascade_enabled: bool,
    pub records: Vec<StepRecord>,
    pub timing: EpisodeTiming,
    pub phasepad_aborts: usize,
}

impl Episode {
    /// Whether any of `fragments` alarmed within `[from, from + budget]`.
    pub fn detected(&self, fragments: &[usize], from: usize, budget: usize) -> bool {
        self.records
            .iter()
            .filter(|r| r.step >= from && r.step <= from + budget)
            .any(|r| r.triggers.iter().any(|i| fragments.contains(i)))
    }

    pub fn trigger_count(&self) -> usize {
        self.records.iter().map(|r| r.triggers.len()).sum()
    }

    pub fn repartition_count(&self) -> usize {
        self.records.iter().filter(|r| r.repartitioned).count()
    }
}

/// `n` blocks of two logical qubits each; `layers` layers alternating
/// intra-block pairs and pairs straddling neighbouring blocks (single-qubit
/// gates at the open end).
pub fn synthetic_circuit(n: usize, layers: usize) -> Result<(Hypergraph, Vec<usize>), PartitionError> {
    let mut gates = Vec::with_capacity(n * layers);
    let mut assignment = Vec::with_capacity(n * layers);
    for layer in 0..layers {
        for b in 0..n {
            let q = 2 * b as u32;
            let qubits = if layer % 2 == 0 {
                vec![q, q + 1]
            } else if b + 1 < n {
                vec![q + 1, q + 2]
            } else {
                vec![q + 1]
            };
            gates.push(Gate {
                id: gates.len() as u64,
                qubits,
                depth: layer as u32,
            });
            assignment.push(b);
        }
    }
    Ok((Hypergraph::from_gates(gates)?, assignment))
}

/// Chain nodes of a `heavyhex:RxC` lattice in snake order (chain nodes
/// take the lowest ids, row by row).
fn snake_layout(generator: &str, count: usize) -> Result<Vec<usize>, Tier1Error> {
    let bad = || Tier1Error::Config(format!("expected heavyhex:RxC, got `{generator}`"));
    let (r, c) = generator
        .strip_prefix("heavyhex:")
        .and_then(|d| d.split_once('x'))
        .ok_or_else(bad)?;
    let rows: usize = r.parse().map_err(|_| bad())?;
    let cols: usize = c.parse().map_err(|_| bad())?;
    let width = 4 * cols + 1;
    let layout: Vec<usize> = (0..=rows)
        .flat_map(|l| (0..width).map(move |p| l * width + if l % 2 == 0 { p } else { width - 1 - p }))
        .take(count)
        .collect();
    if layout.len() < count {
        return Err(Tier1Error::Config(format!("{generator} too small for {count} logical qubits")));
    }
    Ok(layout)
}

/// Anchor each block at the layout node of its lowest qubit not already
/// taken by a lower-numbered block, so anchors stay distinct. A block with
/// no free qubit keeps its previous anchor if free, else the first free node.
fn anchors_of(hg: &Hypergraph, part: &Partition, layout: &[usize], previous: &[usize]) -> Vec<usize> {
    let mut qubits: Vec<Vec<u32>> = vec![Vec::new(); part.k()];
    for (v, g) in hg.gates().iter().enumerate() {
        qubits[part.block_of(v)].extend_from_slice(&g.qubits);
    }
    let mut taken = vec![false; layout.len()];
    let mut anchors = Vec::with_capacity(part.k());
    for (b, qs) in qubits.iter_mut().enumerate() {
        qs.sort_unstable();
        let slot = qs
            .iter()
            .map(|&q| q as usize)
            .find(|&q| !taken[q])
            .or_else(|| layout.iter().position(|&node| node == previous[b]).filter(|&q| !taken[q]))
            .or_else(|| taken.iter().position(|&t| !t));
        match slot {
            Some(q) => {
                taken[q] = true;
                anchors.push(layout[q]);
            }
            None => anchors.push(previous[b]),
        }
    }
    anchors
}

fn block_payload(hg: &Hypergraph, part: &Partition, b: usize) -> Vec<u8> {
    let mut out = Vec::new();
    for (_, g) in hg.gates().iter().enumerate().filter(|(v, _)| part.block_of(*v) == b) {
        out.extend_from_slice(&g.id.to_le_bytes());
        out.extend_from_slice(&g.depth.to_le_bytes());
        out.push(g.qubits.len() as u8);
        for q in &g.qubits {
            out.extend_from_slice(&q.to_le_bytes());
        }
    }
    out
}

fn kernel_matrix(topology: &Topology, anchors: &[usize], params: &KernelParams) -> Result<CovarianceModel, Tier1Error> {
    let n = anchors.len();
    let mut m = nalgebra::DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let d = topology.distance(anchors[i], anchors[j])? as f64;
            m[(i, j)] = params.sigma_k2 * (-d / params.ell).exp();
        }
    }
    Ok(CovarianceModel::from_matrix(m)?)
}

/// `S / n` each, remainder one shot each to the lowest indices.
pub fn uniform_plan(n: usize, total: u64) -> Vec<u64> {
    let base = total / n as u64;
    let extra = (total % n as u64) as usize;
    (0..n).map(|i| base + u64::from(i < extra)).collect()
}

/// Round a continuous split to integers with the same total: floor, then
/// hand the leftover shots to the largest fractional parts (ties to the
/// lower index). Floors at `s_min` are preserved when the input respects them.
pub fn largest_remainder(continuous: &[f64], total: u64, s_min: u64) -> Vec<u64> {
    let mut plan: Vec<u64> = continuous.iter().map(|&x| (x.floor() as u64).max(s_min)).collect();
    let assigned: u64 = plan.iter().sum();
    let mut order: Vec<usize> = (0..plan.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = continuous[a] - continuous[a].floor();
        let fb = continuous[b] - continuous[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    if assigned <= total {
        for &i in order.iter().cycle().take((total - assigned) as usize) {
            plan[i] += 1;
        }
    } else {
        let mut excess = assigned - total;
        for &i in order.iter().rev().cycle() {
            if excess == 0 {
                break;
            }
            if plan[i] > s_min {
                plan[i] -= 1;
                excess -= 1;
            }
        }
    }
    plan
}

/// Shots proportional to `σ̂_i`, floored at `s_min`.
pub fn proportional_plan(sigma_hat: &[f64], total: u64, s_min: u64) -> Result<Vec<u64>, AllocError> {
    if sigma_hat.iter().all(|&s| s == 0.0) {
        return Ok(uniform_plan(sigma_hat.len(), total));
    }
    let cont = floored_share(sigma_hat, total as f64, s_min as f64)?;
    Ok(largest_remainder(&cont, total, s_min))
}

/// Mutable per-episode state of the partitioner.
struct Repartitioner {
    hg: Hypergraph,
    part: Partition,
    layout: Vec<usize>,
    anchors: Vec<usize>,
    weights: PolicyWeights,
    refs: NormalizationRefs,
    passes: usize,
}

impl Repartitioner {
    fn new(n: usize, cfg: &Tier1Config) -> Result<Self, Tier1Error> {
        let (hg, assignment) = synthetic_circuit(n, cfg.partition.layers)?;
        let caps = BlockCaps {
            max_qubits: cfg.partition.max_qubits,
            max_depth: hg.num_levels().max(1),
        };
        let part = Partition::uniform(assignment, n, caps, hg.num_edges().max(1))?;
        part.validate(&hg)?;
        let layout = snake_layout(&cfg.topology, hg.num_qubits())?;
        let anchors = anchors_of(&hg, &part, &layout, &vec![0; n]);
        let max_gates = cfg.partition.layers.max(1) as f64;
        Ok(Self {
            hg,
            part,
            layout,
            anchors,
            weights: PolicyWeights::new(cfg.partition.alpha, cfg.partition.beta, cfg.partition.gamma)?,
            refs: NormalizationRefs::new(1.0, max_gates)?,
            passes: cfg.partition.passes,
        })
    }

    /// Refine with per-gate queue cost proportional to each block's
    /// estimated noise, then re-anchor fragments.
    fn refine(&mut self, sigma_hat: &[f64]) -> Result<(), Tier1Error> {
        let mean = sigma_hat.iter().sum::<f64>() / sigma_hat.len() as f64;
        let per_gate = sigma_hat.iter().map(|&s| if mean > 0.0 { s / mean } else { 1.0 }).collect();
        let queue = MaxLoadQueue { base_ms: 0.0, per_gate_ms: per_gate };
        let cost = CostModel {
            weights: self.weights,
            refs: self.refs,
            queue: &queue,
        };
        self.part = fm_refine(&self.hg, &self.part, &cost, self.passes)?;
        let state = crate::cutgraph::PartitionState::new(&self.hg, &self.part)?;
        let cuts = state.cut_count();
        let delay = crate::cutgraph::QueueModel::expected_delay(&queue, state.loads());
        self.refs.observe(if cuts > 0 { state.ebits() / cuts as f64 } else { 0.0 }, delay);
        self.anchors = anchors_of(&self.hg, &self.part, &self.layout, &self.anchors);
        Ok(())
    }
}

/// Run one closed-loop episode.
///
/// Per step: plan from the previous estimates (uniform at step 0), evolve
/// the truth, pilot and observe, Kalman and CUSUM per fragment (process
/// noise estimated after warmup, detectors armed from then on), repartition
/// on any alarm, choose estimators, score the plan, then seal and verify
/// the dispatched fragments.
pub fn run_episode(
    spec: &WorkloadSpec,
    cfg: &EpisodeConfig,
    tier1: &Tier1Config,
    detector: &CusumConfig,
) -> Result<Episode, Tier1Error> {
    let started = Instant::now();
    spec.validate(cfg.steps)?;
    let n = spec.n;
    if cfg.shots_per_step < n as u64 * cfg.s_min {
        return Err(Tier1Error::Config(format!("budget {} below {n} x s_min", cfg.shots_per_step)));
    }
    let base_topology = Topology::parse_generator(&tier1.topology)?;
    let kernel = KernelParams::new(tier1.kernel.sigma_k2, tier1.kernel.ell)?;
    let tail = TailParams::new(tier1.tail.rho, n as f64)?;
    let fit = CascadeFit::new(tier1.cascade.alpha_shadows, tier1.cascade.beta_mle, tier1.cascade.bias)?;
    let mut cadence = Cadence::new(cfg.cadence)?;
    if let Some(a) = spec.anchors.iter().find(|&&a| a >= base_topology.num_nodes()) {
        return Err(Tier1Error::Config(format!("anchor node {a} outside {}", tier1.topology)));
    }
    let truth_kernel = kernel_matrix(&base_topology, &spec.anchors, &kernel)?;
    let mut parts = Repartitioner::new(n, tier1)?;
    let root = episode_root(cfg.master_seed, spec.name, cfg.replicate);
    let pilot_dists: Vec<WeightedIndex<f64>> = spec
        .outcome_probs
        .iter()
        .map(|p| WeightedIndex::new(p).map_err(|e| Tier1Error::Config(format!("outcome profile: {e}"))))
        .collect::<Result<_, _>>()?;
    let mut pad = PhasePad::new(tier1.phasepad.security, root.child("phasepad").seed_u64());
    let mut pad_rng = root.child("phasepad").child(cfg.policy.label()).rng();
    let mut timing = EpisodeTiming::default();
    let mut aborts = 0;

    let warmup = tier1.warmup.min(cfg.steps.saturating_sub(1)).max(1);
    let mut sigma2 = spec.initial_variance.clone();
    let mut states: Vec<KalmanState> = Vec::new();
    let mut q = vec![0.0; n];
    let mut z_hist: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut r_hist: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut cusum = vec![CusumState::default(); n];
    let mut records = Vec::with_capacity(cfg.steps);

    for t in 0..cfg.steps {
        let plan = if t == 0 {
            uniform_plan(n, cfg.shots_per_step)
        } else {
            let sigma_hat: Vec<f64> = states.iter().map(|s| s.mean.max(0.0).sqrt()).collect();
            match cfg.policy {
                Policy::Uniform => uniform_plan(n, cfg.shots_per_step),
                Policy::Proportional => proportional_plan(&sigma_hat, cfg.shots_per_step, cfg.s_min)?,
                Policy::TopoGp => {
                    let topo = base_topology.clone().with_anchors(parts.anchors.clone())?;
                    allocate(&states, &topo, &kernel, &tail, cfg.shots_per_step, cfg.s_min)?.plan.shots
                }
            }
        };
        let realloc_events = cadence.record(plan.iter().sum());
        if t > 0 {
            sigma2 = evolve_truth(spec, &sigma2, t, &mut root.child("truth").index(t as u64).rng());
        }

        let pilots: Vec<u64> = plan
            .iter()
            .map(|&s| pilot_shots(s, tier1.cascade.pilot_fraction).min(s - 1).max(1))
            .collect();
        let est_shots: Vec<u64> = plan.iter().zip(&pilots).map(|(s, p)| s - p).collect();
        let pilot_stream = root.child("pilot").index(t as u64);
        let entropy_estimates: Vec<f64> = (0..n)
            .map(|i| {
                let mut rng = pilot_stream.index(i as u64).rng();
                let mut counts = [0u64; OUTCOMES];
                for _ in 0..pilots[i] {
                    counts[pilot_dists[i].sample(&mut rng)] += 1;
                }
                pilot_entropy(&counts)
            })
            .collect::<Result<_, _>>()?;
        let z = observe(&sigma2, &est_shots, &root.child("obs").index(t as u64));

        let mut innovations = vec![0.0; n];
        let mut triggers = Vec::new();
        if t == 0 {
            states = z
                .iter()
                .zip(&est_shots)
                .map(|(&z0, &s)| KalmanState::new(z0, obs_noise(z0, s)))
                .collect();
            q = z.iter().map(|&z0| (tier1.kalman.warmup_q_rel * z0).powi(2)).collect();
        } else {
            if t == warmup {
                for i in 0..n {
                    let r_bar = r_hist[i].iter().sum::<f64>() / r_hist[i].len().max(1) as f64;
                    let floor = (tier1.kalman.q_floor_rel * states[i].mean).powi(2);
                    q[i] = estimate_process_noise(&z_hist[i], r_bar, floor);
                }
            }
            for i in 0..n {
                let r = obs_noise(states[i].mean, est_shots[i]);
                let kcfg = KalmanConfig::new(q[i], r)?;
                let innov = states[i].innovation(z[i], &kcfg);
                innovations[i] = innov.normalized();
                if t >= warmup {
                    let (next, alarm) = cusum[i].update(innovations[i], detector);
                    cusum[i] = next;
                    if alarm {
                        triggers.push(i);
                        states[i].p = states[i].p.max(innov.residual * innov.residual);
                    }
                }
                states[i] = kalman_step(states[i], z[i], &kcfg)?;
            }
        }
        for i in 0..n {
            if t < warmup {
                z_hist[i].push(z[i]);
                r_hist[i].push(obs_noise(z[i], est_shots[i]));
            }
        }
        let repartitioned = !triggers.is_empty();
        if repartitioned {
            let sigma_hat: Vec<f64> = states.iter().map(|s| s.mean.max(0.0).sqrt()).collect();
            parts.refine(&sigma_hat)?;
        }

        // estimator choice and realized error
        let xi_stream = root.child("err").index(t as u64);
        let mut xi_rng = xi_stream.rng();
        let mut choices = Vec::with_capacity(n);
        let mut sq_errors = Vec::with_capacity(n);
        for i in 0..n {
            let xi: f64 = StandardNormal.sample(&mut xi_rng);
            let choice = if tier1.cascade.enabled {
                choose_estimator(&fit.scaled(states[i].mean.max(0.0)), est_shots[i], entropy_estimates[i])?
            } else {
                EstimatorChoice::Shadows
            };
            let (mse_shadows, mse_mle) = predict_mse(&fit.scaled(sigma2[i]), est_shots[i], spec.entropy_bits[i])?;
            let mse = match choice {
                EstimatorChoice::Shadows => mse_shadows,
                EstimatorChoice::Mle => mse_mle,
            };
            choices.push(choice);
            sq_errors.push(xi * xi * mse);
        }
        let mean_sq_error = sq_errors.iter().sum::<f64>() / n as f64;

        let u_true: Vec<f64> = sigma2.iter().map(|s| s.sqrt() * tail.factor()).collect();
        let shots_f: Vec<f64> = plan.iter().map(|&s| s as f64).collect();
        let variance_proxy = variance_bound(&u_true, &shots_f, &truth_kernel)?;

        if tier1.phasepad.enabled {
            let jobs: Vec<FragmentJob> = (0..n)
                .map(|b| FragmentJob {
                    fragment_id: b as u64,
                    shots: plan[b],
                    payload: block_payload(&parts.hg, &parts.part, b),
                })
                .collect();
            let t0 = Instant::now();
            let (batch, pending) = pad.dispatch(&jobs, &mut pad_rng)?;
            timing.mask_seal += t0.elapsed();
            let results = honest_backend(&batch);
            let t1 = Instant::now();
            let verified = pad.verify_and_recover(&pending, &results)?;
            timing.open_unmask += t1.elapsed();
            if verified.report.decision == Decision::Abort {
                aborts += 1;
            }
        }

        records.push(StepRecord {
            step: t,
            warmup: t < warmup,
            plan,
            true_variance: sigma2.clone(),
            kalman_means: states.iter().map(|s| s.mean).collect(),
            innovations,
            triggers,
            repartitioned,
            realloc_events,
            entropy_estimates,
            choices,
            variance_proxy,
            sq_errors,
            mean_sq_error,
        });
    }
    timing.total = started.elapsed();
    Ok(Episode {
        workload: spec.name,
        policy: cfg.policy,
        replicate: cfg.replicate,
        cascade_enabled: tier1.cascade.enabled,
        records,
        timing,
        phasepad_aborts: aborts,
    })
}

/// Variance of a sample variance of `s` normal draws: `2σ⁴/(s-1)`.
fn obs_noise(sigma2: f64, shots: u64) -> f64 {
    2.0 * sigma2 * sigma2 / (shots.max(2) - 1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub contraction: f64,
    pub p95_tail: f64,
    pub final_mse: f64,
}

/// Contraction is the ratio of the mean post-warmup variance proxy of the
/// policy arm to that of the uniform arm; tail and MSE are read from the
/// policy arm's final step.
pub fn episode_metrics(policy: &Episode, uniform: &Episode) -> Result<EpisodeMetrics, Tier1Error> {
    if policy.workload != uniform.workload || policy.replicate != uniform.replicate {
        return Err(Tier1Error::Pairing(format!(
            "{}#{} vs {}#{}",
            policy.workload, policy.replicate, uniform.workload, uniform.replicate
        )));
    }
    if policy.records.len() != uniform.records.len() || policy.records.is_empty() {
        return Err(Tier1Error::Pairing("episodes differ in length".into()));
    }
    let post_mean = |e: &Episode| {
        let v: Vec<f64> = e.records.iter().filter(|r| !r.warmup).map(|r| r.variance_proxy).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    let (a, b) = (post_mean(policy), post_mean(uniform));
    let contraction = if a == b { 1.0 } else { a / b };
    let last = policy.records.last().expect("non-empty");
    let shots: Vec<f64> = last.plan.iter().map(|&s| s as f64).collect();
    Ok(EpisodeMetrics {
        contraction,
        p95_tail: quantile(&shots, 0.95),
        final_mse: last.mean_sq_error,
    })
}
