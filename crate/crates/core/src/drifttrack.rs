//! Drift detection and variance tracking.
//!
//! [`CusumState`] is a one-sided Page CUSUM on normalized deltas; a bank of
//! them is OR-combined across metrics. [`KalmanState`] is a scalar
//! random-walk filter over a fragment's latent variance.

use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::rng::Stream;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DriftError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite observation {0}")]
    Observation(f64),
    #[error("degenerate Kalman gain (p + q + r = 0 with r > 0)")]
    DegenerateGain,
    #[error("threshold calibration failed: {0}")]
    Calibration(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CusumConfig {
    pub kappa: f64,
    pub h: f64,
}

impl CusumConfig {
    /// `h = 0` is accepted as the degenerate "alarm on any excess" detector.
    pub fn new(kappa: f64, h: f64) -> Result<Self, DriftError> {
        if !kappa.is_finite() || !(h >= 0.0 && h.is_finite()) {
            return Err(DriftError::Config(format!("bad CUSUM parameters kappa={kappa}, h={h}")));
        }
        Ok(Self { kappa, h })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CusumState {
    pub s: f64,
}

impl CusumState {
    /// `s' = max(0, s + x - kappa)`; alarms when `s' >= h` (and `s' > 0`),
    /// resetting the accumulator to zero.
    pub fn update(self, x: f64, cfg: &CusumConfig) -> (Self, bool) {
        let s = (self.s + (x - cfg.kappa)).max(0.0);
        if s >= cfg.h && s > 0.0 {
            (Self { s: 0.0 }, true)
        } else {
            (Self { s }, false)
        }
    }
}

pub fn cusum_update(state: CusumState, x: f64, cfg: &CusumConfig) -> (CusumState, bool) {
    state.update(x, cfg)
}

/// One detector per metric. Metrics are scanned in order and the scan stops
/// at the first alarm, so later metrics are not advanced on that step.
#[derive(Debug, Clone, PartialEq)]
pub struct CusumBank {
    configs: Vec<CusumConfig>,
    states: Vec<CusumState>,
}

impl CusumBank {
    pub fn new(configs: Vec<CusumConfig>) -> Self {
        let states = vec![CusumState::default(); configs.len()];
        Self { configs, states }
    }

    pub fn uniform(n: usize, cfg: CusumConfig) -> Self {
        Self::new(vec![cfg; n])
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[CusumState] {
        &self.states
    }

    /// Returns the index of the metric that alarmed, if any.
    pub fn trigger(&mut self, xs: &[f64]) -> Option<usize> {
        assert_eq!(xs.len(), self.states.len(), "one delta per metric");
        for (m, &x) in xs.iter().enumerate() {
            let (next, alarm) = self.states[m].update(x, &self.configs[m]);
            self.states[m] = next;
            if alarm {
                return Some(m);
            }
        }
        None
    }
}

/// In-control distribution of the normalized delta.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NullModel {
    Normal { mean: f64, sd: f64 },
    /// `|N(0, sd^2)|`; the law of a normalized absolute innovation.
    HalfNormal { sd: f64 },
}

impl NullModel {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            NullModel::Normal { mean, sd } => mean + sd * standard_normal(rng),
            NullModel::HalfNormal { sd } => (sd * standard_normal(rng)).abs(),
        }
    }
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rand_distr::StandardNormal.sample(rng)
}

/// Result of threshold calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CusumCalibration {
    pub h: f64,
    /// Monte-Carlo ARL at `h` on the calibration paths.
    pub arl: f64,
}

/// Lower and upper ends of the threshold search.
pub const H_SEARCH: (f64, f64) = (0.01, 100.0);

/// Monte-Carlo average run length to the first alarm, with each run capped
/// at `cap` steps. Runs use fixed per-run streams, so ARL is monotone in `h`.
pub fn monte_carlo_arl(kappa: f64, h: f64, null: &NullModel, runs: usize, cap: usize, seed: u64) -> f64 {
    let cfg = CusumConfig { kappa, h };
    let root = Stream::new(seed).child("cusum-arl");
    let total: usize = (0..runs)
        .map(|i| {
            let mut rng = root.index(i as u64).rng();
            let mut st = CusumState::default();
            for t in 1..=cap {
                let (next, alarm) = st.update(null.sample(&mut rng), &cfg);
                if alarm {
                    return t;
                }
                st = next;
            }
            cap
        })
        .sum();
    total as f64 / runs as f64
}

/// Bisection over `h` in [0.01, 100] for a Monte-Carlo ARL matching
/// `target_arl0` (2000 runs, runs capped at 20x the target).
pub fn calibrate_cusum_threshold(
    kappa: f64,
    target_arl0: f64,
    null: &NullModel,
    seed: u64,
) -> Result<CusumCalibration, DriftError> {
    calibrate_cusum_threshold_with(kappa, target_arl0, null, seed, 2000)
}

pub fn calibrate_cusum_threshold_with(
    kappa: f64,
    target_arl0: f64,
    null: &NullModel,
    seed: u64,
    runs: usize,
) -> Result<CusumCalibration, DriftError> {
    if !(target_arl0 >= 10.0) {
        return Err(DriftError::Config(format!("target ARL0 {target_arl0} must be at least 10")));
    }
    let cap = (20.0 * target_arl0).ceil() as usize;
    let arl = |h: f64| monte_carlo_arl(kappa, h, null, runs, cap, seed);
    let (mut lo, mut hi) = H_SEARCH;
    let (arl_lo, arl_hi) = (arl(lo), arl(hi));
    if arl_hi < target_arl0 {
        return Err(DriftError::Calibration(format!(
            "ARL at h={hi} is {arl_hi:.1}, below target {target_arl0}"
        )));
    }
    if arl_lo > target_arl0 {
        return Err(DriftError::Calibration(format!(
            "ARL at h={lo} is already {arl_lo:.1}, above target {target_arl0}"
        )));
    }
    let mut best = if (arl_lo - target_arl0).abs() < (arl_hi - target_arl0).abs() {
        CusumCalibration { h: lo, arl: arl_lo }
    } else {
        CusumCalibration { h: hi, arl: arl_hi }
    };
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let a = arl(mid);
        if (a - target_arl0).abs() < (best.arl - target_arl0).abs() {
            best = CusumCalibration { h: mid, arl: a };
        }
        if (a - target_arl0).abs() <= 0.01 * target_arl0 || hi - lo < 1e-9 {
            break;
        }
        if a < target_arl0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KalmanConfig {
    /// Process noise variance.
    pub q: f64,
    /// Observation noise variance; `f64::INFINITY` means "no information".
    pub r: f64,
}

impl KalmanConfig {
    pub fn new(q: f64, r: f64) -> Result<Self, DriftError> {
        if !(q >= 0.0 && q.is_finite()) || !(r >= 0.0) {
            return Err(DriftError::Config(format!("bad Kalman noise q={q}, r={r}")));
        }
        Ok(Self { q, r })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KalmanState {
    /// Estimated latent variance, never negative.
    pub mean: f64,
    /// Error covariance.
    pub p: f64,
}

/// One-step-ahead prediction for an incoming observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Innovation {
    pub residual: f64,
    /// `p + q + r`.
    pub variance: f64,
}

impl Innovation {
    /// `|residual| / sqrt(variance)`, the scale-free delta fed to CUSUM.
    pub fn normalized(&self) -> f64 {
        if self.variance > 0.0 {
            self.residual.abs() / self.variance.sqrt()
        } else if self.residual == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

impl KalmanState {
    pub fn new(mean: f64, p: f64) -> Self {
        Self {
            mean: mean.max(0.0),
            p: p.max(0.0),
        }
    }

    pub fn innovation(&self, z: f64, cfg: &KalmanConfig) -> Innovation {
        Innovation {
            residual: z - self.mean,
            variance: self.p + cfg.q + cfg.r,
        }
    }

    pub fn step(self, z: f64, cfg: &KalmanConfig) -> Result<Self, DriftError> {
        kalman_step(self, z, cfg)
    }
}

/// Predict/update: `p- = p + q`, `k = p- / (p- + r)`, `mean' = mean + k (z - mean)`,
/// `p' = (1 - k) p-`, with `mean'` clamped at zero.
pub fn kalman_step(state: KalmanState, z: f64, cfg: &KalmanConfig) -> Result<KalmanState, DriftError> {
    if !z.is_finite() {
        return Err(DriftError::Observation(z));
    }
    if !(cfg.q >= 0.0) || !(cfg.r >= 0.0) || !(state.p >= 0.0) {
        return Err(DriftError::Config(format!(
            "negative noise or covariance (q={}, r={}, p={})",
            cfg.q, cfg.r, state.p
        )));
    }
    let p_prior = state.p + cfg.q;
    let gain = if cfg.r == 0.0 {
        1.0
    } else if p_prior + cfg.r == 0.0 {
        return Err(DriftError::DegenerateGain);
    } else {
        p_prior / (p_prior + cfg.r)
    };
    let mean = state.mean + gain * (z - state.mean);
    Ok(KalmanState {
        mean: mean.max(0.0),
        p: ((1.0 - gain) * p_prior).max(0.0),
    })
}

/// Process-noise estimate from a warmup window: for a random walk observed
/// with noise `r`, `Var(z_t - z_{t-1}) = q + 2r`. Floored at `floor`.
pub fn estimate_process_noise(observations: &[f64], mean_obs_noise: f64, floor: f64) -> f64 {
    if observations.len() < 3 {
        return floor;
    }
    let diffs: Vec<f64> = observations.windows(2).map(|w| w[1] - w[0]).collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (var - 2.0 * mean_obs_noise).max(floor)
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cusum_hand_stepped() {
        let cfg = CusumConfig::new(0.5, 1.0).unwrap();
        let (s1, a1) = cusum_update(CusumState::default(), 1.0, &cfg);
        assert_eq!((s1.s, a1), (0.5, false));
        let (s2, a2) = cusum_update(s1, 1.0, &cfg);
        assert_eq!((s2.s, a2), (0.0, true));
    }

    #[test]
    fn cusum_floor_at_zero() {
        let cfg = CusumConfig::new(0.5, 1.0).unwrap();
        let mut st = CusumState::default();
        for x in [0.5, 0.1, -3.0, 0.5, 0.0] {
            let (next, alarm) = st.update(x, &cfg);
            assert!(!alarm);
            assert_eq!(next.s, 0.0);
            st = next;
        }
        let (next, alarm) = CusumState { s: 0.7 }.update(-1e9, &cfg);
        assert_eq!((next.s, alarm), (0.0, false));
    }

    #[test]
    fn zero_threshold_alarms_on_first_excess() {
        let cfg = CusumConfig::new(0.5, 0.0).unwrap();
        let xs = [0.1, 0.5, 0.2, 0.6, 0.0];
        let mut st = CusumState::default();
        let first = xs.iter().position(|&x| {
            let (next, alarm) = st.update(x, &cfg);
            st = next;
            alarm
        });
        assert_eq!(first, Some(3));
    }

    #[test]
    fn bank_stops_at_first_alarm() {
        let cfg = CusumConfig::new(0.0, 1.0).unwrap();
        let mut bank = CusumBank::uniform(3, cfg);
        assert_eq!(bank.trigger(&[0.5, 2.0, 0.7]), Some(1));
        // metric 0 advanced, metric 1 reset, metric 2 untouched
        assert_eq!(bank.states()[0].s, 0.5);
        assert_eq!(bank.states()[1].s, 0.0);
        assert_eq!(bank.states()[2].s, 0.0);
        assert_eq!(bank.trigger(&[0.6, 0.0, 0.0]), Some(0));
    }

    #[test]
    fn large_slack_never_alarms() {
        let null = NullModel::Normal { mean: 0.0, sd: 1.0 };
        assert_eq!(monte_carlo_arl(10.0, 1.0, &null, 5, 100_000, 3), 100_000.0);
        assert!(matches!(
            calibrate_cusum_threshold_with(10.0, 200.0, &null, 3, 50),
            Err(DriftError::Calibration(_))
        ));
    }

    #[test]
    fn calibration_rejects_small_targets() {
        let null = NullModel::Normal { mean: 0.0, sd: 1.0 };
        assert!(matches!(
            calibrate_cusum_threshold(0.5, 5.0, &null, 1),
            Err(DriftError::Config(_))
        ));
    }

    #[test]
    fn kalman_hand_computed() {
        let cfg = KalmanConfig::new(0.01, 0.04).unwrap();
        let next = kalman_step(KalmanState::new(1.0, 0.05), 1.5, &cfg).unwrap();
        assert!((next.mean - 1.3).abs() < 1e-12);
        assert!((next.p - 0.024).abs() < 1e-12);
    }

    #[test]
    fn kalman_limits() {
        let st = KalmanState::new(2.0, 0.3);
        let blind = kalman_step(st, 100.0, &KalmanConfig::new(0.1, f64::INFINITY).unwrap()).unwrap();
        assert_eq!(blind.mean, 2.0);
        assert!((blind.p - 0.4).abs() < 1e-15);
        let perfect = kalman_step(st, 7.0, &KalmanConfig::new(0.0, 0.0).unwrap()).unwrap();
        assert_eq!((perfect.mean, perfect.p), (7.0, 0.0));
        let zero = kalman_step(KalmanState::new(0.0, 0.0), 3.0, &KalmanConfig::new(0.0, 0.0).unwrap()).unwrap();
        assert_eq!(zero.mean, 3.0);
    }

    #[test]
    fn kalman_clamps_and_rejects() {
        let cfg = KalmanConfig::new(0.0, 0.0).unwrap();
        assert_eq!(kalman_step(KalmanState::new(1.0, 1.0), -4.0, &cfg).unwrap().mean, 0.0);
        assert!(matches!(
            kalman_step(KalmanState::new(1.0, 1.0), f64::NAN, &cfg),
            Err(DriftError::Observation(_))
        ));
        assert!(matches!(
            kalman_step(KalmanState::new(1.0, 1.0), f64::INFINITY, &cfg),
            Err(DriftError::Observation(_))
        ));
        assert!(KalmanConfig::new(-1.0, 0.0).is_err());
    }

    #[test]
    fn process_noise_moment_estimate() {
        // pure random walk, no observation noise
        let mut rng = Stream::new(4).rng();
        let step = rand_distr::Normal::new(0.0, 0.1).unwrap();
        let mut z = vec![1.0];
        for _ in 0..20_000 {
            let last = *z.last().unwrap();
            z.push(last + step.sample(&mut rng));
        }
        let q = estimate_process_noise(&z, 0.0, 0.0);
        assert!((q - 0.01).abs() < 0.001, "q = {q}");
        assert_eq!(estimate_process_noise(&[1.0, 1.0], 0.0, 0.5), 0.5);
    }
}
