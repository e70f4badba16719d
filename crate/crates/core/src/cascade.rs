//! Entropy-gated estimator choice between classical shadows and MLE
//! stitching.
//!
//! Shadows MSE is modeled as `α/s`; MLE as `β/s² + b(H)²`, with the bias
//! `b(H) = b0 · max(0, H - h_thr)` growing with the pilot outcome entropy.
//! The cascade picks whichever predicts the lower MSE, MLE on ties.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CascadeError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate design: {0}")]
    Degenerate(String),
    #[error("model mismatch: {0}")]
    ModelMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorChoice {
    Shadows,
    Mle,
}

impl EstimatorChoice {
    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorChoice::Shadows => "shadows",
            EstimatorChoice::Mle => "mle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasModel {
    pub b0: f64,
    /// Entropy (bits) below which MLE is unbiased.
    pub h_thr: f64,
}

impl Default for BiasModel {
    fn default() -> Self {
        Self { b0: 0.05, h_thr: 1.0 }
    }
}

impl BiasModel {
    pub fn zero() -> Self {
        Self { b0: 0.0, h_thr: 0.0 }
    }

    pub fn at(&self, h: f64) -> f64 {
        self.b0 * (h - self.h_thr).max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CascadeFit {
    pub alpha_shadows: f64,
    pub beta_mle: f64,
    pub bias: BiasModel,
}

impl CascadeFit {
    pub fn new(alpha_shadows: f64, beta_mle: f64, bias: BiasModel) -> Result<Self, CascadeError> {
        if !(alpha_shadows > 0.0 && alpha_shadows.is_finite() && beta_mle > 0.0 && beta_mle.is_finite()) {
            return Err(CascadeError::Domain(format!(
                "need alpha > 0 and beta > 0 (got {alpha_shadows}, {beta_mle})"
            )));
        }
        if !(bias.b0 >= 0.0 && bias.b0.is_finite() && bias.h_thr.is_finite()) {
            return Err(CascadeError::Domain(format!("invalid bias model {bias:?}")));
        }
        Ok(Self {
            alpha_shadows,
            beta_mle,
            bias,
        })
    }

    /// Same fit with both variance coefficients multiplied by `k`; used to
    /// express errors for an observable of variance `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            alpha_shadows: self.alpha_shadows * k,
            beta_mle: self.beta_mle * k,
            bias: self.bias,
        }
    }
}

/// Pilot histogram and its entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotStats {
    pub counts: Vec<u64>,
    pub pilot_fraction: f64,
    pub entropy_bits: f64,
}

impl PilotStats {
    pub fn from_counts(counts: Vec<u64>, pilot_fraction: f64) -> Result<Self, CascadeError> {
        let entropy_bits = pilot_entropy(&counts)?;
        Ok(Self {
            counts,
            pilot_fraction,
            entropy_bits,
        })
    }
}

/// Pilot size for a fragment budget: `ceil(fraction · s)`.
pub fn pilot_shots(s_fragment: u64, fraction: f64) -> u64 {
    (fraction * s_fragment as f64).ceil() as u64
}

/// Plug-in Shannon entropy in bits.
pub fn pilot_entropy(counts: &[u64]) -> Result<f64, CascadeError> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(CascadeError::Domain("empty pilot histogram".into()));
    }
    let n = total as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    Ok(h.max(0.0))
}

/// `(α/s, β/s² + b(H)²)`.
pub fn predict_mse(fit: &CascadeFit, s: u64, h: f64) -> Result<(f64, f64), CascadeError> {
    if s == 0 {
        return Err(CascadeError::Domain("shot count must be at least 1".into()));
    }
    let s = s as f64;
    let b = fit.bias.at(h);
    Ok((fit.alpha_shadows / s, fit.beta_mle / (s * s) + b * b))
}

pub fn choose_estimator(fit: &CascadeFit, s: u64, h: f64) -> Result<EstimatorChoice, CascadeError> {
    let (shadows, mle) = predict_mse(fit, s, h)?;
    Ok(if mle <= shadows {
        EstimatorChoice::Mle
    } else {
        EstimatorChoice::Shadows
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Crossover {
    /// Smallest shot count at which MLE is predicted at least as good.
    At(u64),
    Never,
}

/// Smallest `s >= 1` with `β/s² + b² <= α/s`.
///
/// The condition is `b² s² - α s + β <= 0`. With `b = 0` it holds from
/// `ceil(β/α)` on. With `b > 0` it holds only between the two roots, and
/// not at all once `b² >= α²/(4β)`.
pub fn crossover_shots(fit: &CascadeFit, h: f64) -> Crossover {
    let (a, beta) = (fit.alpha_shadows, fit.beta_mle);
    let b = fit.bias.at(h);
    let b2 = b * b;
    let holds = |s: u64| s >= 1 && matches!(choose_estimator(fit, s, h), Ok(EstimatorChoice::Mle));
    let lo = if b2 == 0.0 {
        beta / a
    } else {
        if b2 >= a * a / (4.0 * beta) {
            return Crossover::Never;
        }
        let root = (a * a - 4.0 * b2 * beta).sqrt();
        (a - root) / (2.0 * b2)
    };
    if lo > u64::MAX as f64 / 2.0 {
        return Crossover::Never;
    }
    let guess = (lo.ceil() as u64).max(1);
    // settle float rounding near the root against the exact comparison
    let mut s = guess.saturating_sub(1).max(1);
    while s <= guess + 1 {
        if holds(s) {
            return Crossover::At(s);
        }
        s += 1;
    }
    Crossover::Never
}

/// One pilot measurement of an estimator's squared error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PilotSample {
    pub arm: EstimatorChoice,
    pub shots: u64,
    pub entropy_bits: f64,
    pub sq_error: f64,
}

const SLOPE_RANGE: (f64, f64) = (-1.5, -0.5);

/// Least-squares fit of the two MSE models.
///
/// Shadows: `α` by regression through the origin on `1/s`, after checking
/// that the per-`s` mean errors fall off with a log-log slope in
/// [-1.5, -0.5]. MLE: for each candidate `h_thr` on a 0.05-bit grid,
/// non-negative least squares of the errors on `1/s²` and
/// `max(0, H - h_thr)²`; the threshold with the smallest residual wins and
/// `b0` is the square root of the second coefficient.
pub fn fit_from_pilots(samples: &[PilotSample]) -> Result<CascadeFit, CascadeError> {
    let arm = |which| -> Vec<&PilotSample> { samples.iter().filter(|p| p.arm == which).collect() };
    let shadows = arm(EstimatorChoice::Shadows);
    let mle = arm(EstimatorChoice::Mle);
    for (name, rows) in [("shadows", &shadows), ("mle", &mle)] {
        if let Some(p) = rows.iter().find(|p| p.shots == 0 || !(p.sq_error >= 0.0) || !p.entropy_bits.is_finite()) {
            return Err(CascadeError::Domain(format!("bad {name} pilot sample {p:?}")));
        }
        let mut s: Vec<u64> = rows.iter().map(|p| p.shots).collect();
        s.sort_unstable();
        s.dedup();
        if s.len() < 3 {
            return Err(CascadeError::Degenerate(format!(
                "{name} arm has {} distinct shot counts, need 3",
                s.len()
            )));
        }
    }

    let slope = loglog_slope(&shadows)?;
    if !(SLOPE_RANGE.0..=SLOPE_RANGE.1).contains(&slope) {
        return Err(CascadeError::ModelMismatch(format!(
            "shadows errors scale as s^{slope:.2}, expected about s^-1"
        )));
    }
    let (sxy, sxx) = shadows.iter().fold((0.0, 0.0), |(xy, xx), p| {
        let x = 1.0 / p.shots as f64;
        (xy + x * p.sq_error, xx + x * x)
    });
    let alpha = sxy / sxx;

    let h_max = mle.iter().map(|p| p.entropy_bits).fold(0.0, f64::max);
    let mut best: Option<(f64, f64, f64, f64)> = None; // rss, beta, c, h_thr
    let steps = (h_max / 0.05).ceil() as usize;
    for k in 0..=steps {
        let h_thr = k as f64 * 0.05;
        let rows: Vec<(f64, f64, f64)> = mle
            .iter()
            .map(|p| {
                let s = p.shots as f64;
                let g = (p.entropy_bits - h_thr).max(0.0);
                (1.0 / (s * s), g * g, p.sq_error)
            })
            .collect();
        let (beta, c, rss) = nnls2(&rows);
        if best.is_none_or(|(r, ..)| rss < r) {
            best = Some((rss, beta, c, h_thr));
        }
    }
    let (_, beta, c, h_thr) = best.expect("grid has at least one point");
    let bias = if c > 0.0 {
        BiasModel { b0: c.sqrt(), h_thr }
    } else {
        BiasModel::zero()
    };
    CascadeFit::new(alpha, beta, bias)
        .map_err(|e| CascadeError::ModelMismatch(format!("fitted coefficients invalid: {e}")))
}

fn loglog_slope(rows: &[&PilotSample]) -> Result<f64, CascadeError> {
    let mut shots: Vec<u64> = rows.iter().map(|p| p.shots).collect();
    shots.sort_unstable();
    shots.dedup();
    let pts: Vec<(f64, f64)> = shots
        .iter()
        .map(|&s| {
            let errs: Vec<f64> = rows.iter().filter(|p| p.shots == s).map(|p| p.sq_error).collect();
            (s as f64, errs.iter().sum::<f64>() / errs.len() as f64)
        })
        .collect();
    if pts.iter().any(|&(_, m)| !(m > 0.0)) {
        return Err(CascadeError::ModelMismatch("zero mean error at some shot count".into()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0.ln()).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1.ln()).sum::<f64>() / n;
    let (sxy, sxx) = pts.iter().fold((0.0, 0.0), |(xy, xx), p| {
        let dx = p.0.ln() - mx;
        (xy + dx * (p.1.ln() - my), xx + dx * dx)
    });
    Ok(sxy / sxx)
}

/// Two-variable non-negative least squares `y ≈ a x1 + c x2`, by checking the
/// unconstrained solution and the two one-variable boundary fits.
fn nnls2(rows: &[(f64, f64, f64)]) -> (f64, f64, f64) {
    let (mut s11, mut s12, mut s22, mut s1y, mut s2y) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(x1, x2, y) in rows {
        s11 += x1 * x1;
        s12 += x1 * x2;
        s22 += x2 * x2;
        s1y += x1 * y;
        s2y += x2 * y;
    }
    let rss = |a: f64, c: f64| -> f64 { rows.iter().map(|&(x1, x2, y)| (y - a * x1 - c * x2).powi(2)).sum() };
    let mut cands = Vec::new();
    let det = s11 * s22 - s12 * s12;
    if det.abs() > 1e-12 * (s11 * s22).max(f64::MIN_POSITIVE) {
        let a = (s1y * s22 - s2y * s12) / det;
        let c = (s2y * s11 - s1y * s12) / det;
        if a >= 0.0 && c >= 0.0 {
            cands.push((a, c));
        }
    }
    if s11 > 0.0 {
        cands.push(((s1y / s11).max(0.0), 0.0));
    }
    if s22 > 0.0 {
        cands.push((0.0, (s2y / s22).max(0.0)));
    }
    cands.push((0.0, 0.0));
    cands
        .into_iter()
        .map(|(a, c)| (a, c, rss(a, c)))
        .min_by(|x, y| x.2.total_cmp(&y.2))
        .unwrap()
}
