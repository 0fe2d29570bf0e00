//! Clip-by-norm and AutoClip: a clipping threshold set each iteration to the
//! p-th percentile of every gradient norm observed so far.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::GradVector;

/// A gradient that has been through a clipping policy.
///
/// Optimizers only accept this type, so raw gradients cannot skip the clipper.
#[derive(Debug, Clone, PartialEq)]
pub struct ClippedGrad(GradVector);

impl ClippedGrad {
    /// Wraps a gradient that an external policy has already clipped or rescaled.
    pub fn assume_clipped(g: GradVector) -> Self {
        Self(g)
    }

    pub fn grad(&self) -> &GradVector {
        &self.0
    }

    pub fn into_inner(self) -> GradVector {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipReport {
    pub threshold: f64,
    /// Scale factor applied to the gradient, `min(threshold / norm, 1)`.
    pub scale: f64,
    pub fired: bool,
    pub pre_clip_norm: f64,
}

/// Rescales `g` so its norm does not exceed `threshold`.
pub fn clip_by_norm(g: &GradVector, threshold: f64) -> Result<(ClippedGrad, ClipReport)> {
    if !(threshold > 0.0) {
        return Err(Error::Config(format!("clip threshold must be positive, got {threshold}")));
    }
    apply_threshold(g, threshold)
}

fn apply_threshold(g: &GradVector, threshold: f64) -> Result<(ClippedGrad, ClipReport)> {
    if !g.is_finite() {
        return Err(Error::NonFiniteGradient("cannot clip a non-finite gradient".into()));
    }
    let norm = g.norm();
    if norm <= threshold || norm == 0.0 {
        let report = ClipReport { threshold, scale: 1.0, fired: false, pre_clip_norm: norm };
        return Ok((ClippedGrad(g.clone()), report));
    }
    let mut scale = threshold / norm;
    let mut clipped = g.scaled(scale);
    // Rounding can leave the rescaled norm an ulp above the threshold.
    while clipped.norm() > threshold {
        scale = scale.next_down();
        clipped = g.scaled(scale);
    }
    let report = ClipReport { threshold, scale, fired: true, pre_clip_norm: norm };
    Ok((ClippedGrad(clipped), report))
}

/// Recorded gradient norms, optionally limited to the most recent `window`.
///
/// Keeps an insertion-ordered queue for eviction alongside a sorted copy for
/// order-statistic queries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradNormHistory {
    norms: VecDeque<f64>,
    sorted: Vec<f64>,
    window: Option<usize>,
}

impl GradNormHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn windowed(window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::Config("history window must be positive".into()));
        }
        Ok(Self { window: Some(window), ..Self::default() })
    }

    pub fn with_window(window: Option<usize>) -> Result<Self> {
        match window {
            Some(w) => Self::windowed(w),
            None => Ok(Self::new()),
        }
    }

    pub fn from_norms(norms: impl IntoIterator<Item = f64>, window: Option<usize>) -> Result<Self> {
        let mut h = Self::with_window(window)?;
        for n in norms {
            h.push(n)?;
        }
        Ok(h)
    }

    pub fn window(&self) -> Option<usize> {
        self.window
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    /// Norms in insertion order, oldest first.
    pub fn norms(&self) -> impl Iterator<Item = f64> + '_ {
        self.norms.iter().copied()
    }

    pub fn sorted(&self) -> &[f64] {
        &self.sorted
    }

    pub fn push(&mut self, norm: f64) -> Result<()> {
        if !norm.is_finite() || norm < 0.0 {
            return Err(Error::NonFiniteGradient(format!(
                "gradient norm {norm} cannot be recorded"
            )));
        }
        if let Some(w) = self.window {
            if self.norms.len() == w {
                let old = self.norms.pop_front().expect("full window");
                let at = self.sorted.partition_point(|&v| v < old);
                self.sorted.remove(at);
            }
        }
        self.norms.push_back(norm);
        let at = self.sorted.partition_point(|&v| v <= norm);
        self.sorted.insert(at, norm);
        Ok(())
    }

    pub fn mean(&self) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::EmptyHistory);
        }
        Ok(self.norms.iter().sum::<f64>() / self.len() as f64)
    }
}

/// Linear-interpolation percentile of the recorded norms.
///
/// With sorted values `v` and rank `r = p/100 · (n − 1)`, returns
/// `v[⌊r⌋] + frac(r) · (v[⌊r⌋ + 1] − v[⌊r⌋])`.
pub fn percentile(history: &GradNormHistory, p: f64) -> Result<f64> {
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::Config(format!("percentile {p} outside [0, 100]")));
    }
    let v = history.sorted();
    if v.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    if lo + 1 >= v.len() {
        return Ok(v[v.len() - 1]);
    }
    let frac = rank - lo as f64;
    Ok(v[lo] + frac * (v[lo + 1] - v[lo]))
}

/// `(5·mean, 10·mean)` of the recorded norms: the usual hand-tuned range for a
/// static clipping threshold.
pub fn suggest_static_threshold(history: &GradNormHistory) -> Result<(f64, f64)> {
    let mean = history.mean()?;
    Ok((5.0 * mean, 10.0 * mean))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ClipMode {
    AutoClip,
    Static { threshold: f64 },
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClipConfig {
    pub mode: ClipMode,
    /// Percentile in `[0, 100]`.
    pub p: f64,
    pub window: Option<usize>,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self { mode: ClipMode::AutoClip, p: 10.0, window: None }
    }
}

impl ClipConfig {
    pub fn autoclip(p: f64) -> Self {
        Self { mode: ClipMode::AutoClip, p, window: None }
    }

    pub fn fixed(threshold: f64) -> Self {
        Self { mode: ClipMode::Static { threshold }, ..Self::default() }
    }

    pub fn none() -> Self {
        Self { mode: ClipMode::None, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.p) {
            return Err(Error::Config(format!("percentile {} outside [0, 100]", self.p)));
        }
        if self.window == Some(0) {
            return Err(Error::Config("history window must be positive".into()));
        }
        if let ClipMode::Static { threshold } = self.mode {
            if !(threshold > 0.0) || !threshold.is_finite() {
                return Err(Error::Config(format!(
                    "static threshold must be positive, got {threshold}"
                )));
            }
        }
        Ok(())
    }
}

/// One AutoClip iteration: record `‖g‖`, set the threshold to the p-th
/// percentile of the updated history, then clip.
pub fn autoclip_step(
    state: &mut GradNormHistory,
    g: &GradVector,
    config: &ClipConfig,
) -> Result<(ClippedGrad, ClipReport)> {
    if config.mode != ClipMode::AutoClip {
        return Err(Error::Contract("autoclip_step requires AutoClip mode".into()));
    }
    if !g.is_finite() {
        return Err(Error::NonFiniteGradient(format!(
            "gradient norm {} not recorded",
            g.norm()
        )));
    }
    state.push(g.norm())?;
    let threshold = percentile(state, config.p)?;
    apply_threshold(g, threshold)
}

/// Clipping policy state owned by one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Clipper {
    config: ClipConfig,
    history: GradNormHistory,
}

impl Clipper {
    pub fn new(config: ClipConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, history: GradNormHistory::with_window(config.window)? })
    }

    pub fn with_history(config: ClipConfig, history: GradNormHistory) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, history })
    }

    pub fn config(&self) -> &ClipConfig {
        &self.config
    }

    pub fn history(&self) -> &GradNormHistory {
        &self.history
    }

    /// Applies the configured policy. Static and disabled modes still record
    /// the norm so the history is available for inspection.
    pub fn clip(&mut self, g: &GradVector) -> Result<(ClippedGrad, ClipReport)> {
        match self.config.mode {
            ClipMode::AutoClip => autoclip_step(&mut self.history, g, &self.config),
            ClipMode::Static { threshold } => {
                self.history.push(g.norm())?;
                clip_by_norm(g, threshold)
            }
            ClipMode::None => {
                self.history.push(g.norm())?;
                let report = ClipReport {
                    threshold: f64::INFINITY,
                    scale: 1.0,
                    fired: false,
                    pre_clip_norm: g.norm(),
                };
                Ok((ClippedGrad(g.clone()), report))
            }
        }
    }
}
