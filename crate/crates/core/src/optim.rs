//! SGD and Adam. Both consume [`ClippedGrad`], never raw gradients.

use serde::{Deserialize, Serialize};

use crate::clipping::ClippedGrad;
use crate::error::{Error, Result};
use crate::model::Parameters;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::Adam, lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self { kind: OptimizerKind::Sgd, lr, ..Self::default() }
    }

    pub fn adam(lr: f64) -> Self {
        Self { kind: OptimizerKind::Adam, lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.kind == OptimizerKind::Adam {
            for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
                if !(0.0..1.0).contains(&b) {
                    return Err(Error::Config(format!("{name} = {b} outside [0, 1)")));
                }
            }
            if !(self.eps > 0.0) {
                return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
            }
        }
        Ok(())
    }
}

fn check_shapes(params: &Parameters, g: &ClippedGrad) -> Result<()> {
    let gs = g.grad().tensors();
    if gs.len() != params.tensors().len()
        || gs.iter().zip(params.tensors()).any(|(a, b)| a.shape() != b.shape())
    {
        return Err(Error::Shape("gradient does not match parameter layout".into()));
    }
    Ok(())
}

/// `θ ← θ − λ·g`. Leaves `params` untouched when the update is non-finite.
pub fn sgd_step_in_place(params: &mut Parameters, g: &ClippedGrad, config: &OptimizerConfig) -> Result<()> {
    check_shapes(params, g)?;
    let updated: Vec<f64> = params
        .iter()
        .zip(g.grad().iter())
        .map(|(t, d)| t - config.lr * d)
        .collect();
    if updated.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("SGD update".into()));
    }
    params.set_flat(&updated)
}

pub fn sgd_step(params: &Parameters, g: &ClippedGrad, config: &OptimizerConfig) -> Result<Parameters> {
    let mut out = params.clone();
    sgd_step_in_place(&mut out, g, config)?;
    Ok(out)
}

/// First/second moment estimates and the step count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }
}

/// One bias-corrected Adam update. On error neither `params` nor `state` changes.
pub fn adam_step_in_place(
    params: &mut Parameters,
    state: &mut AdamState,
    g: &ClippedGrad,
    config: &OptimizerConfig,
) -> Result<()> {
    check_shapes(params, g)?;
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Shape("Adam state does not match parameter count".into()));
    }
    if !g.grad().is_finite() {
        return Err(Error::NonFiniteGradient("Adam received a non-finite gradient".into()));
    }
    let t = state.t + 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    let n = params.len();
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    let mut theta = Vec::with_capacity(n);
    for (((p, g), m0), v0) in params.iter().zip(g.grad().iter()).zip(&state.m).zip(&state.v) {
        let m1 = b1 * m0 + (1.0 - b1) * g;
        let v1 = b2 * v0 + (1.0 - b2) * g * g;
        let m_hat = m1 / bc1;
        let v_hat = v1 / bc2;
        theta.push(p - config.lr * m_hat / (v_hat.sqrt() + config.eps));
        m.push(m1);
        v.push(v1);
    }
    if theta.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("Adam update".into()));
    }
    params.set_flat(&theta)?;
    state.m = m;
    state.v = v;
    state.t = t;
    Ok(())
}

pub fn adam_step(
    params: &Parameters,
    state: &AdamState,
    g: &ClippedGrad,
    config: &OptimizerConfig,
) -> Result<(Parameters, AdamState)> {
    let (mut p, mut s) = (params.clone(), state.clone());
    adam_step_in_place(&mut p, &mut s, g, config)?;
    Ok((p, s))
}

/// Optimizer state for either algorithm, as owned by a training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerState {
    Sgd,
    Adam(AdamState),
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    state: OptimizerState,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, param_count: usize) -> Result<Self> {
        config.validate()?;
        let state = match config.kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam => OptimizerState::Adam(AdamState::new(param_count)),
        };
        Ok(Self { config, state })
    }

    pub fn with_state(config: OptimizerConfig, state: OptimizerState) -> Result<Self> {
        config.validate()?;
        let consistent = matches!(
            (config.kind, &state),
            (OptimizerKind::Sgd, OptimizerState::Sgd) | (OptimizerKind::Adam, OptimizerState::Adam(_))
        );
        if !consistent {
            return Err(Error::Config("optimizer state does not match its kind".into()));
        }
        Ok(Self { config, state })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn step(&mut self, params: &mut Parameters, g: &ClippedGrad) -> Result<()> {
        match &mut self.state {
            OptimizerState::Sgd => sgd_step_in_place(params, g, &self.config),
            OptimizerState::Adam(s) => adam_step_in_place(params, s, g, &self.config),
        }
    }
}
