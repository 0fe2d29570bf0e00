use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::grad::{finite_diff_grad, max_relative_error, Graph, Var};
use crate::losses::{ChimeraConfig, LossKind};
use crate::model::{forward, init_params_with_rng, ForwardOutput, SeparatorConfig};
use crate::signal::{Stft, StftConfig, Waveform};
use crate::tensor::Tensor;

use super::config::WeightKind;
use super::data::Example;
use super::objective::batch_loss;

pub const LOSS_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-5;
const FRAMES: usize = 8;
const EMBED_DIM: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub loss: LossKind,
    pub seed: u64,
    /// `"loss"` for head outputs fed straight to the loss, `"model"` for the
    /// full separator.
    pub target: &'static str,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "gradcheck {} loss={} seed={} coordinates={} max_rel_error={:.3e} tolerance={:e} {}",
            self.target,
            self.loss,
            self.seed,
            self.coordinates,
            self.max_rel_error,
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

fn tiny_stft() -> Result<Stft> {
    Stft::new(StftConfig { window_length: 16, hop: 4, normalize: false })
}

/// Random two-source examples on a 16-point STFT.
fn tiny_examples(rng: &mut ChaCha8Rng, stft: &Stft, count: usize) -> Result<Vec<Example>> {
    let len = stft.config().samples_for(FRAMES);
    (0..count)
        .map(|_| {
            let s1: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let s2: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mix: Vec<f64> = s1.iter().zip(&s2).map(|(a, b)| a + b + rng.gen_range(-0.05..0.05)).collect();
            let spec = |x: &[f64]| stft.stft(&Waveform::new(x.to_vec(), 8000)?);
            let refs = [stft.crop_reference(&s1, 0, FRAMES), stft.crop_reference(&s2, 0, FRAMES)];
            Example::new(spec(&mix)?, [spec(&s1)?, spec(&s2)?], refs, WeightKind::MagnitudeRatio)
        })
        .collect()
}

fn compare<F>(loss: LossKind, seed: u64, target: &'static str, tolerance: f64, theta: &[Tensor], f: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = theta.iter().map(|t| g.param(t.clone())).collect();
    let l = f(&mut g, &vars)?;
    let analytic = g.backward(l)?;
    let numeric = finite_diff_grad(
        |th| {
            let mut g = Graph::new();
            let vars: Vec<Var> = th.iter().map(|t| g.param(t.clone())).collect();
            let l = f(&mut g, &vars)?;
            g.scalar_value(l)
        },
        theta,
        STEP,
    )?;
    Ok(GradcheckReport {
        loss,
        seed,
        target,
        coordinates: analytic.len(),
        max_rel_error: max_relative_error(&analytic, &numeric),
        tolerance,
    })
}

/// Finite-difference check of one loss with respect to the head logits it
/// consumes, on a tiny random instance.
pub fn gradcheck(loss: LossKind, seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stft = tiny_stft()?;
    let batch = tiny_examples(&mut rng, &stft, 1)?;
    let bins = stft.config().bins();
    let mut logits = |rows: usize, cols: usize| {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect())
    };
    let mut theta = Vec::new();
    if loss.needs_mask_head() {
        theta.push(logits(FRAMES, bins)?);
        theta.push(logits(FRAMES, bins)?);
    }
    if loss.needs_embedding_head() {
        theta.push(logits(FRAMES * bins, EMBED_DIM)?);
    }
    let chimera = ChimeraConfig::default();
    compare(loss, seed, "loss", LOSS_TOLERANCE, &theta, |g, vars| {
        let mut out = ForwardOutput::default();
        let mut rest = vars;
        if loss.needs_mask_head() {
            out.masks.push(vec![g.sigmoid(vars[0]), g.sigmoid(vars[1])]);
            rest = &vars[2..];
        }
        if loss.needs_embedding_head() {
            let s = g.sigmoid(rest[0]);
            out.embeddings.push(g.row_normalize(s)?);
        }
        batch_loss(g, loss, &chimera, &stft, &out, &batch)
    })
}

/// Finite-difference check through a tiny separator and the loss, over every
/// model parameter.
pub fn gradcheck_model(loss: LossKind, seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stft = tiny_stft()?;
    let batch = tiny_examples(&mut rng, &stft, 2)?;
    let cfg = SeparatorConfig {
        layers: 2,
        hidden: 4,
        mask_head: loss.needs_mask_head(),
        embedding_head: loss.needs_embedding_head(),
        embedding_dim: EMBED_DIM,
        bins: stft.config().bins(),
        ..Default::default()
    };
    let params = init_params_with_rng(&cfg, &mut rng)?;
    let inputs: Vec<Tensor> = batch.iter().map(|ex| ex.input.clone()).collect();
    let chimera = ChimeraConfig::default();
    compare(loss, seed, "model", MODEL_TOLERANCE, &params.tensors(), |g, vars| {
        let out = forward(g, &cfg, vars, &inputs)?;
        batch_loss(g, loss, &chimera, &stft, &out, &batch)
    })
}
