use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clipping::{ClipReport, ClippedGrad, Clipper, GradNormHistory};
use crate::dynamics::{local_smoothness, step_size, DynamicsRecord, Recorder};
use crate::error::{Error, Result};
use crate::grad::{GradVector, Graph};
use crate::model::{forward, init_params_with_rng, Parameters, SeparatorConfig};
use crate::optim::{Optimizer, OptimizerState};
use crate::signal::Stft;
use crate::tensor::Tensor;

use super::config::RunConfig;
use super::data::{sample_batch, Dataset, Example};
use super::eval::validation_si_sdr;
use super::objective::batch_loss;
use super::results::{PLabel, ResultRow};

/// Iterations averaged into the reported final training loss.
pub const FINAL_LOSS_WINDOW: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub iteration: usize,
    pub loss: f64,
    pub clip: ClipReport,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub iteration: usize,
    pub params: Parameters,
    pub optimizer: OptimizerState,
    /// Gradient-norm history, oldest first.
    pub history: Vec<f64>,
    pub rng_word_pos: u128,
    pub recorder: Recorder,
    pub fired: usize,
    pub losses: Vec<f64>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub params: Parameters,
    pub row: ResultRow,
    pub dynamics_csv: String,
    pub recorder: Recorder,
    pub losses: Vec<f64>,
}

fn abort(iteration: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) | Error::NonFiniteGradient(_) => {
            Error::Aborted { iteration, reason: e.to_string() }
        }
        other => other,
    }
}

/// One training run: data, model, clipper, optimizer and the run's RNG.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: RunConfig,
    model_cfg: SeparatorConfig,
    stft: Stft,
    train: Dataset,
    val: Dataset,
    params: Parameters,
    optimizer: Optimizer,
    clipper: Clipper,
    rng: ChaCha8Rng,
    iteration: usize,
    recorder: Recorder,
    fired: usize,
    losses: Vec<f64>,
}

impl Trainer {
    /// Draws the data, then the initial parameters, from the run's RNG.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let stft = Stft::new(cfg.data.stft)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let train = Dataset::synthesize(&mut rng, cfg.data.train_mixtures, &cfg.data.synth, &stft)?;
        let val = Dataset::synthesize(&mut rng, cfg.data.val_mixtures, &cfg.data.synth, &stft)?;
        let model_cfg = cfg.model_config();
        let params = init_params_with_rng(&model_cfg, &mut rng)?;
        Ok(Self {
            optimizer: Optimizer::new(cfg.optimizer, params.len())?,
            clipper: Clipper::new(cfg.clip)?,
            recorder: Recorder::new(cfg.record_every),
            cfg,
            model_cfg,
            stft,
            train,
            val,
            params,
            rng,
            iteration: 0,
            fired: 0,
            losses: Vec::new(),
        })
    }

    pub fn resume(ck: Checkpoint) -> Result<Self> {
        let mut t = Self::new(ck.config)?;
        if ck.params.len() != t.params.len() {
            return Err(Error::Shape("checkpoint parameters do not fit the model".into()));
        }
        t.params = ck.params;
        t.optimizer = Optimizer::with_state(t.cfg.optimizer, ck.optimizer)?;
        t.clipper = Clipper::with_history(t.cfg.clip, GradNormHistory::from_norms(ck.history, t.cfg.clip.window)?)?;
        t.rng.set_word_pos(ck.rng_word_pos);
        t.iteration = ck.iteration;
        t.recorder = ck.recorder;
        t.fired = ck.fired;
        t.losses = ck.losses;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            iteration: self.iteration,
            params: self.params.clone(),
            optimizer: self.optimizer.state().clone(),
            history: self.clipper.history().norms().collect(),
            rng_word_pos: self.rng.get_word_pos(),
            recorder: self.recorder.clone(),
            fired: self.fired,
            losses: self.losses.clone(),
        }
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model_config(&self) -> &SeparatorConfig {
        &self.model_cfg
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn clipper(&self) -> &Clipper {
        &self.clipper
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn recorder(&self) -> &Recorder {
        &self.recorder
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn train_set(&self) -> &Dataset {
        &self.train
    }

    pub fn stft(&self) -> &Stft {
        &self.stft
    }

    pub fn next_batch(&mut self) -> Result<Vec<Example>> {
        let d = &self.cfg.data;
        sample_batch(&mut self.rng, &self.train, self.cfg.batch_size, d.crop_frames, &self.stft, d.weights)
    }

    /// Scaled training loss and its gradient at `params`. Read-only.
    pub fn loss_and_grad(&self, params: &Parameters, batch: &[Example]) -> Result<(f64, GradVector)> {
        let mut g = Graph::with_precision(self.cfg.precision);
        let vars = params.register(&mut g);
        let inputs: Vec<Tensor> = batch.iter().map(|ex| ex.input.clone()).collect();
        let out = forward(&mut g, &self.model_cfg, &vars, &inputs)?;
        let loss = batch_loss(&mut g, self.cfg.loss, &self.cfg.chimera, &self.stft, &out, batch)?;
        let loss = g.scale(loss, self.cfg.loss_scale);
        let value = g.scalar_value(loss)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss {value}")));
        }
        Ok((value, g.backward(loss)?))
    }

    pub fn step(&mut self) -> Result<StepReport> {
        self.step_with(|clipper, g| clipper.clip(g))
    }

    /// One iteration with a caller-supplied clipping policy in place of the
    /// configured one.
    pub fn step_with<F>(&mut self, policy: F) -> Result<StepReport>
    where
        F: FnOnce(&mut Clipper, &GradVector) -> Result<(ClippedGrad, ClipReport)>,
    {
        let t = self.iteration + 1;
        let batch = self.next_batch()?;
        let (loss, grad) = self.loss_and_grad(&self.params, &batch).map_err(abort(t))?;
        let (clipped, report) = policy(&mut self.clipper, &grad).map_err(abort(t))?;
        let due = self.recorder.due(t);
        let prev = due.then(|| self.params.to_flat());
        self.optimizer.step(&mut self.params, &clipped).map_err(abort(t))?;
        if !self.params.is_finite() {
            return Err(Error::Aborted { iteration: t, reason: "parameters became non-finite".into() });
        }
        if let Some(prev) = prev {
            let theta = self.params.to_flat();
            let (_, probe) = self.loss_and_grad(&self.params, &batch).map_err(abort(t))?;
            match local_smoothness(&prev, &theta, &grad.to_flat(), &probe.to_flat())? {
                Some(smoothness) => self.recorder.push(DynamicsRecord {
                    iteration: t,
                    loss,
                    grad_norm: report.pre_clip_norm,
                    clip_threshold: report.threshold,
                    fired: report.fired,
                    step_size: step_size(&theta, &prev)?,
                    smoothness,
                })?,
                None => self.recorder.skip(),
            }
        }
        self.iteration = t;
        self.fired += usize::from(report.fired);
        self.losses.push(loss);
        Ok(StepReport { iteration: t, loss, clip: report })
    }

    /// Steps until the configured iteration count.
    pub fn run(&mut self) -> Result<()> {
        while self.iteration < self.cfg.iterations {
            self.step()?;
        }
        Ok(())
    }

    pub fn fire_fraction(&self) -> f64 {
        if self.iteration == 0 {
            0.0
        } else {
            self.fired as f64 / self.iteration as f64
        }
    }

    /// Mean training loss over the last [`FINAL_LOSS_WINDOW`] iterations.
    pub fn final_train_loss(&self) -> f64 {
        let tail = &self.losses[self.losses.len().saturating_sub(FINAL_LOSS_WINDOW)..];
        if tail.is_empty() {
            f64::NAN
        } else {
            tail.iter().sum::<f64>() / tail.len() as f64
        }
    }

    pub fn validation_si_sdr(&self) -> Result<f64> {
        validation_si_sdr(&self.params, &self.model_cfg, self.cfg.precision, &self.stft, &self.val.items)
    }

    /// Evaluates on the held-out set and packages the run's outputs.
    pub fn finish(self) -> Result<RunOutput> {
        let si_sdr_db = if self.cfg.skip_validation { f64::NAN } else { self.validation_si_sdr()? };
        let row = ResultRow {
            p: PLabel::from(&self.cfg.clip),
            loss: self.cfg.loss,
            si_sdr_db,
            final_train_loss: self.final_train_loss(),
            fire_fraction: self.fire_fraction(),
        };
        Ok(RunOutput {
            row,
            dynamics_csv: self.recorder.to_csv(),
            params: self.params,
            recorder: self.recorder,
            losses: self.losses,
        })
    }
}

pub fn run_training(cfg: &RunConfig) -> Result<RunOutput> {
    let mut t = Trainer::new(cfg.clone())?;
    t.run()?;
    t.finish()
}
