use rayon::prelude::*;

use crate::clipping::{ClipConfig, ClipMode};
use crate::error::{Error, Result};
use crate::losses::LossKind;

use super::config::RunConfig;
use super::results::{PLabel, SweepCell};
use super::train::run_training;

/// Percentiles swept when none are given.
pub const DEFAULT_P_VALUES: [f64; 7] = [0.0, 1.0, 10.0, 25.0, 50.0, 90.0, 100.0];

/// `base` with the clipping setting named by `p`. A static cell reuses the
/// threshold configured in `base`.
pub fn cell_config(base: &RunConfig, p: PLabel, loss: LossKind) -> Result<RunConfig> {
    let clip = match p {
        PLabel::Percentile(p) => ClipConfig { mode: ClipMode::AutoClip, p, ..base.clip },
        PLabel::None => ClipConfig { mode: ClipMode::None, ..base.clip },
        PLabel::Static => match base.clip.mode {
            ClipMode::Static { .. } => base.clip,
            _ => return Err(Error::Config("a static sweep cell needs a static threshold in the base config".into())),
        },
    };
    let cfg = RunConfig { loss, clip, ..base.clone() };
    cfg.validate()?;
    Ok(cfg)
}

pub fn run_cell(cfg: &RunConfig) -> SweepCell {
    let p = PLabel::from(&cfg.clip);
    match run_training(cfg) {
        Ok(out) => SweepCell { p, loss: cfg.loss, row: Some(out.row), error: None },
        Err(e) => SweepCell { p, loss: cfg.loss, row: None, error: Some(e.to_string()) },
    }
}

/// One run per (p, loss), all with the base seed. Cells run in parallel and
/// come back ordered by p, then loss; aborted cells are kept as failures.
pub fn run_sweep(base: &RunConfig, p_values: &[PLabel], losses: &[LossKind]) -> Result<Vec<SweepCell>> {
    if p_values.is_empty() || losses.is_empty() {
        return Err(Error::Config("sweep needs at least one p value and one loss".into()));
    }
    let mut configs = Vec::with_capacity(p_values.len() * losses.len());
    for &p in p_values {
        for &loss in losses {
            configs.push(cell_config(base, p, loss)?);
        }
    }
    Ok(configs.par_iter().map(run_cell).collect())
}
