use crate::error::{Error, Result};
use crate::grad::{Graph, Var};
use crate::losses::{loss_chimera, loss_dc, loss_mi_target, loss_snr, loss_wkm, pit, ChimeraConfig, LossKind};
use crate::model::ForwardOutput;
use crate::signal::Stft;
use crate::tensor::Tensor;

use super::data::Example;

fn mask_estimates(g: &mut Graph, masks: &[Var], ex: &Example) -> Result<Vec<Var>> {
    let mag = g.constant(ex.mix_mag.clone());
    masks.iter().map(|&m| g.mul(m, mag)).collect()
}

fn mi_term(g: &mut Graph, masks: &[Var], ex: &Example) -> Result<Var> {
    let est = mask_estimates(g, masks, ex)?;
    pit(g, &est, &ex.psa, |g, e, t: &Tensor| loss_mi_target(g, e, t))
}

fn masks_of(out: &ForwardOutput, b: usize) -> Result<&[Var]> {
    out.masks
        .get(b)
        .map(Vec::as_slice)
        .ok_or_else(|| Error::Contract("loss needs the mask head".into()))
}

fn embedding_of(out: &ForwardOutput, b: usize) -> Result<Var> {
    out.embeddings
        .get(b)
        .copied()
        .ok_or_else(|| Error::Contract("loss needs the embedding head".into()))
}

/// Batch-mean training loss for `kind`, before any loss scaling.
pub fn batch_loss(
    g: &mut Graph,
    kind: LossKind,
    chimera: &ChimeraConfig,
    stft: &Stft,
    out: &ForwardOutput,
    batch: &[Example],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut terms = Vec::with_capacity(batch.len());
    match kind {
        LossKind::Snr => {
            let mut parts = Vec::new();
            for (b, ex) in batch.iter().enumerate() {
                let re = g.constant(Tensor::matrix(ex.frames(), ex.mixture.bins, ex.mixture.re.clone())?);
                let im = g.constant(Tensor::matrix(ex.frames(), ex.mixture.bins, ex.mixture.im.clone())?);
                for &m in masks_of(out, b)? {
                    parts.push((g.mul(m, re)?, g.mul(m, im)?));
                }
            }
            let waves = stft.istft_graph(g, &parts)?;
            let per_item = waves.len() / batch.len();
            for (ex, est) in batch.iter().zip(waves.chunks(per_item)) {
                terms.push(pit(g, est, &ex.references, |g, e, r: &Tensor| loss_snr(g, e, r))?);
            }
        }
        _ => {
            for (b, ex) in batch.iter().enumerate() {
                let t = match kind {
                    LossKind::Mi => mi_term(g, masks_of(out, b)?, ex)?,
                    LossKind::Dc => loss_dc(g, embedding_of(out, b)?, &ex.assignments, &ex.weights)?,
                    LossKind::Wkm => loss_wkm(g, embedding_of(out, b)?, &ex.assignments)?,
                    LossKind::Chimera => {
                        let mi = mi_term(g, masks_of(out, b)?, ex)?;
                        let wkm = loss_wkm(g, embedding_of(out, b)?, &ex.assignments)?;
                        loss_chimera(g, mi, wkm, chimera)?
                    }
                    LossKind::Snr => unreachable!(),
                };
                terms.push(t);
            }
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(g.scale(total, 1.0 / batch.len() as f64))
}
