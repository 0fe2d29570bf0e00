//! Recurrent mask/embedding separator over log-magnitude spectrograms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    /// Single forget/update gate: `f = σ(Wx + Uh)`, `c = tanh(W'x + U'(f⊙h))`,
    /// `h ← h + f⊙(c − h)`.
    Gated,
    /// `h ← tanh(Wx + Uh)`.
    Elman,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeparatorConfig {
    pub layers: usize,
    pub hidden: usize,
    pub mask_head: bool,
    pub embedding_head: bool,
    pub embedding_dim: usize,
    pub sources: usize,
    pub bidirectional: bool,
    pub cell: CellKind,
    /// Frequency bins of the input spectrogram.
    pub bins: usize,
}

impl Default for SeparatorConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 32,
            mask_head: true,
            embedding_head: false,
            embedding_dim: 8,
            sources: 2,
            bidirectional: false,
            cell: CellKind::Gated,
            bins: 129,
        }
    }
}

impl SeparatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.bins == 0 {
            return Err(Error::Config("layers, hidden and bins must be positive".into()));
        }
        if !self.mask_head && !self.embedding_head {
            return Err(Error::Config("at least one output head is required".into()));
        }
        if self.sources < 1 || (self.embedding_head && self.embedding_dim == 0) {
            return Err(Error::Config("invalid source count or embedding size".into()));
        }
        Ok(())
    }

    fn directions(&self) -> usize {
        if self.bidirectional {
            2
        } else {
            1
        }
    }

    /// Width of the recurrent stack's output.
    pub fn output_width(&self) -> usize {
        self.hidden * self.directions()
    }

    /// Shapes in registration order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let h = self.hidden;
        let mut out = Vec::new();
        for l in 0..self.layers {
            let input = if l == 0 { self.bins } else { self.output_width() };
            for d in 0..self.directions() {
                let p = format!("rnn{l}.{}", if d == 0 { "fwd" } else { "bwd" });
                match self.cell {
                    CellKind::Gated => {
                        out.push((format!("{p}.w_gate"), vec![input, h]));
                        out.push((format!("{p}.w_cand"), vec![input, h]));
                        out.push((format!("{p}.u_gate"), vec![h, h]));
                        out.push((format!("{p}.u_cand"), vec![h, h]));
                        out.push((format!("{p}.b_gate"), vec![h]));
                        out.push((format!("{p}.b_cand"), vec![h]));
                    }
                    CellKind::Elman => {
                        out.push((format!("{p}.w"), vec![input, h]));
                        out.push((format!("{p}.u"), vec![h, h]));
                        out.push((format!("{p}.b"), vec![h]));
                    }
                }
            }
        }
        let w = self.output_width();
        if self.mask_head {
            out.push(("mask.w".into(), vec![w, self.sources * self.bins]));
            out.push(("mask.b".into(), vec![self.sources * self.bins]));
        }
        if self.embedding_head {
            out.push(("embed.w".into(), vec![w, self.bins * self.embedding_dim]));
            out.push(("embed.b".into(), vec![self.bins * self.embedding_dim]));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Named parameter tensors with a flattened view for optimizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    entries: Vec<NamedTensor>,
}

impl Parameters {
    pub fn from_tensors(entries: Vec<(String, Tensor)>) -> Self {
        Self {
            entries: entries
                .into_iter()
                .map(|(name, tensor)| NamedTensor { name, tensor })
                .collect(),
        }
    }

    pub fn entries(&self) -> &[NamedTensor] {
        &self.entries
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.tensor.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    /// Total number of scalars.
    pub fn len(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().flat_map(|e| e.tensor.data().iter().copied())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::Shape(format!(
                "flat vector has {} entries, parameters have {}",
                flat.len(),
                self.len()
            )));
        }
        let mut offset = 0;
        for e in &mut self.entries {
            let n = e.tensor.len();
            e.tensor.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.is_finite())
    }

    /// Registers every tensor as a graph parameter, in order.
    pub fn register(&self, g: &mut Graph) -> Vec<Var> {
        self.entries.iter().map(|e| g.param(e.tensor.clone())).collect()
    }

    pub fn with_tensors(&self, tensors: &[Tensor]) -> Result<Self> {
        if tensors.len() != self.entries.len() {
            return Err(Error::Shape("tensor count does not match parameters".into()));
        }
        let mut out = self.clone();
        for (e, t) in out.entries.iter_mut().zip(tensors) {
            if e.tensor.shape() != t.shape() {
                return Err(Error::Shape(format!("{}: shape mismatch", e.name)));
            }
            e.tensor = t.clone();
        }
        Ok(out)
    }
}

pub fn init_params_with_rng(cfg: &SeparatorConfig, rng: &mut ChaCha8Rng) -> Result<Parameters> {
    cfg.validate()?;
    let entries = cfg
        .layout()
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if shape.len() == 1 {
                vec![0.0; n]
            } else {
                let bound = 1.0 / (shape[0] as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            Tensor::new(shape, data).map(|t| (name, t))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Parameters::from_tensors(entries))
}

/// Uniform `±1/√fan_in` weights, zero biases; bit-identical for equal seeds.
pub fn init_params(cfg: &SeparatorConfig, seed: u64) -> Result<Parameters> {
    init_params_with_rng(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Head outputs for each batch item.
#[derive(Debug, Clone, Default)]
pub struct ForwardOutput {
    /// `masks[item][source]`: `frames × bins`, entries in (0, 1).
    pub masks: Vec<Vec<Var>>,
    /// `embeddings[item]`: `(frames·bins) × D`, unit-norm rows.
    pub embeddings: Vec<Var>,
}

fn check_inputs(cfg: &SeparatorConfig, inputs: &[Tensor]) -> Result<usize> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Contract("forward needs at least one input".into()))?;
    let (frames, bins) = first.dims2()?;
    for t in inputs {
        if t.dims2()? != (frames, cfg.bins) || bins != cfg.bins {
            return Err(Error::Shape(format!(
                "inputs must all be {frames}x{}, got {:?}",
                cfg.bins,
                t.shape()
            )));
        }
        if !t.is_finite() {
            return Err(Error::NonFinite("model input".into()));
        }
    }
    if frames == 0 {
        return Err(Error::Shape("input has no frames".into()));
    }
    Ok(frames)
}

fn recurrent_direction(
    g: &mut Graph,
    cfg: &SeparatorConfig,
    p: &[Var],
    input: Var,
    frames: usize,
    batch: usize,
    reverse: bool,
) -> Result<Var> {
    let h = cfg.hidden;
    let mut state = g.constant(Tensor::zeros(&[batch, h]));
    let mut outs = vec![None; frames];
    let order: Vec<usize> = if reverse { (0..frames).rev().collect() } else { (0..frames).collect() };
    match cfg.cell {
        CellKind::Gated => {
            let (w_gate, w_cand, u_gate, u_cand, b_gate, b_cand) = (p[0], p[1], p[2], p[3], p[4], p[5]);
            let xg = g.matmul(input, w_gate)?;
            let xg = g.add_row_broadcast(xg, b_gate)?;
            let xc = g.matmul(input, w_cand)?;
            let xc = g.add_row_broadcast(xc, b_cand)?;
            for t in order {
                let xg_t = g.slice_rows(xg, t * batch, (t + 1) * batch)?;
                let xc_t = g.slice_rows(xc, t * batch, (t + 1) * batch)?;
                let hu = g.matmul(state, u_gate)?;
                let pre = g.add(xg_t, hu)?;
                let gate = g.sigmoid(pre);
                let gated = g.mul(gate, state)?;
                let cu = g.matmul(gated, u_cand)?;
                let pre_c = g.add(xc_t, cu)?;
                let cand = g.tanh(pre_c);
                let delta = g.sub(cand, state)?;
                let step = g.mul(gate, delta)?;
                state = g.add(state, step)?;
                outs[t] = Some(state);
            }
        }
        CellKind::Elman => {
            let (w, u, b) = (p[0], p[1], p[2]);
            let xw = g.matmul(input, w)?;
            let xw = g.add_row_broadcast(xw, b)?;
            for t in order {
                let x_t = g.slice_rows(xw, t * batch, (t + 1) * batch)?;
                let hu = g.matmul(state, u)?;
                let pre = g.add(x_t, hu)?;
                state = g.tanh(pre);
                outs[t] = Some(state);
            }
        }
    }
    let outs: Vec<Var> = outs.into_iter().map(|o| o.expect("every frame visited")).collect();
    g.concat_rows(&outs)
}

/// Runs the separator on a batch of equally sized `frames × bins` inputs.
/// `params` are the graph handles from [`Parameters::register`].
pub fn forward(
    g: &mut Graph,
    cfg: &SeparatorConfig,
    params: &[Var],
    inputs: &[Tensor],
) -> Result<ForwardOutput> {
    cfg.validate()?;
    let layout = cfg.layout();
    if params.len() != layout.len() {
        return Err(Error::Shape(format!(
            "model expects {} parameter tensors, got {}",
            layout.len(),
            params.len()
        )));
    }
    let frames = check_inputs(cfg, inputs)?;
    let batch = inputs.len();

    // Time-major stacking: row t·B + b holds frame t of item b.
    let mut stacked = Vec::with_capacity(frames * batch * cfg.bins);
    for t in 0..frames {
        for x in inputs {
            stacked.extend_from_slice(&x.data()[t * cfg.bins..(t + 1) * cfg.bins]);
        }
    }
    let mut layer_in = g.constant(Tensor::matrix(frames * batch, cfg.bins, stacked)?);

    let per_dir = match cfg.cell {
        CellKind::Gated => 6,
        CellKind::Elman => 3,
    };
    let mut cursor = 0;
    for _ in 0..cfg.layers {
        let mut dirs = Vec::with_capacity(cfg.directions());
        for d in 0..cfg.directions() {
            let p = &params[cursor..cursor + per_dir];
            dirs.push(recurrent_direction(g, cfg, p, layer_in, frames, batch, d == 1)?);
            cursor += per_dir;
        }
        layer_in = if dirs.len() == 1 { dirs[0] } else { g.concat_cols(&dirs)? };
    }

    let item_rows = |b: usize| -> Vec<usize> { (0..frames).map(|t| t * batch + b).collect() };
    let mut out = ForwardOutput::default();
    if cfg.mask_head {
        let (w, bias) = (params[cursor], params[cursor + 1]);
        cursor += 2;
        let z = g.matmul(layer_in, w)?;
        let z = g.add_row_broadcast(z, bias)?;
        let all = g.sigmoid(z);
        for b in 0..batch {
            let rows = if batch == 1 { all } else { g.select_rows(all, &item_rows(b))? };
            let per_source = (0..cfg.sources)
                .map(|c| g.slice_cols(rows, c * cfg.bins, (c + 1) * cfg.bins))
                .collect::<Result<Vec<_>>>()?;
            out.masks.push(per_source);
        }
    }
    if cfg.embedding_head {
        let (w, bias) = (params[cursor], params[cursor + 1]);
        let z = g.matmul(layer_in, w)?;
        let z = g.add_row_broadcast(z, bias)?;
        let all = g.sigmoid(z);
        for b in 0..batch {
            let rows = if batch == 1 { all } else { g.select_rows(all, &item_rows(b))? };
            let v = g.reshape(rows, &[frames * cfg.bins, cfg.embedding_dim])?;
            out.embeddings.push(g.row_normalize(v)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(cell: CellKind, bidirectional: bool) -> SeparatorConfig {
        SeparatorConfig {
            layers: 2,
            hidden: 4,
            mask_head: true,
            embedding_head: true,
            embedding_dim: 3,
            bins: 5,
            bidirectional,
            cell,
            ..Default::default()
        }
    }

    fn random_inputs(seed: u64, batch: usize, frames: usize, bins: usize) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..batch)
            .map(|_| {
                let d = (0..frames * bins).map(|_| rng.gen_range(-2.0..2.0)).collect();
                Tensor::matrix(frames, bins, d).unwrap()
            })
            .collect()
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = SeparatorConfig::default();
        assert_eq!(init_params(&cfg, 7).unwrap(), init_params(&cfg, 7).unwrap());
        assert_ne!(init_params(&cfg, 7).unwrap(), init_params(&cfg, 8).unwrap());
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let cfg = SeparatorConfig {
            layers: 1,
            hidden: 16,
            bins: 129,
            mask_head: true,
            embedding_head: false,
            sources: 2,
            ..Default::default()
        };
        // Gated cell: two input projections, two recurrent matrices, two biases.
        let (h, bins, c) = (16, 129, 2);
        let recurrent = 2 * bins * h + 2 * h * h + 2 * h;
        let head = h * c * bins + c * bins;
        assert_eq!(recurrent + head, 9058);
        assert_eq!(init_params(&cfg, 0).unwrap().len(), 9058);
    }

    #[test]
    fn output_shapes_and_ranges() {
        for (cell, bi) in [(CellKind::Gated, false), (CellKind::Elman, true)] {
            let cfg = tiny(cell, bi);
            let params = init_params(&cfg, 1).unwrap();
            let mut g = Graph::new();
            let vars = params.register(&mut g);
            let out = forward(&mut g, &cfg, &vars, &random_inputs(2, 3, 6, 5)).unwrap();
            assert_eq!(out.masks.len(), 3);
            assert_eq!(out.embeddings.len(), 3);
            for m in out.masks.iter().flatten() {
                assert_eq!(g.value(*m).shape(), &[6, 5]);
                assert!(g.value(*m).data().iter().all(|&x| x > 0.0 && x < 1.0));
            }
            for e in &out.embeddings {
                let v = g.value(*e);
                assert_eq!(v.shape(), &[30, 3]);
                for row in v.data().chunks(3) {
                    let n: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                    assert!((n - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn batch_items_are_independent() {
        let cfg = tiny(CellKind::Gated, false);
        let params = init_params(&cfg, 3).unwrap();
        let inputs = random_inputs(4, 2, 5, 5);
        let run = |xs: &[Tensor]| {
            let mut g = Graph::new();
            let vars = params.register(&mut g);
            let out = forward(&mut g, &cfg, &vars, xs).unwrap();
            g.value(out.masks[0][1]).clone()
        };
        let solo = run(&inputs[..1]);
        let batched = run(&inputs);
        for (a, b) in solo.data().iter().zip(batched.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let cfg = tiny(CellKind::Gated, false);
        let params = init_params(&cfg, 0).unwrap();
        let mut g = Graph::new();
        let vars = params.register(&mut g);
        assert!(forward(&mut g, &cfg, &vars, &[]).is_err());
        let bad = Tensor::matrix(2, 4, vec![0.0; 8]).unwrap();
        assert!(forward(&mut g, &cfg, &vars, &[bad]).is_err());
        let nan = Tensor::matrix(1, 5, vec![f64::NAN; 5]).unwrap();
        assert!(forward(&mut g, &cfg, &vars, &[nan]).is_err());
    }

    #[test]
    fn config_requires_a_head() {
        let cfg = SeparatorConfig { mask_head: false, embedding_head: false, ..Default::default() };
        assert!(init_params(&cfg, 0).is_err());
    }
}
