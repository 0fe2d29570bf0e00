//! Source-separation losses built on the autodiff graph: truncated
//! phase-sensitive mask inference, deep clustering, whitened k-means,
//! their chimera combination, negative SNR, and permutation-invariant wrapping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Graph, Var};
use crate::linalg;
use crate::signal::Spectrogram;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Dc,
    Wkm,
    Mi,
    Chimera,
    Snr,
}

impl LossKind {
    pub const ALL: [LossKind; 5] =
        [LossKind::Dc, LossKind::Wkm, LossKind::Mi, LossKind::Chimera, LossKind::Snr];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Dc => "dc",
            LossKind::Wkm => "wkm",
            LossKind::Mi => "mi",
            LossKind::Chimera => "chimera",
            LossKind::Snr => "snr",
        }
    }

    pub fn needs_mask_head(self) -> bool {
        matches!(self, LossKind::Mi | LossKind::Chimera | LossKind::Snr)
    }

    pub fn needs_embedding_head(self) -> bool {
        matches!(self, LossKind::Dc | LossKind::Wkm | LossKind::Chimera)
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown loss '{s}' (expected dc, wkm, mi, chimera, snr)")))
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Mixing weight between the mask-inference and whitened k-means terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChimeraConfig {
    pub alpha: f64,
}

impl Default for ChimeraConfig {
    fn default() -> Self {
        Self { alpha: 0.75 }
    }
}

/// Per-TF-point weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct TfWeights(Vec<f64>);

impl TfWeights {
    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    /// Weights proportional to the mixture magnitude.
    pub fn magnitude_ratio(mag: &[f64]) -> Result<Self> {
        let total: f64 = mag.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Contract("magnitude weights need non-zero energy".into()));
        }
        Ok(Self(mag.iter().map(|m| m / total).collect()))
    }

    /// Checks non-negativity and normalization.
    pub fn new(w: Vec<f64>) -> Result<Self> {
        let total: f64 = w.iter().sum();
        if w.iter().any(|&x| !(x >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("TF weights must be non-negative and sum to 1 (sum {total})")));
        }
        Ok(Self(w))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// One-hot `N × C` assignment of every TF point to its dominant source.
pub fn ideal_assignments(source_mags: &[Vec<f64>]) -> Result<Tensor> {
    let c = source_mags.len();
    let n = source_mags.first().map_or(0, Vec::len);
    if c == 0 || source_mags.iter().any(|m| m.len() != n) {
        return Err(Error::Shape("source magnitudes must be non-empty and equally sized".into()));
    }
    let mut y = vec![0.0; n * c];
    for i in 0..n {
        let best = (0..c)
            .max_by(|&a, &b| source_mags[a][i].total_cmp(&source_mags[b][i]))
            .expect("c > 0");
        y[i * c + best] = 1.0;
    }
    Tensor::matrix(n, c, y)
}

/// Truncated phase-sensitive target `T₀^{|X|}(|S|·cos(θ_X − θ_S))`.
pub fn psa_target(mix: &Spectrogram, src: &Spectrogram) -> Result<Tensor> {
    if (mix.frames, mix.bins) != (src.frames, src.bins) {
        return Err(Error::Shape("mixture and source spectrograms differ in size".into()));
    }
    let data = (0..mix.len())
        .map(|i| {
            let mix_mag = mix.re[i].hypot(mix.im[i]);
            let src_mag = src.re[i].hypot(src.im[i]);
            // cos(θ_X − θ_S) = Re(X·S̄) / (|X||S|)
            let target = if mix_mag > 0.0 && src_mag > 0.0 {
                (mix.re[i] * src.re[i] + mix.im[i] * src.im[i]) / mix_mag
            } else {
                0.0
            };
            target.max(0.0).min(mix_mag)
        })
        .collect();
    Tensor::matrix(mix.frames, mix.bins, data)
}

/// Mean absolute error between an estimated magnitude and a fixed target.
pub fn loss_mi_target(g: &mut Graph, est_mag: Var, target: &Tensor) -> Result<Var> {
    let est = g.value(est_mag);
    if est.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "estimate {:?} vs target {:?}",
            est.shape(),
            target.shape()
        )));
    }
    let n = target.len() as f64;
    let t = g.constant(target.clone());
    let diff = g.sub(est_mag, t)?;
    let l1 = g.l1_norm(diff);
    Ok(g.scale(l1, 1.0 / n))
}

/// Truncated PSA loss; the estimate inherits the mixture phase, so its phase
/// difference to the source is `θ_X − θ_S`.
pub fn loss_mi(g: &mut Graph, est_mag: Var, mix: &Spectrogram, src: &Spectrogram) -> Result<Var> {
    let target = psa_target(mix, src)?;
    loss_mi_target(g, est_mag, &target)
}

fn row_scaled(t: &Tensor, w: &[f64]) -> Result<Tensor> {
    let (n, c) = t.dims2()?;
    let mut data = t.data().to_vec();
    for (i, row) in data.chunks_mut(c).enumerate() {
        let s = w[i].sqrt();
        row.iter_mut().for_each(|v| *v *= s);
    }
    Tensor::matrix(n, c, data)
}

/// Weighted deep-clustering loss `‖W^½(VVᵀ − YYᵀ)W^½‖²_F`, evaluated as
/// `‖VᵀWV‖² − 2‖VᵀWY‖² + ‖YᵀWY‖²` so no `N × N` matrix is formed.
pub fn loss_dc(g: &mut Graph, v: Var, y: &Tensor, w: &TfWeights) -> Result<Var> {
    let (n, d) = g.value(v).dims2()?;
    let (ny, _) = y.dims2()?;
    if ny != n || w.values().len() != n {
        return Err(Error::Shape(format!("V has {n} rows, Y {ny}, W {}", w.values().len())));
    }
    let total: f64 = w.values().iter().sum();
    if (total - 1.0).abs() > 1e-9 || w.values().iter().any(|&x| x < 0.0) {
        return Err(Error::Contract(format!("TF weights are not normalized (sum {total})")));
    }
    let sqrt_w = Tensor::matrix(n, d, {
        let mut m = Vec::with_capacity(n * d);
        for &wi in w.values() {
            m.extend(std::iter::repeat_n(wi.sqrt(), d));
        }
        m
    })?;
    let sw = g.constant(sqrt_w);
    let vw = g.mul(v, sw)?;
    let yw_t = row_scaled(y, w.values())?;
    let yw = g.constant(yw_t.clone());

    let vw_t = g.transpose(vw)?;
    let vv = g.matmul(vw_t, vw)?;
    let vy = g.matmul(vw_t, yw)?;
    let (_, c) = yw_t.dims2()?;
    let yty = linalg::matmul(c, n, c, &linalg::transpose(n, c, yw_t.data()), yw_t.data());
    let yy_sq: f64 = yty.iter().map(|x| x * x).sum();

    let a = g.sum_squares(vv)?;
    let b = g.sum_squares(vy)?;
    let b2 = g.scale(b, -2.0);
    let ab = g.add(a, b2)?;
    Ok(g.add_scalar(ab, yy_sq))
}

/// Whitened k-means loss `D − tr((VᵀV)⁻¹ VᵀY (YᵀY)⁻¹ YᵀV)`.
pub fn loss_wkm(g: &mut Graph, v: Var, y: &Tensor) -> Result<Var> {
    let (n, d) = g.value(v).dims2()?;
    let (ny, c) = y.dims2()?;
    if ny != n {
        return Err(Error::Shape(format!("V has {n} rows, Y has {ny}")));
    }
    let yty = linalg::matmul(c, n, c, &linalg::transpose(n, c, y.data()), y.data());
    let (yty_inv, _) = linalg::inverse_regularized(c, &yty)?;
    let y_var = g.constant(y.clone());
    let yinv = g.constant(Tensor::matrix(c, c, yty_inv)?);

    let vt = g.transpose(v)?;
    let vtv = g.matmul(vt, v)?;
    let vtv_inv = g.inverse(vtv)?;
    let vty = g.matmul(vt, y_var)?;
    let left = g.matmul(vtv_inv, vty)?;
    let mid = g.matmul(left, yinv)?;
    let ytv = g.transpose(vty)?;
    let prod = g.matmul(mid, ytv)?;
    let tr = g.trace(prod)?;
    let neg = g.scale(tr, -1.0);
    Ok(g.add_scalar(neg, d as f64))
}

pub fn chimera_value(mi: f64, wkm: f64, cfg: &ChimeraConfig) -> f64 {
    cfg.alpha * mi + (1.0 - cfg.alpha) * wkm
}

/// `α·mi + (1 − α)·wkm`.
pub fn loss_chimera(g: &mut Graph, mi: Var, wkm: Var, cfg: &ChimeraConfig) -> Result<Var> {
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(Error::Config(format!("chimera alpha {} outside [0, 1]", cfg.alpha)));
    }
    let a = g.scale(mi, cfg.alpha);
    let b = g.scale(wkm, 1.0 - cfg.alpha);
    g.add(a, b)
}

/// Floor added to the residual energy, relative to the reference energy.
pub const SNR_EPS_REL: f64 = 1e-8;

/// Negative SNR in dB, `−10·log₁₀(‖s‖² / (‖s − ŝ‖² + ε))` with `ε = 1e-8·‖s‖²`.
pub fn loss_snr(g: &mut Graph, est: Var, reference: &Tensor) -> Result<Var> {
    if g.value(est).len() != reference.len() {
        return Err(Error::Shape(format!(
            "estimate has {} samples, reference {}",
            g.value(est).len(),
            reference.len()
        )));
    }
    let ref_energy = reference.sum_sq();
    if ref_energy == 0.0 {
        return Err(Error::Contract("SNR reference is all zeros".into()));
    }
    let s = g.constant(reference.clone().reshape(g.value(est).shape().to_vec())?);
    let diff = g.sub(s, est)?;
    let err = g.sum_squares(diff)?;
    let den = g.add_scalar(err, SNR_EPS_REL * ref_energy);
    let log_den = g.log(den);
    let k = 10.0 / std::f64::consts::LN_10;
    let scaled = g.scale(log_den, k);
    Ok(g.add_scalar(scaled, -k * ref_energy.ln()))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for rest in permutations(n - 1) {
        for pos in 0..=rest.len() {
            let mut p = rest.clone();
            p.insert(pos, n - 1);
            out.push(p);
        }
    }
    out
}

/// Permutation-invariant loss: the minimum, over assignments of estimates to
/// references, of the mean per-source loss.
pub fn pit<R, F>(g: &mut Graph, estimates: &[Var], references: &[R], mut loss_fn: F) -> Result<Var>
where
    F: FnMut(&mut Graph, Var, &R) -> Result<Var>,
{
    if estimates.len() != references.len() || estimates.is_empty() {
        return Err(Error::Contract(format!(
            "{} estimates for {} references",
            estimates.len(),
            references.len()
        )));
    }
    let c = estimates.len();
    let mut best: Option<(f64, Var)> = None;
    for perm in permutations(c) {
        let mut terms = Vec::with_capacity(c);
        for (ref_idx, &est_idx) in perm.iter().enumerate() {
            terms.push(loss_fn(g, estimates[est_idx], &references[ref_idx])?);
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t)?;
        }
        let mean = g.scale(total, 1.0 / c as f64);
        let value = g.scalar_value(mean)?;
        if best.is_none_or(|(b, _)| value < b) {
            best = Some((value, mean));
        }
    }
    Ok(best.expect("at least one permutation").1)
}
