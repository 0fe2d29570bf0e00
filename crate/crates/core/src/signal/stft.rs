use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Graph, Var};
use crate::linalg;
use crate::signal::Waveform;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StftConfig {
    pub window_length: usize,
    pub hop: usize,
    /// Divide every analysed frame by `window_length`. Changes the data scale
    /// by orders of magnitude; `istft` undoes it.
    pub normalize: bool,
}

impl Default for StftConfig {
    /// 32 ms windows with an 8 ms hop at 8 kHz.
    fn default() -> Self {
        Self { window_length: 256, hop: 64, normalize: false }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.window_length / 2 + 1
    }

    pub fn frames_for(&self, samples: usize) -> usize {
        if samples < self.window_length {
            0
        } else {
            1 + (samples - self.window_length) / self.hop
        }
    }

    pub fn samples_for(&self, frames: usize) -> usize {
        (frames.max(1) - 1) * self.hop + self.window_length
    }
}

/// Complex time-frequency matrix, `frames × bins`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl Spectrogram {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self { frames, bins, re: vec![0.0; frames * bins], im: vec![0.0; frames * bins] }
    }

    pub fn from_polar(frames: usize, bins: usize, mag: &[f64], phase: &[f64]) -> Result<Self> {
        if mag.len() != frames * bins || phase.len() != frames * bins {
            return Err(Error::Shape(format!(
                "polar parts do not fill a {frames}x{bins} spectrogram"
            )));
        }
        let re = mag.iter().zip(phase).map(|(m, p)| m * p.cos()).collect();
        let im = mag.iter().zip(phase).map(|(m, p)| m * p.sin()).collect();
        Ok(Self { frames, bins, re, im })
    }

    pub fn len(&self) -> usize {
        self.frames * self.bins
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.re.iter().zip(&self.im).map(|(r, i)| r.hypot(*i)).collect()
    }

    pub fn phase(&self) -> Vec<f64> {
        self.re.iter().zip(&self.im).map(|(r, i)| i.atan2(*r)).collect()
    }

    /// Frames `start..start + len`.
    pub fn crop(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames {
            return Err(Error::Shape(format!(
                "crop {start}..{} of {} frames",
                start + len,
                self.frames
            )));
        }
        let range = start * self.bins..(start + len) * self.bins;
        Ok(Self {
            frames: len,
            bins: self.bins,
            re: self.re[range.clone()].to_vec(),
            im: self.im[range].to_vec(),
        })
    }

    /// Extends to `frames` rows with zeros.
    pub fn pad_to(&self, frames: usize) -> Self {
        let mut out = self.clone();
        if frames > self.frames {
            out.re.resize(frames * self.bins, 0.0);
            out.im.resize(frames * self.bins, 0.0);
            out.frames = frames;
        }
        out
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if (self.frames, self.bins) != (other.frames, other.bins) {
            return Err(Error::Shape("spectrogram sizes differ".into()));
        }
        Ok(Self {
            frames: self.frames,
            bins: self.bins,
            re: self.re.iter().zip(&other.re).map(|(a, b)| a + b).collect(),
            im: self.im.iter().zip(&other.im).map(|(a, b)| a + b).collect(),
        })
    }
}

/// Precomputed window, DFT bases, and overlap-add gain for one [`StftConfig`].
#[derive(Debug, Clone)]
pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    /// `len × bins`: cos(2πkn/N).
    fwd_cos: Vec<f64>,
    /// `len × bins`: sin(2πkn/N).
    fwd_sin: Vec<f64>,
    /// `bins × len`: real-part synthesis basis, including the 1/N and the
    /// doubling of non-edge bins.
    inv_re: Tensor,
    /// `bins × len`: imaginary-part synthesis basis.
    inv_im: Tensor,
    /// Squared window summed over hop shifts; constant under COLA.
    ola_gain: f64,
}

/// Periodic square-root Hann window.
pub fn sqrt_hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| (0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos()).sqrt())
        .collect()
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        let n = cfg.window_length;
        if n < 2 || cfg.hop == 0 || cfg.hop > n {
            return Err(Error::Config(format!(
                "need 0 < hop <= window_length, got hop {} window {n}",
                cfg.hop
            )));
        }
        let window = sqrt_hann(n);
        // Analysis × synthesis window summed over hop shifts must be constant.
        let sums: Vec<f64> = (0..cfg.hop)
            .map(|i| (i..n).step_by(cfg.hop).map(|j| window[j] * window[j]).sum())
            .collect();
        let gain = sums[0];
        if sums.iter().any(|s| (s - gain).abs() > 1e-10 * gain.abs().max(1.0)) || gain <= 0.0 {
            return Err(Error::Config(format!(
                "sqrt-Hann window of {n} with hop {} is not constant-overlap-add",
                cfg.hop
            )));
        }
        let bins = cfg.bins();
        let mut fwd_cos = vec![0.0; n * bins];
        let mut fwd_sin = vec![0.0; n * bins];
        let mut inv_re = vec![0.0; bins * n];
        let mut inv_im = vec![0.0; bins * n];
        for k in 0..bins {
            let edge = k == 0 || (n.is_multiple_of(2) && k == n / 2);
            let c = if edge { 1.0 } else { 2.0 } / n as f64;
            for t in 0..n {
                // Reduce the phase index first so large k·t stay accurate.
                let ang = 2.0 * PI * ((k * t) % n) as f64 / n as f64;
                let (s, co) = ang.sin_cos();
                fwd_cos[t * bins + k] = co;
                fwd_sin[t * bins + k] = s;
                inv_re[k * n + t] = c * co;
                inv_im[k * n + t] = -c * s;
            }
        }
        Ok(Self {
            cfg,
            window,
            fwd_cos,
            fwd_sin,
            inv_re: Tensor::matrix(bins, n, inv_re)?,
            inv_im: Tensor::matrix(bins, n, inv_im)?,
            ola_gain: gain,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    fn output_scale(&self) -> f64 {
        let denorm = if self.cfg.normalize { self.cfg.window_length as f64 } else { 1.0 };
        denorm / self.ola_gain
    }

    pub fn stft(&self, w: &Waveform) -> Result<Spectrogram> {
        let n = self.cfg.window_length;
        let frames = self.cfg.frames_for(w.samples.len());
        if frames == 0 {
            return Err(Error::Contract(format!(
                "waveform of {} samples is shorter than one {n}-sample window",
                w.samples.len()
            )));
        }
        let scale = if self.cfg.normalize { 1.0 / n as f64 } else { 1.0 };
        let mut framed = Vec::with_capacity(frames * n);
        for f in 0..frames {
            let seg = &w.samples[f * self.cfg.hop..f * self.cfg.hop + n];
            framed.extend(seg.iter().zip(&self.window).map(|(x, h)| x * h * scale));
        }
        let bins = self.cfg.bins();
        let re = linalg::matmul(frames, n, bins, &framed, &self.fwd_cos);
        let mut im = linalg::matmul(frames, n, bins, &framed, &self.fwd_sin);
        im.iter_mut().for_each(|v| *v = -*v);
        Ok(Spectrogram { frames, bins, re, im })
    }

    pub fn istft(&self, s: &Spectrogram, sample_rate: u32) -> Result<Waveform> {
        let n = self.cfg.window_length;
        if s.bins != self.cfg.bins() || s.frames == 0 {
            return Err(Error::Shape(format!(
                "spectrogram {}x{} does not fit a {n}-sample STFT",
                s.frames, s.bins
            )));
        }
        let mut frames = linalg::matmul(s.frames, s.bins, n, &s.re, self.inv_re.data());
        linalg::gemm(false, false, s.frames, n, s.bins, &s.im, self.inv_im.data(), 1.0, &mut frames);
        let mut out = vec![0.0; self.cfg.samples_for(s.frames)];
        let scale = self.output_scale();
        for (f, row) in frames.chunks(n).enumerate() {
            let dst = &mut out[f * self.cfg.hop..f * self.cfg.hop + n];
            for ((o, v), h) in dst.iter_mut().zip(row).zip(&self.window) {
                *o += v * h;
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        Waveform::new(out, sample_rate)
    }

    /// `istft(stft(x)[start..start + frames])` without the transforms: the
    /// samples under the crop weighted by their squared-window coverage.
    /// Samples past the end of `x` count as zero.
    pub fn crop_reference(&self, x: &[f64], start: usize, frames: usize) -> Vec<f64> {
        let hop = self.cfg.hop;
        let offset = start * hop;
        let mut out = vec![0.0; self.cfg.samples_for(frames)];
        for f in 0..frames {
            for (t, h) in self.window.iter().enumerate() {
                out[f * hop + t] += h * h;
            }
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o *= x.get(offset + i).copied().unwrap_or(0.0) / self.ola_gain;
        }
        out
    }

    /// Differentiable inverse STFT of several `frames × bins` real/imaginary
    /// pairs. All pairs go through one basis multiplication; each returned
    /// node is a waveform vector.
    pub fn istft_graph(&self, g: &mut Graph, parts: &[(Var, Var)]) -> Result<Vec<Var>> {
        if parts.is_empty() {
            return Ok(Vec::new());
        }
        let n = self.cfg.window_length;
        let mut row_counts = Vec::with_capacity(parts.len());
        for &(re, im) in parts {
            let (fr, b) = g.value(re).dims2()?;
            if b != self.cfg.bins() || g.value(im).dims2()? != (fr, b) {
                return Err(Error::Shape(format!("istft input {fr}x{b} does not fit the STFT")));
            }
            row_counts.push(fr);
        }
        let res: Vec<Var> = parts.iter().map(|p| p.0).collect();
        let ims: Vec<Var> = parts.iter().map(|p| p.1).collect();
        let re_all = g.concat_rows(&res)?;
        let im_all = g.concat_rows(&ims)?;
        let inv_re = g.constant(self.inv_re.clone());
        let inv_im = g.constant(self.inv_im.clone());
        let a = g.matmul(re_all, inv_re)?;
        let b = g.matmul(im_all, inv_im)?;
        let frames = g.add(a, b)?;
        let total_rows: usize = row_counts.iter().sum();
        let scale = self.output_scale();
        let mut tiled = Vec::with_capacity(total_rows * n);
        for _ in 0..total_rows {
            tiled.extend(self.window.iter().map(|h| h * scale));
        }
        let win = g.constant(Tensor::matrix(total_rows, n, tiled)?);
        let windowed = g.mul(frames, win)?;
        let mut out = Vec::with_capacity(parts.len());
        let mut start = 0;
        for fr in row_counts {
            let rows = g.slice_rows(windowed, start, start + fr)?;
            out.push(g.overlap_add(rows, self.cfg.hop)?);
            start += fr;
        }
        Ok(out)
    }
}

pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<Spectrogram> {
    Stft::new(*cfg)?.stft(w)
}

pub fn istft(s: &Spectrogram, cfg: &StftConfig, sample_rate: u32) -> Result<Waveform> {
    Stft::new(*cfg)?.istft(s, sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_wave(rng: &mut ChaCha8Rng, len: usize) -> Waveform {
        Waveform::new((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(), 8000).unwrap()
    }

    #[test]
    fn zero_and_constant_inputs() {
        let plan = Stft::new(StftConfig::default()).unwrap();
        let z = plan.stft(&Waveform::new(vec![0.0; 1000], 8000).unwrap()).unwrap();
        assert!(z.re.iter().chain(&z.im).all(|&v| v == 0.0));
        assert_eq!(z.bins, 129);

        let c = plan.stft(&Waveform::new(vec![0.5; 1000], 8000).unwrap()).unwrap();
        let mag = c.magnitude();
        for f in 0..c.frames {
            let row = &mag[f * c.bins..(f + 1) * c.bins];
            let peak = (0..c.bins).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(peak, 0);
        }
    }

    #[test]
    fn crop_reference_matches_istft_of_cropped_stft() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for normalize in [false, true] {
            let plan = Stft::new(StftConfig { normalize, ..Default::default() }).unwrap();
            let w = random_wave(&mut rng, 3000);
            let spec = plan.stft(&w).unwrap();
            for (start, len) in [(0, 5), (7, 12), (spec.frames - 3, 3)] {
                let want = plan.istft(&spec.crop(start, len).unwrap(), 8000).unwrap();
                let got = plan.crop_reference(&w.samples, start, len);
                assert_eq!(got.len(), want.len());
                for (a, b) in got.iter().zip(&want.samples) {
                    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn short_waveform_is_rejected() {
        let plan = Stft::new(StftConfig::default()).unwrap();
        assert!(plan.stft(&Waveform::new(vec![0.0; 100], 8000).unwrap()).is_err());
    }

    #[test]
    fn non_cola_hop_is_rejected() {
        assert!(Stft::new(StftConfig { window_length: 256, hop: 100, normalize: false }).is_err());
        assert!(Stft::new(StftConfig { window_length: 256, hop: 0, normalize: false }).is_err());
    }

    #[test]
    fn round_trip_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for normalize in [false, true] {
            let plan = Stft::new(StftConfig { normalize, ..StftConfig::default() }).unwrap();
            let w = random_wave(&mut rng, 8000);
            let back = plan.istft(&plan.stft(&w).unwrap(), 8000).unwrap();
            let (lo, hi) = (256, back.samples.len() - 256);
            let err: f64 = (lo..hi).map(|i| (back.samples[i] - w.samples[i]).powi(2)).sum();
            let energy: f64 = (lo..hi).map(|i| w.samples[i].powi(2)).sum();
            assert!((err / energy).sqrt() < 1e-10);
        }
    }

    #[test]
    fn istft_of_zero_is_zero() {
        let plan = Stft::new(StftConfig::default()).unwrap();
        let w = plan.istft(&Spectrogram::zeros(5, 129), 8000).unwrap();
        assert!(w.samples.iter().all(|&v| v == 0.0));
        assert!(plan.istft(&Spectrogram::zeros(5, 100), 8000).is_err());
    }

    #[test]
    fn single_dc_bin_gives_scaled_window() {
        let cfg = StftConfig::default();
        let plan = Stft::new(cfg).unwrap();
        let mut s = Spectrogram::zeros(1, cfg.bins());
        s.re[0] = 1.0;
        let w = plan.istft(&s, 8000).unwrap();
        // Direct inverse DFT of a unit DC bin is 1/N at every sample.
        let gain: f64 = (0..cfg.window_length)
            .step_by(cfg.hop)
            .map(|j| plan.window()[j].powi(2))
            .sum();
        for (n, v) in w.samples.iter().enumerate() {
            let want = plan.window()[n] / cfg.window_length as f64 / gain;
            assert!((v - want).abs() < 1e-15);
        }
    }

    #[test]
    fn stft_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let plan = Stft::new(StftConfig::default()).unwrap();
        let a = random_wave(&mut rng, 2000);
        let b = random_wave(&mut rng, 2000);
        let sum = Waveform::new(
            a.samples.iter().zip(&b.samples).map(|(x, y)| x + y).collect(),
            8000,
        )
        .unwrap();
        let lhs = plan.stft(&sum).unwrap();
        let rhs = plan.stft(&a).unwrap().add(&plan.stft(&b).unwrap()).unwrap();
        for (x, y) in lhs.re.iter().chain(&lhs.im).zip(rhs.re.iter().chain(&rhs.im)) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn graph_istft_matches_numeric_istft() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let plan = Stft::new(StftConfig::default()).unwrap();
        let spec = plan.stft(&random_wave(&mut rng, 1200)).unwrap();
        let direct = plan.istft(&spec, 8000).unwrap();
        let mut g = Graph::new();
        let re = g.constant(Tensor::matrix(spec.frames, spec.bins, spec.re.clone()).unwrap());
        let im = g.constant(Tensor::matrix(spec.frames, spec.bins, spec.im.clone()).unwrap());
        let out = plan.istft_graph(&mut g, &[(re, im), (re, im)]).unwrap();
        for v in out {
            for (x, y) in g.value(v).data().iter().zip(&direct.samples) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
