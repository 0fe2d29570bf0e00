use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::Waveform;

/// Parameters for harmonic-tone "speakers" with disjoint pitch ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub sample_rate: u32,
    /// Utterance length drawn uniformly from `[min, max]` seconds.
    pub duration_s: [f64; 2],
    /// Fundamental-frequency range per source, Hz. Must not overlap.
    pub f0_ranges: [[f64; 2]; 2],
    pub harmonics: [usize; 2],
    /// Amplitude-modulation rate range, Hz.
    pub am_rate_hz: [f64; 2],
    /// Per-source level jitter, dB.
    pub gain_db: [f64; 2],
    /// RMS of a source before level jitter.
    pub amplitude: f64,
    /// SNR of additive white noise against the clean mixture; `None` disables it.
    pub noise_snr_db: Option<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            duration_s: [0.5, 1.0],
            f0_ranges: [[100.0, 150.0], [220.0, 330.0]],
            harmonics: [8, 6],
            am_rate_hz: [2.0, 6.0],
            gain_db: [-6.0, 6.0],
            amplitude: 0.05,
            noise_snr_db: Some(30.0),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let [a, b] = self.f0_ranges;
        for r in [a, b] {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return Err(Error::Config(format!("invalid fundamental range {r:?}")));
            }
        }
        if a[0] <= b[1] && b[0] <= a[1] {
            return Err(Error::Config(format!(
                "fundamental ranges {a:?} and {b:?} overlap; sources would not be separable"
            )));
        }
        if !(self.duration_s[0] > 0.0 && self.duration_s[0] <= self.duration_s[1]) {
            return Err(Error::Config(format!("invalid duration range {:?}", self.duration_s)));
        }
        if self.sample_rate == 0 || self.harmonics.contains(&0) {
            return Err(Error::Config("sample rate and harmonic counts must be positive".into()));
        }
        if !(self.am_rate_hz[0] >= 0.0 && self.am_rate_hz[0] <= self.am_rate_hz[1]) {
            return Err(Error::Config(format!("invalid AM range {:?}", self.am_rate_hz)));
        }
        if self.gain_db[0] > self.gain_db[1] || !(self.amplitude > 0.0) {
            return Err(Error::Config("invalid level settings".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub mixture: Waveform,
    pub sources: [Waveform; 2],
    /// All zeros when noise is disabled.
    pub noise: Waveform,
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn harmonic_source(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    which: usize,
    len: usize,
) -> Vec<f64> {
    let sr = cfg.sample_rate as f64;
    let f0 = uniform(rng, cfg.f0_ranges[which]);
    let partials: Vec<(f64, f64, f64)> = (1..=cfg.harmonics[which])
        .map(|k| {
            let amp = rng.gen_range(0.5..1.0) / k as f64;
            let phase = rng.gen_range(0.0..2.0 * PI);
            (k as f64 * f0, amp, phase)
        })
        .filter(|(f, _, _)| *f < sr / 2.0)
        .collect();
    let am_rate = uniform(rng, cfg.am_rate_hz);
    let am_phase = rng.gen_range(0.0..2.0 * PI);
    let mut out: Vec<f64> = (0..len)
        .map(|i| {
            let t = i as f64 / sr;
            let env = 0.5 * (1.0 + (2.0 * PI * am_rate * t + am_phase).sin());
            let tone: f64 = partials
                .iter()
                .map(|(f, a, p)| a * (2.0 * PI * f * t + p).sin())
                .sum();
            env * tone
        })
        .collect();
    let rms = (out.iter().map(|x| x * x).sum::<f64>() / len as f64).sqrt();
    let gain = cfg.amplitude * 10f64.powf(uniform(rng, cfg.gain_db) / 20.0);
    if rms > 0.0 {
        out.iter_mut().for_each(|x| *x *= gain / rms);
    }
    out
}

/// Draws one mixture from `rng`. `mixture[i] = s1[i] + s2[i] + noise[i]` exactly.
pub fn synth_mixture_with_rng(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Result<Mixture> {
    cfg.validate()?;
    let seconds = uniform(rng, cfg.duration_s);
    let len = ((seconds * cfg.sample_rate as f64).round() as usize).max(1);
    let s1 = harmonic_source(rng, cfg, 0, len);
    let s2 = harmonic_source(rng, cfg, 1, len);
    let noise: Vec<f64> = match cfg.noise_snr_db {
        Some(snr) => {
            let clean_power =
                s1.iter().zip(&s2).map(|(a, b)| (a + b) * (a + b)).sum::<f64>() / len as f64;
            let sigma = (clean_power / 10f64.powf(snr / 10.0)).sqrt();
            (0..len)
                .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
                .collect()
        }
        None => vec![0.0; len],
    };
    let mix: Vec<f64> = (0..len).map(|i| s1[i] + s2[i] + noise[i]).collect();
    let sr = cfg.sample_rate;
    Ok(Mixture {
        mixture: Waveform::new(mix, sr)?,
        sources: [Waveform::new(s1, sr)?, Waveform::new(s2, sr)?],
        noise: Waveform::new(noise, sr)?,
    })
}

pub fn synth_mixture(seed: u64, cfg: &SynthConfig) -> Result<Mixture> {
    synth_mixture_with_rng(&mut ChaCha8Rng::seed_from_u64(seed), cfg)
}
