//! Waveforms, STFT/iSTFT, synthetic two-source mixtures, and SI-SDR.

pub(crate) mod metrics;
mod stft;
mod synth;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use metrics::{si_sdr, SI_SDR_CAP_DB};
pub use stft::{istft, sqrt_hann, stft, Spectrogram, Stft, StftConfig};
pub use synth::{synth_mixture, synth_mixture_with_rng, Mixture, SynthConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Contract("waveform must have at least one sample".into()));
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("waveform sample".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|x| x * x).sum()
    }

    /// Writes 16-bit mono PCM, clipping samples to [-1, 1].
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
        for &x in &self.samples {
            let v = (x.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
            w.write_sample(v).map_err(wav_err)?;
        }
        w.finalize().map_err(wav_err)
    }
}

fn wav_err(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::Parse(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn waveform_validation() {
        assert!(Waveform::new(vec![], 8000).is_err());
        assert!(Waveform::new(vec![f64::NAN], 8000).is_err());
        assert_eq!(Waveform::new(vec![3.0, 4.0], 8000).unwrap().energy(), 25.0);
    }

    #[test]
    fn wav_file_has_pcm_header() {
        let dir = std::env::temp_dir().join(format!("autoclip-wav-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.wav");
        Waveform::new(vec![0.0, 0.5, -2.0], 8000).unwrap().write_wav(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"RIFF");
        assert_eq!(&bytes[8..12], b"WAVE");
        assert_eq!(bytes.len(), 44 + 6);
        std::fs::remove_dir_all(dir).unwrap();
    }
}
