use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{ideal_assignments, psa_target, TfWeights};
use crate::signal::{synth_mixture_with_rng, Spectrogram, Stft, SynthConfig, Waveform};
use crate::tensor::Tensor;

use super::config::WeightKind;

/// Added to magnitudes before the log so silent bins stay finite.
pub const LOG_FLOOR: f64 = 1e-6;

/// One synthetic utterance with its precomputed spectrograms.
#[derive(Debug, Clone)]
pub struct Item {
    pub mixture: Spectrogram,
    pub sources: [Spectrogram; 2],
    pub source_waves: [Vec<f64>; 2],
    pub sample_rate: u32,
}

impl Item {
    pub fn frames(&self) -> usize {
        self.mixture.frames
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub items: Vec<Item>,
}

impl Dataset {
    pub fn synthesize(rng: &mut ChaCha8Rng, count: usize, synth: &SynthConfig, stft: &Stft) -> Result<Self> {
        let mut items = Vec::with_capacity(count);
        for _ in 0..count {
            let m = synth_mixture_with_rng(rng, synth)?;
            let [mut s1, mut s2] = m.sources;
            let mut mix = m.mixture;
            // Pad utterances shorter than one window so every item has a frame.
            let min_len = stft.config().window_length;
            for w in [&mut mix, &mut s1, &mut s2] {
                if w.samples.len() < min_len {
                    w.samples.resize(min_len, 0.0);
                }
            }
            items.push(Item {
                mixture: stft.stft(&mix)?,
                sources: [stft.stft(&s1)?, stft.stft(&s2)?],
                sample_rate: s1.sample_rate,
                source_waves: [s1.samples, s2.samples],
            });
        }
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Everything a loss needs about one training example.
#[derive(Debug, Clone)]
pub struct Example {
    /// Log-magnitude network input, `frames × bins`.
    pub input: Tensor,
    pub mixture: Spectrogram,
    pub mix_mag: Tensor,
    pub psa: [Tensor; 2],
    /// `(frames·bins) × 2` one-hot dominant-source matrix.
    pub assignments: Tensor,
    pub weights: TfWeights,
    /// Time-domain targets: the inverse STFT of each cropped source.
    pub references: [Tensor; 2],
}

pub fn log_magnitude(mag: &[f64], frames: usize, bins: usize) -> Result<Tensor> {
    Tensor::matrix(frames, bins, mag.iter().map(|m| (m + LOG_FLOOR).ln()).collect())
}

impl Example {
    pub fn new(
        mixture: Spectrogram,
        sources: [Spectrogram; 2],
        references: [Vec<f64>; 2],
        weights: WeightKind,
    ) -> Result<Self> {
        let (frames, bins) = (mixture.frames, mixture.bins);
        let mag = mixture.magnitude();
        let weights = match weights {
            WeightKind::Uniform => TfWeights::uniform(mag.len()),
            WeightKind::MagnitudeRatio => TfWeights::magnitude_ratio(&mag)?,
        };
        let [r1, r2] = references;
        Ok(Self {
            input: log_magnitude(&mag, frames, bins)?,
            mix_mag: Tensor::matrix(frames, bins, mag)?,
            psa: [psa_target(&mixture, &sources[0])?, psa_target(&mixture, &sources[1])?],
            assignments: ideal_assignments(&[sources[0].magnitude(), sources[1].magnitude()])?,
            weights,
            references: [Tensor::vector(r1), Tensor::vector(r2)],
            mixture,
        })
    }

    /// Frames `start..start + frames` of `item`, zero-padded past its end.
    pub fn crop(item: &Item, start: usize, frames: usize, stft: &Stft, weights: WeightKind) -> Result<Self> {
        let take = frames.min(item.frames().saturating_sub(start));
        let cut = |s: &Spectrogram| -> Result<Spectrogram> { Ok(s.crop(start, take)?.pad_to(frames)) };
        let refs = [
            stft.crop_reference(&item.source_waves[0], start, frames),
            stft.crop_reference(&item.source_waves[1], start, frames),
        ];
        Self::new(cut(&item.mixture)?, [cut(&item.sources[0])?, cut(&item.sources[1])?], refs, weights)
    }

    pub fn frames(&self) -> usize {
        self.mixture.frames
    }
}

/// Draws a batch of random items and crop offsets from `rng`.
pub fn sample_batch(
    rng: &mut ChaCha8Rng,
    data: &Dataset,
    batch_size: usize,
    crop_frames: usize,
    stft: &Stft,
    weights: WeightKind,
) -> Result<Vec<Example>> {
    (0..batch_size)
        .map(|_| {
            let item = &data.items[rng.gen_range(0..data.len())];
            let slack = item.frames().saturating_sub(crop_frames);
            let start = rng.gen_range(0..=slack);
            Example::crop(item, start, crop_frames, stft, weights)
        })
        .collect()
}

/// Waveform of the full-utterance reference for `source`: `istft(stft(s))`.
pub fn full_reference(item: &Item, source: usize, stft: &Stft) -> Result<Waveform> {
    stft.istft(&item.sources[source], item.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::StftConfig;
    use rand::SeedableRng;

    fn small() -> (Dataset, Stft) {
        let stft = Stft::new(StftConfig::default()).unwrap();
        let synth = SynthConfig { duration_s: [0.5, 0.6], ..Default::default() };
        let data = Dataset::synthesize(&mut ChaCha8Rng::seed_from_u64(1), 3, &synth, &stft).unwrap();
        (data, stft)
    }

    #[test]
    fn crops_have_requested_shape() {
        let (data, stft) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = sample_batch(&mut rng, &data, 4, 16, &stft, WeightKind::Uniform).unwrap();
        for ex in &batch {
            assert_eq!(ex.input.shape(), &[16, 129]);
            assert_eq!(ex.assignments.shape(), &[16 * 129, 2]);
            assert_eq!(ex.references[0].len(), stft.config().samples_for(16));
            assert!(ex.input.is_finite());
        }
    }

    #[test]
    fn long_crop_is_zero_padded() {
        let (data, stft) = small();
        let item = &data.items[0];
        let frames = item.frames() + 5;
        let ex = Example::crop(item, 0, frames, &stft, WeightKind::Uniform).unwrap();
        assert_eq!(ex.frames(), frames);
        let tail = &ex.mix_mag.data()[item.frames() * 129..];
        assert!(tail.iter().all(|&m| m == 0.0));
        assert!(ex.input.data()[item.frames() * 129] == LOG_FLOOR.ln());
    }

    #[test]
    fn batches_are_deterministic() {
        let (data, stft) = small();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_batch(&mut rng, &data, 3, 8, &stft, WeightKind::MagnitudeRatio).unwrap()
        };
        let (a, b) = (draw(5), draw(5));
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.input, y.input);
            assert_eq!(x.weights, y.weights);
        }
    }
}
