use crate::error::{Error, Result};
use crate::grad::Graph;
use crate::model::{forward, Parameters, SeparatorConfig};
use crate::signal::metrics::si_sdr_slices;
use crate::signal::{Spectrogram, Stft, SI_SDR_CAP_DB};
use crate::tensor::Precision;

use super::data::{full_reference, log_magnitude, Item};

/// Lloyd's k-means on the rows of an `n × d` matrix. Deterministic: the first
/// centre is row 0 and each further centre is the row farthest from those
/// already chosen.
pub fn kmeans(data: &[f64], d: usize, k: usize, max_iter: usize) -> Result<Vec<usize>> {
    if d == 0 || k == 0 || !data.len().is_multiple_of(d) || data.len() / d < k {
        return Err(Error::Contract(format!("k-means of {} values into {k} clusters of dim {d}", data.len())));
    }
    let n = data.len() / d;
    let row = |i: usize| &data[i * d..(i + 1) * d];
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();

    let mut centres: Vec<Vec<f64>> = vec![row(0).to_vec()];
    while centres.len() < k {
        let far = (0..n)
            .max_by(|&a, &b| {
                let da = centres.iter().map(|c| dist(row(a), c)).fold(f64::INFINITY, f64::min);
                let db = centres.iter().map(|c| dist(row(b), c)).fold(f64::INFINITY, f64::min);
                da.total_cmp(&db)
            })
            .expect("n >= k > 0");
        centres.push(row(far).to_vec());
    }

    let mut labels = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| dist(row(i), &centres[a]).total_cmp(&dist(row(i), &centres[b])))
                .expect("k > 0");
            if *label != best {
                *label = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, centre) in centres.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            centre.iter_mut().for_each(|v| *v = 0.0);
            for &i in &members {
                centre.iter_mut().zip(row(i)).for_each(|(a, b)| *a += b);
            }
            centre.iter_mut().for_each(|v| *v /= members.len() as f64);
        }
    }
    Ok(labels)
}

/// Best-permutation mean SI-SDR of two estimates against two references.
pub fn pit_si_sdr(est: [&[f64]; 2], refs: [&[f64]; 2]) -> Result<f64> {
    let straight = (si_sdr_slices(est[0], refs[0])? + si_sdr_slices(est[1], refs[1])?) / 2.0;
    let swapped = (si_sdr_slices(est[1], refs[0])? + si_sdr_slices(est[0], refs[1])?) / 2.0;
    Ok(straight.max(swapped))
}

fn masked(mix: &Spectrogram, mask: &[f64]) -> Spectrogram {
    Spectrogram {
        frames: mix.frames,
        bins: mix.bins,
        re: mix.re.iter().zip(mask).map(|(x, m)| x * m).collect(),
        im: mix.im.iter().zip(mask).map(|(x, m)| x * m).collect(),
    }
}

/// Separation masks for one full utterance: the mask head when present,
/// otherwise binary masks from clustering the embeddings.
pub fn infer_masks(
    params: &Parameters,
    cfg: &SeparatorConfig,
    precision: Precision,
    item: &Item,
) -> Result<[Vec<f64>; 2]> {
    let mut g = Graph::with_precision(precision);
    let vars = params.register(&mut g);
    let mix = &item.mixture;
    let input = log_magnitude(&mix.magnitude(), mix.frames, mix.bins)?;
    let out = forward(&mut g, cfg, &vars, &[input])?;
    if let Some(masks) = out.masks.first() {
        return Ok([g.value(masks[0]).data().to_vec(), g.value(masks[1]).data().to_vec()]);
    }
    let v = out.embeddings[0];
    let labels = kmeans(g.value(v).data(), cfg.embedding_dim, 2, 100)?;
    let m0: Vec<f64> = labels.iter().map(|&l| if l == 0 { 1.0 } else { 0.0 }).collect();
    let m1 = m0.iter().map(|m| 1.0 - m).collect();
    Ok([m0, m1])
}

/// Mean permutation-invariant SI-SDR over `items`, separating with the
/// mixture phase.
pub fn validation_si_sdr(
    params: &Parameters,
    cfg: &SeparatorConfig,
    precision: Precision,
    stft: &Stft,
    items: &[Item],
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Contract("no validation items".into()));
    }
    let mut total = 0.0;
    for item in items {
        let masks = infer_masks(params, cfg, precision, item)?;
        let e0 = stft.istft(&masked(&item.mixture, &masks[0]), item.sample_rate)?;
        let e1 = stft.istft(&masked(&item.mixture, &masks[1]), item.sample_rate)?;
        let r0 = full_reference(item, 0, stft)?;
        let r1 = full_reference(item, 1, stft)?;
        total += pit_si_sdr([&e0.samples, &e1.samples], [&r0.samples, &r1.samples])?;
    }
    Ok((total / items.len() as f64).clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kmeans_separates_two_blobs() {
        let mut data = Vec::new();
        for i in 0..10 {
            let jitter = i as f64 * 0.01;
            data.extend([1.0 + jitter, 0.0]);
            data.extend([0.0, 1.0 - jitter]);
        }
        let labels = kmeans(&data, 2, 2, 50).unwrap();
        for pair in labels.chunks(2) {
            assert_ne!(pair[0], pair[1]);
        }
        assert!(labels.iter().step_by(2).all(|&l| l == labels[0]));
        assert!(kmeans(&data, 2, 30, 5).is_err());
    }

    #[test]
    fn pit_si_sdr_is_permutation_invariant() {
        let a = [1.0, 2.0, -1.0, 0.5];
        let b = [0.3, -0.2, 0.9, 1.0];
        let noisy_a: Vec<f64> = a.iter().map(|x| x + 0.01).collect();
        let forward = pit_si_sdr([&noisy_a, &b], [&a, &b]).unwrap();
        let swapped = pit_si_sdr([&b, &noisy_a], [&a, &b]).unwrap();
        assert_eq!(forward, swapped);
        assert!(forward > 20.0);
    }
}
