use crate::error::{Error, Result};
use crate::signal::Waveform;

/// Results are clamped to `±SI_SDR_CAP_DB` instead of reaching ±∞.
pub const SI_SDR_CAP_DB: f64 = 120.0;

/// Scale-invariant signal-to-distortion ratio in dB.
///
/// The reference is optimally rescaled by `α = ⟨est, ref⟩ / ‖ref‖²` before
/// the residual is measured, so `si_sdr(a·est, ref) == si_sdr(est, ref)`.
pub fn si_sdr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    si_sdr_slices(&est.samples, &reference.samples)
}

pub(crate) fn si_sdr_slices(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::Shape(format!(
            "estimate has {} samples, reference {}",
            est.len(),
            reference.len()
        )));
    }
    let ref_energy: f64 = reference.iter().map(|r| r * r).sum();
    if ref_energy == 0.0 {
        return Err(Error::Contract("SI-SDR reference is all zeros".into()));
    }
    let dot: f64 = est.iter().zip(reference).map(|(e, r)| e * r).sum();
    let alpha = dot / ref_energy;
    let (mut target, mut residual) = (0.0, 0.0);
    for (e, r) in est.iter().zip(reference) {
        let t = alpha * r;
        target += t * t;
        residual += (t - e) * (t - e);
    }
    let db = if residual == 0.0 {
        if target == 0.0 {
            -SI_SDR_CAP_DB
        } else {
            SI_SDR_CAP_DB
        }
    } else if target == 0.0 {
        -SI_SDR_CAP_DB
    } else {
        10.0 * (target / residual).log10()
    };
    Ok(db.clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}
