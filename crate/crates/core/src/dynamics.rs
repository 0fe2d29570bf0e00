//! Training-dynamics measurements: step size, local smoothness (gradient
//! Lipschitz secant), and Pearson correlation.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column order of the dynamics CSV.
pub const DYNAMICS_HEADER: &str = "iter,loss,grad_norm,clip_threshold,fired,step_size,smoothness";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsRecord {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub clip_threshold: f64,
    pub fired: bool,
    pub step_size: f64,
    pub smoothness: f64,
}

impl DynamicsRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration,
            self.loss,
            self.grad_norm,
            self.clip_threshold,
            u8::from(self.fired),
            self.step_size,
            self.smoothness
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return Err(Error::Parse(format!("dynamics row needs 7 fields: {line}")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("{s}: {e}")));
        Ok(Self {
            iteration: f[0].parse().map_err(|e| Error::Parse(format!("{}: {e}", f[0])))?,
            loss: num(f[1])?,
            grad_norm: num(f[2])?,
            clip_threshold: num(f[3])?,
            fired: match f[4] {
                "1" => true,
                "0" => false,
                other => return Err(Error::Parse(format!("fired flag {other}"))),
            },
            step_size: num(f[5])?,
            smoothness: num(f[6])?,
        })
    }
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} parameters", a.len(), b.len())));
    }
    Ok(())
}

/// `‖θ_t − θ_{t−1}‖₂` over all parameters.
pub fn step_size(theta_t: &[f64], theta_prev: &[f64]) -> Result<f64> {
    check_len(theta_t, theta_prev)?;
    Ok(theta_t
        .iter()
        .zip(theta_prev)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Secant estimate of the local gradient Lipschitz constant,
/// `‖∇f(θ_b) − ∇f(θ_a)‖ / ‖θ_b − θ_a‖`, with both gradients taken on the same
/// batch. Returns `None` when the points coincide.
pub fn local_smoothness(
    theta_a: &[f64],
    theta_b: &[f64],
    grad_a: &[f64],
    grad_b: &[f64],
) -> Result<Option<f64>> {
    check_len(theta_a, theta_b)?;
    check_len(grad_a, grad_b)?;
    check_len(theta_a, grad_a)?;
    let denom = step_size(theta_b, theta_a)?;
    if denom == 0.0 {
        return Ok(None);
    }
    Ok(Some(step_size(grad_b, grad_a)? / denom))
}

/// Like [`local_smoothness`], evaluating the gradients through `grad_fn`.
pub fn local_smoothness_with<F>(theta_a: &[f64], theta_b: &[f64], mut grad_fn: F) -> Result<Option<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    check_len(theta_a, theta_b)?;
    if step_size(theta_b, theta_a)? == 0.0 {
        return Ok(None);
    }
    let ga = grad_fn(theta_a)?;
    let gb = grad_fn(theta_b)?;
    local_smoothness(theta_a, theta_b, &ga, &gb)
}

/// Pearson product-moment correlation.
pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Contract(format!(
            "pearson_r needs two equal-length series of at least 2 points ({} vs {})",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Contract("pearson_r of a zero-variance series".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Collects sampled records; rows whose smoothness probe was undefined are
/// counted, not written.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Recorder {
    pub every: usize,
    pub records: Vec<DynamicsRecord>,
    pub skipped: usize,
}

impl Recorder {
    pub fn new(every: usize) -> Self {
        Self { every, ..Self::default() }
    }

    pub fn due(&self, iteration: usize) -> bool {
        self.every > 0 && iteration.is_multiple_of(self.every)
    }

    pub fn push(&mut self, record: DynamicsRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.iteration <= last.iteration {
                return Err(Error::Contract("dynamics iterations must increase".into()));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn skip(&mut self) {
        self.skipped += 1;
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(DYNAMICS_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.csv_line());
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        w.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

pub fn parse_dynamics_csv(text: &str) -> Result<Vec<DynamicsRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == DYNAMICS_HEADER => {}
        other => return Err(Error::Parse(format!("unexpected dynamics header {other:?}"))),
    }
    lines.filter(|l| !l.trim().is_empty()).map(DynamicsRecord::parse_csv_line).collect()
}
