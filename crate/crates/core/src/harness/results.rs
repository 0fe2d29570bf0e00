use std::fmt;
use std::str::FromStr;

use crate::clipping::{ClipConfig, ClipMode};
use crate::error::{Error, Result};
use crate::losses::LossKind;

pub const RESULTS_HEADER: &str = "p,loss,si_sdr_db,final_train_loss,fire_fraction";

/// The clipping setting a result row was produced under.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PLabel {
    Percentile(f64),
    Static,
    None,
}

impl From<&ClipConfig> for PLabel {
    fn from(c: &ClipConfig) -> Self {
        match c.mode {
            ClipMode::AutoClip => Self::Percentile(c.p),
            ClipMode::Static { .. } => Self::Static,
            ClipMode::None => Self::None,
        }
    }
}

impl fmt::Display for PLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Percentile(p) => write!(f, "{p}"),
            Self::Static => f.write_str("static"),
            Self::None => f.write_str("none"),
        }
    }
}

impl FromStr for PLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "static" => Ok(Self::Static),
            "none" => Ok(Self::None),
            other => {
                let p: f64 = other.parse().map_err(|_| Error::Parse(format!("bad p label {other:?}")))?;
                if !(0.0..=100.0).contains(&p) {
                    return Err(Error::Parse(format!("percentile {p} outside [0, 100]")));
                }
                Ok(Self::Percentile(p))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub p: PLabel,
    pub loss: LossKind,
    pub si_sdr_db: f64,
    pub final_train_loss: f64,
    pub fire_fraction: f64,
}

/// One sweep cell; `row` is `None` when the run aborted.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub p: PLabel,
    pub loss: LossKind,
    pub row: Option<ResultRow>,
    pub error: Option<String>,
}

impl SweepCell {
    pub fn csv_line(&self) -> String {
        match &self.row {
            Some(r) => format!("{},{},{},{},{}", r.p, r.loss, r.si_sdr_db, r.final_train_loss, r.fire_fraction),
            None => format!("{},{},,,", self.p, self.loss),
        }
    }
}

pub fn results_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for c in cells {
        out.push_str(&c.csv_line());
        out.push('\n');
    }
    out
}

/// Inverse of [`results_csv`]. Failed cells come back without their error text.
pub fn parse_results_csv(text: &str) -> Result<Vec<SweepCell>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == RESULTS_HEADER => {}
        other => return Err(Error::Parse(format!("unexpected results header {other:?}"))),
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("{s}: {e}")));
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != 5 {
                return Err(Error::Parse(format!("results row needs 5 fields: {line}")));
            }
            let p: PLabel = f[0].parse()?;
            let loss: LossKind = f[1].parse()?;
            if f[2..].iter().all(|s| s.is_empty()) {
                return Ok(SweepCell { p, loss, row: None, error: Some("failed".into()) });
            }
            let row = ResultRow {
                p,
                loss,
                si_sdr_db: num(f[2])?,
                final_train_loss: num(f[3])?,
                fire_fraction: num(f[4])?,
            };
            Ok(SweepCell { p, loss, row: Some(row), error: None })
        })
        .collect()
}

/// Validation SI-SDR pivoted into a table: one row per p,
/// one column per loss.
pub fn table_csv(cells: &[SweepCell]) -> String {
    let mut ps: Vec<PLabel> = Vec::new();
    let mut losses: Vec<LossKind> = Vec::new();
    for c in cells {
        if !ps.contains(&c.p) {
            ps.push(c.p);
        }
        if !losses.contains(&c.loss) {
            losses.push(c.loss);
        }
    }
    let mut out = String::from("p");
    for l in &losses {
        out.push(',');
        out.push_str(l.name());
    }
    out.push('\n');
    for p in &ps {
        out.push_str(&p.to_string());
        for l in &losses {
            out.push(',');
            let cell = cells.iter().find(|c| c.p == *p && c.loss == *l);
            if let Some(r) = cell.and_then(|c| c.row.as_ref()) {
                out.push_str(&format!("{:.2}", r.si_sdr_db));
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(p: PLabel, loss: LossKind, v: f64) -> SweepCell {
        let row = ResultRow { p, loss, si_sdr_db: v, final_train_loss: v / 7.0, fire_fraction: 0.9 };
        SweepCell { p, loss, row: Some(row), error: None }
    }

    #[test]
    fn labels_round_trip() {
        for l in [PLabel::Percentile(10.0), PLabel::Percentile(0.5), PLabel::Static, PLabel::None] {
            assert_eq!(l.to_string().parse::<PLabel>().unwrap(), l);
        }
        assert_eq!(PLabel::Percentile(10.0).to_string(), "10");
        assert!("101".parse::<PLabel>().is_err());
        assert!("x".parse::<PLabel>().is_err());
    }

    #[test]
    fn csv_round_trip_with_failed_cell() {
        let cells = vec![
            cell(PLabel::Percentile(10.0), LossKind::Mi, 4.123456789012345),
            cell(PLabel::Static, LossKind::Snr, -1.0 / 3.0),
            SweepCell { p: PLabel::None, loss: LossKind::Dc, row: None, error: Some("failed".into()) },
        ];
        let text = results_csv(&cells);
        assert!(text.starts_with("p,loss,si_sdr_db,final_train_loss,fire_fraction\n"));
        assert_eq!(parse_results_csv(&text).unwrap(), cells);
    }

    #[test]
    fn table_pivots_p_by_loss() {
        let cells = vec![
            cell(PLabel::Percentile(10.0), LossKind::Mi, 4.0),
            cell(PLabel::Percentile(10.0), LossKind::Snr, 5.0),
            cell(PLabel::Percentile(100.0), LossKind::Mi, 3.0),
        ];
        assert_eq!(table_csv(&cells), "p,mi,snr\n10,4.00,5.00\n100,3.00,\n");
    }
}
