//! Per-step metrics rows and their CSV form.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "step,l_vqa,l_type,l_spe,l_com,total,open_acc,closed_acc,all_acc";

/// One logged training step. Absent values are empty CSV fields.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub l_vqa: Option<f64>,
    pub l_type: Option<f64>,
    pub l_spe: Option<f64>,
    pub l_com: Option<f64>,
    pub total: f64,
    pub open_acc: Option<f64>,
    pub closed_acc: Option<f64>,
    pub all_acc: Option<f64>,
}

fn field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Floats are written in shortest round-trip form, so parsing recovers
/// them bit for bit.
pub fn to_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.step,
            field(r.l_vqa),
            field(r.l_type),
            field(r.l_spe),
            field(r.l_com),
            r.total,
            field(r.open_acc),
            field(r.closed_acc),
            field(r.all_acc)
        );
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Invalid("metrics CSV header mismatch".into()));
    }
    let bad = |line: &str| Error::Invalid(format!("malformed metrics row {line:?}"));
    let opt = |s: &str, line: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| bad(line))
        }
    };
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(bad(line));
            }
            Ok(MetricsRow {
                step: f[0].parse().map_err(|_| bad(line))?,
                l_vqa: opt(f[1], line)?,
                l_type: opt(f[2], line)?,
                l_spe: opt(f[3], line)?,
                l_com: opt(f[4], line)?,
                total: f[5].parse().map_err(|_| bad(line))?,
                open_acc: opt(f[6], line)?,
                closed_acc: opt(f[7], line)?,
                all_acc: opt(f[8], line)?,
            })
        })
        .collect()
}
