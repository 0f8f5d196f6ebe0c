//! Error and availability statistics, run summaries and CSV series.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::estfilter::block_average_masked;
use crate::scalar::{count, Real};
use crate::simworld::FrameRecord;

pub const SUMMARY_FILE: &str = "run_summary.json";
pub const FRAMES_FILE: &str = "frames.csv";
pub const BLOCKED_FILE: &str = "series_blocked.csv";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no available frames")]
    NoAvailableFrames,
    #[error("empty input")]
    EmptyInput,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed summary: {0}")]
    Format(String),
}

/// Mean of `|est − truth|` over frames flagged available.
pub fn mae<T: Real>(estimates: &[T], truths: &[T], avail: &[bool]) -> Result<T, EvalError> {
    if estimates.len() != truths.len() {
        return Err(EvalError::LengthMismatch(estimates.len(), truths.len()));
    }
    if estimates.len() != avail.len() {
        return Err(EvalError::LengthMismatch(estimates.len(), avail.len()));
    }
    let (sum, n) = estimates
        .iter()
        .zip(truths)
        .zip(avail)
        .filter(|(_, &a)| a)
        .fold((T::zero(), 0usize), |(s, n), ((&e, &t), _)| {
            (s + (e - t).abs(), n + 1)
        });
    if n == 0 {
        return Err(EvalError::NoAvailableFrames);
    }
    Ok(sum / count(n))
}

pub fn avail_pct(avail: &[bool]) -> Result<f64, EvalError> {
    if avail.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    Ok(100.0 * avail.iter().filter(|&&a| a).count() as f64 / avail.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Static,
    Dynamic,
}

impl EvalMode {
    fn suffix(self) -> &'static str {
        match self {
            EvalMode::Static => "smae",
            EvalMode::Dynamic => "dmae",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            EvalMode::Static => "sMAE",
            EvalMode::Dynamic => "dMAE",
        }
    }
}

/// Which curvature column is scored.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KappaSource {
    #[default]
    Filtered,
    Raw,
}

/// One row of `frames.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameRow {
    pub frame_idx: usize,
    pub kappa_hat: Option<f64>,
    pub kappa_gt: f64,
    pub delta_m: Option<f64>,
    pub delta_gt: f64,
    pub delta_avail: bool,
}

impl FrameRow {
    pub fn from_record(r: &FrameRecord, source: KappaSource) -> Self {
        Self {
            frame_idx: r.frame_idx,
            kappa_hat: match source {
                KappaSource::Filtered => r.kappa_hat,
                KappaSource::Raw => r.kappa_raw,
            },
            kappa_gt: r.kappa_gt,
            delta_m: r.delta_m,
            delta_gt: r.delta_gt,
            delta_avail: r.delta_m.is_some(),
        }
    }
}

pub fn rows_from_records(records: &[FrameRecord], source: KappaSource) -> Vec<FrameRow> {
    records
        .iter()
        .map(|r| FrameRow::from_record(r, source))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub n_frames: usize,
    /// `None` when no frame had the quantity available.
    pub kappa_mae: Option<f64>,
    pub delta_mae: Option<f64>,
    pub kappa_avail_pct: f64,
    pub delta_avail_pct: f64,
    pub kappa_source: KappaSource,
    /// Set when the run stopped early (e.g. the vehicle left the lane).
    pub partial: bool,
    pub outcome: Option<String>,
}

impl EvalReport {
    pub fn from_rows(
        mode: EvalMode,
        rows: &[FrameRow],
        kappa_source: KappaSource,
    ) -> Result<Self, EvalError> {
        let k_avail: Vec<bool> = rows.iter().map(|r| r.kappa_hat.is_some()).collect();
        let d_avail: Vec<bool> = rows.iter().map(|r| r.delta_avail).collect();
        let k_est: Vec<f64> = rows.iter().map(|r| r.kappa_hat.unwrap_or(0.0)).collect();
        let k_gt: Vec<f64> = rows.iter().map(|r| r.kappa_gt).collect();
        let d_est: Vec<f64> = rows.iter().map(|r| r.delta_m.unwrap_or(0.0)).collect();
        let d_gt: Vec<f64> = rows.iter().map(|r| r.delta_gt).collect();
        let optional = |r: Result<f64, EvalError>| match r {
            Ok(v) => Ok(Some(v)),
            Err(EvalError::NoAvailableFrames) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(Self {
            mode,
            n_frames: rows.len(),
            kappa_mae: optional(mae(&k_est, &k_gt, &k_avail))?,
            delta_mae: optional(mae(&d_est, &d_gt, &d_avail))?,
            kappa_avail_pct: avail_pct(&k_avail)?,
            delta_avail_pct: avail_pct(&d_avail)?,
            kappa_source,
            partial: false,
            outcome: None,
        })
    }

    pub fn to_json(&self) -> Value {
        let sfx = self.mode.suffix();
        let mut m = Map::new();
        m.insert("mode".into(), json!(self.mode));
        m.insert("n_frames".into(), json!(self.n_frames));
        m.insert(format!("kappa_{sfx}"), json!(self.kappa_mae));
        m.insert(format!("delta_{sfx}"), json!(self.delta_mae));
        m.insert("kappa_avail_pct".into(), json!(self.kappa_avail_pct));
        m.insert("delta_avail_pct".into(), json!(self.delta_avail_pct));
        m.insert("kappa_source".into(), json!(self.kappa_source));
        m.insert("partial".into(), json!(self.partial));
        if let Some(o) = &self.outcome {
            m.insert("outcome".into(), json!(o));
        }
        Value::Object(m)
    }

    pub fn from_json(v: &Value) -> Result<Self, EvalError> {
        let bad = |k: &str| EvalError::Format(format!("missing or invalid `{k}`"));
        let mode: EvalMode =
            serde_json::from_value(v.get("mode").cloned().ok_or_else(|| bad("mode"))?)?;
        let sfx = mode.suffix();
        let opt_f64 = |k: &str| -> Result<Option<f64>, EvalError> {
            match v.get(k) {
                Some(Value::Null) => Ok(None),
                Some(x) => x.as_f64().map(Some).ok_or_else(|| bad(k)),
                None => Err(bad(k)),
            }
        };
        let f = |k: &str| v.get(k).and_then(Value::as_f64).ok_or_else(|| bad(k));
        Ok(Self {
            mode,
            n_frames: v
                .get("n_frames")
                .and_then(Value::as_u64)
                .ok_or_else(|| bad("n_frames"))? as usize,
            kappa_mae: opt_f64(&format!("kappa_{sfx}"))?,
            delta_mae: opt_f64(&format!("delta_{sfx}"))?,
            kappa_avail_pct: f("kappa_avail_pct")?,
            delta_avail_pct: f("delta_avail_pct")?,
            kappa_source: match v.get("kappa_source") {
                Some(s) => serde_json::from_value(s.clone())?,
                None => KappaSource::default(),
            },
            partial: v
                .get("partial")
                .and_then(Value::as_bool)
                .ok_or_else(|| bad("partial"))?,
            outcome: v.get("outcome").and_then(Value::as_str).map(str::to_owned),
        })
    }
}

pub fn write_frames_csv<W: Write>(rows: &[FrameRow], w: W) -> Result<(), EvalError> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    if rows.is_empty() {
        wtr.write_record([
            "frame_idx",
            "kappa_hat",
            "kappa_gt",
            "delta_m",
            "delta_gt",
            "delta_avail",
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_frames_csv<R: Read>(r: R) -> Result<Vec<FrameRow>, EvalError> {
    let mut rdr = csv::Reader::from_reader(r);
    rdr.deserialize()
        .map(|row| row.map_err(EvalError::from))
        .collect()
}

/// Block means of the exported series; missing values are skipped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockRow {
    pub block: usize,
    pub first_frame: usize,
    pub frames: usize,
    pub kappa_hat: Option<f64>,
    pub kappa_gt: Option<f64>,
    pub delta_m: Option<f64>,
    pub delta_gt: Option<f64>,
    pub partial: bool,
}

pub fn blocked_series(rows: &[FrameRow], block: usize) -> Vec<BlockRow> {
    let col =
        |f: &dyn Fn(&FrameRow) -> Option<f64>| -> Vec<Option<f64>> { rows.iter().map(f).collect() };
    let kh = block_average_masked(&col(&|r| r.kappa_hat), block);
    let kg = block_average_masked(&col(&|r| Some(r.kappa_gt)), block);
    let dm = block_average_masked(&col(&|r| r.delta_m), block);
    let dg = block_average_masked(&col(&|r| Some(r.delta_gt)), block);
    (0..kh.len())
        .map(|i| BlockRow {
            block: i,
            first_frame: rows[i * block].frame_idx,
            frames: kh[i].len,
            kappa_hat: kh[i].mean,
            kappa_gt: kg[i].mean,
            delta_m: dm[i].mean,
            delta_gt: dg[i].mean,
            partial: kh[i].partial,
        })
        .collect()
}

pub fn write_blocked_csv<W: Write>(blocks: &[BlockRow], w: W) -> Result<(), EvalError> {
    let mut wtr = csv::Writer::from_writer(w);
    for b in blocks {
        wtr.serialize(b)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_summary(report: &EvalReport, path: impl AsRef<Path>) -> Result<(), EvalError> {
    let mut text = serde_json::to_string_pretty(&report.to_json())?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_summary(path: impl AsRef<Path>) -> Result<EvalReport, EvalError> {
    let v: Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    EvalReport::from_json(&v)
}

/// Writes the summary, the per-frame table and the block-averaged series
/// (`block` frames per point) into `dir`.
pub fn export_report(
    dir: impl AsRef<Path>,
    report: &EvalReport,
    rows: &[FrameRow],
    block: usize,
) -> Result<(), EvalError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_frames_csv(
        rows,
        io::BufWriter::new(fs::File::create(dir.join(FRAMES_FILE))?),
    )?;
    write_blocked_csv(
        &blocked_series(rows, block),
        io::BufWriter::new(fs::File::create(dir.join(BLOCKED_FILE))?),
    )?;
    write_summary(report, dir.join(SUMMARY_FILE))
}

/// Side-by-side error/availability table, one column pair per report.
pub fn comparison_table(reports: &[(&str, &EvalReport)]) -> String {
    let fmt_mae = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4e}"));
    let mut out = String::new();
    let label_w = 10;
    let col_w = 22;
    let _ = write!(out, "{:<label_w$}", "");
    for (name, _) in reports {
        let _ = write!(out, "| {:<w$}", name, w = col_w - 2);
    }
    out.push('\n');
    let _ = write!(out, "{:<label_w$}", "");
    for (_, r) in reports {
        let head = format!("{} / Avail", r.mode.label());
        let _ = write!(out, "| {:<w$}", head, w = col_w - 2);
    }
    out.push('\n');
    out.push_str(&"-".repeat(label_w + col_w * reports.len()));
    out.push('\n');
    for (label, pick) in [("κ (1/m)", 0), ("Δ (m)", 1)] {
        let _ = write!(out, "{:<label_w$}", label);
        for (_, r) in reports {
            let (m, a) = if pick == 0 {
                (r.kappa_mae, r.kappa_avail_pct)
            } else {
                (r.delta_mae, r.delta_avail_pct)
            };
            let cell = format!("{} / {:.2}", fmt_mae(m), a);
            let _ = write!(out, "| {:<w$}", cell, w = col_w - 2);
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(i: usize, k: Option<f64>, kg: f64, d: Option<f64>, dg: f64) -> FrameRow {
        FrameRow {
            frame_idx: i,
            kappa_hat: k,
            kappa_gt: kg,
            delta_m: d,
            delta_gt: dg,
            delta_avail: d.is_some(),
        }
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0], &[true, true]).unwrap(), 0.0);
        assert_eq!(
            mae(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0], &[true, true, false]).unwrap(),
            0.5
        );
        assert!(matches!(
            mae(&[1.0f64], &[0.0], &[false]),
            Err(EvalError::NoAvailableFrames)
        ));
        assert!(matches!(
            mae(&[1.0f64], &[0.0, 1.0], &[true]),
            Err(EvalError::LengthMismatch(1, 2))
        ));
    }

    #[test]
    fn avail_examples() {
        assert_eq!(avail_pct(&[true, true, false, false]).unwrap(), 50.0);
        assert_eq!(avail_pct(&[true; 7]).unwrap(), 100.0);
        let mut v = vec![true; 191];
        v.extend([false; 9]);
        assert_eq!(avail_pct(&v).unwrap(), 95.5);
        assert!(matches!(avail_pct(&[]), Err(EvalError::EmptyInput)));
    }

    #[test]
    fn report_keys_follow_mode() {
        let rows = vec![
            row(0, Some(0.01), 0.011, Some(0.1), 0.12),
            row(1, Some(0.0), 0.0, None, 0.3),
        ];
        let r = EvalReport::from_rows(EvalMode::Dynamic, &rows, KappaSource::Filtered).unwrap();
        let v = r.to_json();
        assert!(v.get("kappa_dmae").is_some() && v.get("kappa_smae").is_none());
        assert_eq!(r.delta_avail_pct, 50.0);
        assert!((r.delta_mae.unwrap() - 0.02).abs() < 1e-15);
        assert_eq!(EvalReport::from_json(&v).unwrap(), r);
    }

    #[test]
    fn blocked_series_counts() {
        let rows: Vec<FrameRow> = (0..22)
            .map(|i| row(i, Some(i as f64), 0.0, Some(1.0), 1.0))
            .collect();
        let b = blocked_series(&rows, 11);
        assert_eq!(b.len(), 2);
        assert_eq!(b[0].kappa_hat, Some(5.0));
        assert_eq!(b[1].first_frame, 11);
        assert!(!b[1].partial);
    }

    #[test]
    fn csv_empty_fields_for_missing_values() {
        let rows = vec![row(0, Some(0.5), 0.25, None, -0.1)];
        let mut buf = Vec::new();
        write_frames_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text,
            "frame_idx,kappa_hat,kappa_gt,delta_m,delta_gt,delta_avail\n0,0.5,0.25,,-0.1,false\n"
        );
        assert_eq!(read_frames_csv(&buf[..]).unwrap(), rows);
    }

    #[test]
    fn comparison_has_table_shape() {
        let rows = vec![row(0, Some(0.01), 0.011, Some(0.1), 0.12)];
        let a = EvalReport::from_rows(EvalMode::Static, &rows, KappaSource::Filtered).unwrap();
        let t = comparison_table(&[("UNet", &a), ("DSUNet", &a)]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[0].contains("UNet") && lines[0].contains("DSUNet"));
        assert!(lines[1].contains("sMAE / Avail"));
        assert!(lines[3].starts_with("κ") && lines[4].starts_with("Δ"));
        assert!(lines[3].contains("100.00"));
    }
}
