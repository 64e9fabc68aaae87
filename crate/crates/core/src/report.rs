//! CSV and JSON writers plus run aggregation.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pipeline::FinalReport;

/// Writes an RFC 4180 CSV file. Zero rows still produce the header line.
pub fn emit_csv<S: AsRef<str>>(path: &Path, header: &[S], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Corrupt(format!("{}: {other:?}", path.display())),
    })?;
    w.write_record(header.iter().map(AsRef::as_ref))?;
    for (i, row) in rows.iter().enumerate() {
        if row.len() != header.len() {
            return Err(Error::ShapeMismatch(format!(
                "csv row {i} has {} fields, header has {}",
                row.len(),
                header.len()
            )));
        }
        w.write_record(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<FinalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// One line per run directory: seed, warm-up and final mIoU, and per-round
/// mIoU, followed by mean and median rows over all runs.
pub fn summarize_runs(dirs: &[&Path], out: &Path) -> Result<Vec<FinalReport>> {
    let reports = dirs
        .iter()
        .map(|d| read_report(&d.join("report.json")))
        .collect::<Result<Vec<_>>>()?;
    let max_rounds = reports.iter().map(|r| r.rounds.len()).max().unwrap_or(0);
    let mut header = vec![
        "run".to_string(),
        "seed".into(),
        "untrained_miou".into(),
        "warmup_miou".into(),
    ];
    header.extend((1..=max_rounds).map(|r| format!("round_{r}_miou")));
    header.push("final_miou".into());
    let mut rows = Vec::new();
    for (d, r) in dirs.iter().zip(&reports) {
        let mut row = vec![
            d.display().to_string(),
            r.seed.to_string(),
            r.untrained_miou.to_string(),
            r.warmup_miou.to_string(),
        ];
        row.extend((0..max_rounds).map(|i| r.rounds.get(i).map(|x| x.miou.to_string()).unwrap_or_default()));
        row.push(r.final_miou.to_string());
        rows.push(row);
    }
    for (name, agg) in [("mean", mean as fn(&[f64]) -> Option<f64>), ("median", median)] {
        let col = |f: &dyn Fn(&FinalReport) -> Option<f64>| {
            let v: Vec<f64> = reports.iter().filter_map(f).collect();
            agg(&v).map(|x| x.to_string()).unwrap_or_default()
        };
        let mut row = vec![
            name.to_string(),
            String::new(),
            col(&|r| Some(r.untrained_miou)),
            col(&|r| Some(r.warmup_miou)),
        ];
        row.extend((0..max_rounds).map(|i| col(&|r| r.rounds.get(i).map(|x| x.miou))));
        row.push(col(&|r| Some(r.final_miou)));
        rows.push(row);
    }
    emit_csv(out, &header, &rows)?;
    Ok(reports)
}
