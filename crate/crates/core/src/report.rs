//! CSV and JSON output for training logs and baseline reports.
//!
//! CSV accuracy columns are percentages; costs are in provider-call units.

use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::agent::EpochRecord;
use crate::baselines::BaselineReport;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}: missing column {column}")]
    MissingColumn { path: String, column: String },
    #[error("{path}: bad value {value:?} in column {column}")]
    BadValue { path: String, column: String, value: String },
}

const LOG_HEAD: [&str; 6] = ["epoch", "total_steps", "test_ap50", "test_map", "episode_cost", "test_reward"];
const LOG_TAIL: [&str; 3] = ["critic_loss", "actor_objective", "wall_seconds"];

fn selection_columns(providers: &[String]) -> Vec<String> {
    providers.iter().map(|p| format!("sel_{p}")).collect()
}

fn pct(x: f64) -> String {
    format!("{:.4}", 100.0 * x)
}

fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.6}")
    } else {
        String::new()
    }
}

pub fn write_log_csv(w: impl Write, providers: &[String], log: &[EpochRecord]) -> Result<(), ReportError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = LOG_HEAD.iter().map(|s| s.to_string()).collect();
    header.extend(selection_columns(providers));
    header.extend(LOG_TAIL.iter().map(|s| s.to_string()));
    out.write_record(&header)?;
    for r in log {
        let mut row = vec![
            r.epoch.to_string(),
            r.total_steps.to_string(),
            pct(r.test_ap50),
            pct(r.test_map),
            num(r.episode_cost),
            num(r.test_reward),
        ];
        row.extend(r.selections.iter().map(|c| c.to_string()));
        row.extend([num(r.critic_loss), num(r.actor_objective), format!("{:.3}", r.wall_seconds)]);
        out.write_record(&row)?;
    }
    out.flush().map_err(|e| ReportError::Io { path: "<log>".into(), source: e })?;
    Ok(())
}

pub fn write_reports_csv(w: impl Write, providers: &[String], reports: &[BaselineReport]) -> Result<(), ReportError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> =
        ["method", "ap50", "map", "ap75", "episode_cost", "mean_reward"].iter().map(|s| s.to_string()).collect();
    header.extend(selection_columns(providers));
    out.write_record(&header)?;
    for r in reports {
        let mut row = vec![r.method.clone(), pct(r.ap50), pct(r.map), pct(r.ap75), num(r.cost), num(r.mean_reward)];
        row.extend(r.selections.iter().map(|c| c.to_string()));
        out.write_record(&row)?;
    }
    out.flush().map_err(|e| ReportError::Io { path: "<report>".into(), source: e })?;
    Ok(())
}

#[derive(Serialize)]
struct ImageDump<'a> {
    method: &'a str,
    images: Vec<ImageRow<'a>>,
}

#[derive(Serialize)]
struct ImageRow<'a> {
    image_id: &'a str,
    action: String,
    ap50: f64,
    cost: f64,
    reward: f64,
}

/// Per-image action dump; actions are written as bit strings, provider 0 first.
pub fn write_per_image_json(w: impl Write, report: &BaselineReport) -> Result<(), ReportError> {
    let dump = ImageDump {
        method: &report.method,
        images: report
            .per_image
            .iter()
            .map(|o| ImageRow {
                image_id: &o.image_id,
                action: o.action.to_bit_string(),
                ap50: o.accuracy,
                cost: o.cost,
                reward: o.reward,
            })
            .collect(),
    };
    serde_json::to_writer_pretty(w, &dump)?;
    Ok(())
}

pub fn write_file(path: &Path, f: impl FnOnce(&mut std::io::BufWriter<std::fs::File>) -> Result<(), ReportError>) -> Result<(), ReportError> {
    let io = |e| ReportError::Io { path: path.display().to_string(), source: e };
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    f(&mut w)?;
    w.flush().map_err(io)
}

/// Curve data read back from a training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogSeries {
    pub epochs: Vec<f64>,
    /// Percent.
    pub ap50: Vec<f64>,
    pub cost: Vec<f64>,
}

pub fn read_log_series(r: impl Read, origin: &str) -> Result<LogSeries, ReportError> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| ReportError::MissingColumn {
            path: origin.to_string(),
            column: name.to_string(),
        })
    };
    let (ce, ca, cc) = (col("epoch")?, col("test_ap50")?, col("episode_cost")?);
    let mut s = LogSeries { epochs: Vec::new(), ap50: Vec::new(), cost: Vec::new() };
    for rec in rdr.records() {
        let rec = rec?;
        let get = |c: usize, name: &str| {
            let v = rec.get(c).unwrap_or("");
            v.trim().parse::<f64>().map_err(|_| ReportError::BadValue {
                path: origin.to_string(),
                column: name.to_string(),
                value: v.to_string(),
            })
        };
        s.epochs.push(get(ce, "epoch")?);
        s.ap50.push(get(ca, "test_ap50")?);
        s.cost.push(get(cc, "episode_cost")?);
    }
    Ok(s)
}
