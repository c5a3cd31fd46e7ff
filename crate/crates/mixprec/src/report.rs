//! CSV and JSON outputs.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::Path;

use anyhow::{Context, Result};
use mixprec_core::engine::EpochRecord;
use serde::{Deserialize, Serialize};

/// One row of a tradeoff table. Failed runs have empty metrics and
/// `flagged = true`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub scheme: String,
    pub r: Option<f64>,
    pub run_index: usize,
    pub seed: u64,
    pub mean_lrt: Option<f64>,
    pub best_eval_accuracy: Option<f64>,
    pub flagged: bool,
}

pub const TRADEOFF_HEADER: &str = "scheme,r,run_index,seed,mean_lrt,best_eval_accuracy,flagged";

/// Sort key used for sweep tables: scheme, then r, then run index.
pub fn sort_rows(rows: &mut [TradeoffRow]) {
    rows.sort_by(|a, b| {
        a.scheme
            .cmp(&b.scheme)
            .then_with(|| match (a.r, b.r) {
                (Some(x), Some(y)) => x.total_cmp(&y),
                (x, y) => x.is_some().cmp(&y.is_some()),
            })
            .then(a.run_index.cmp(&b.run_index))
    });
}

pub fn write_tradeoff_csv(path: &Path, rows: &[TradeoffRow]) -> Result<()> {
    write_csv(path, rows)
}

/// Appends one row, writing the header first when the file is new or empty.
pub fn append_tradeoff_row(path: &Path, row: &TradeoffRow) -> Result<()> {
    let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    w.serialize(row)?;
    w.flush()?;
    Ok(())
}

pub fn read_tradeoff_csv(path: &Path) -> Result<Vec<TradeoffRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    r.deserialize()
        .map(|row| row.with_context(|| format!("parsing {}", path.display())))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_accuracy: f64,
    pub eval_accuracy_fp32: f64,
    pub lrt_now: f64,
    pub loss_scale_end: f64,
    pub promotions_this_epoch: usize,
    pub skipped_steps: usize,
}

impl From<&EpochRecord> for EpochRow {
    fn from(r: &EpochRecord) -> Self {
        EpochRow {
            epoch: r.epoch,
            train_loss: r.train_loss,
            eval_accuracy: r.eval_accuracy,
            eval_accuracy_fp32: r.eval_accuracy_fp32,
            lrt_now: r.lrt_now,
            loss_scale_end: r.loss_scale_end,
            promotions_this_epoch: r.promotions_this_epoch,
            skipped_steps: r.skipped_steps,
        }
    }
}

pub fn write_epochs_csv(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let rows: Vec<EpochRow> = records.iter().map(EpochRow::from).collect();
    write_csv(path, &rows)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromotionEntry {
    pub step: usize,
    pub tensor: String,
}

/// Per-run `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scheme: String,
    pub r: Option<f64>,
    pub run_index: usize,
    pub seed: u64,
    pub epochs: usize,
    pub mean_lrt: f64,
    pub final_lrt: f64,
    pub best_eval_accuracy: f64,
    pub final_eval_accuracy: f64,
    pub final_eval_accuracy_fp32: f64,
    pub promotions: Vec<PromotionEntry>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Aggregate over the repeats of one `(scheme, r)` point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub scheme: String,
    pub r: Option<f64>,
    pub runs: usize,
    pub failed: usize,
    pub mean_lrt: Option<f64>,
    pub mean_accuracy: Option<f64>,
    pub min_accuracy: Option<f64>,
    pub max_accuracy: Option<f64>,
}

/// Groups rows by `(scheme, r)`, averaging over unflagged runs.
pub fn summarize(rows: &[TradeoffRow]) -> Vec<SweepPoint> {
    let mut groups: BTreeMap<(String, Option<u64>), Vec<&TradeoffRow>> = BTreeMap::new();
    for row in rows {
        groups
            .entry((row.scheme.clone(), row.r.map(f64::to_bits)))
            .or_default()
            .push(row);
    }
    let mut points: Vec<SweepPoint> = groups
        .into_values()
        .map(|members| {
            let ok: Vec<_> = members.iter().filter(|r| !r.flagged).collect();
            let accs: Vec<f64> = ok.iter().filter_map(|r| r.best_eval_accuracy).collect();
            let lrts: Vec<f64> = ok.iter().filter_map(|r| r.mean_lrt).collect();
            let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
            SweepPoint {
                scheme: members[0].scheme.clone(),
                r: members[0].r,
                runs: members.len(),
                failed: members.len() - ok.len(),
                mean_lrt: mean(&lrts),
                mean_accuracy: mean(&accs),
                min_accuracy: accs.iter().copied().reduce(f64::min),
                max_accuracy: accs.iter().copied().reduce(f64::max),
            }
        })
        .collect();
    points.sort_by(|a, b| {
        a.scheme.cmp(&b.scheme).then_with(|| match (a.r, b.r) {
            (Some(x), Some(y)) => x.total_cmp(&y),
            (x, y) => x.is_some().cmp(&y.is_some()),
        })
    });
    points
}

pub fn write_summary_csv(path: &Path, points: &[SweepPoint]) -> Result<()> {
    write_csv(path, points)
}
