//! Single runs and sweeps over schemes, ratios and repeats.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mixprec_core::assign::{assign_op_based, assign_ours, assign_uniform, candidate_hfp8, OpVariant};
use mixprec_core::engine::{self, PrecisionPlan, TensorFormats, TrainConfig, TrainOutcome};
use mixprec_core::fpnum::FpFormat;
use mixprec_core::graph::{build_graph, Graph, TensorId};

use crate::config::{ExperimentConfig, Scheme};
use crate::data::{load_dataset, SplitData};
use crate::report::{
    append_tradeoff_row, sort_rows, summarize, write_epochs_csv, write_json, write_summary_csv,
    write_tradeoff_csv, PromotionEntry, RunSummary, TradeoffRow,
};

pub fn model_graph(cfg: &ExperimentConfig) -> Result<Graph> {
    build_graph(&cfg.layers, &cfg.input_shape).context("building model")
}

/// Tensors held in high precision regardless of the scheme.
pub fn forced_tensors(g: &Graph, cfg: &ExperimentConfig) -> Vec<TensorId> {
    if cfg.force_weight_grads_hi {
        g.backward_weight_tensors()
    } else {
        Vec::new()
    }
}

/// The precision plan and training switches for `scheme`. Baselines train
/// without promotion; fp32 also runs without loss scaling.
pub fn plan_for(
    g: &Graph,
    scheme: Scheme,
    forced: &[TensorId],
    base: &TrainConfig,
) -> Result<(PrecisionPlan, TrainConfig)> {
    let mut cfg = base.clone();
    let candidate = candidate_hfp8(g);
    let mixed = |assignment| PrecisionPlan::Mixed {
        candidate: candidate.clone(),
        assignment,
    };
    let plan = match scheme {
        Scheme::Fp32 => {
            cfg.promotion_enabled = false;
            cfg.dynamic_loss_scaling = false;
            PrecisionPlan::Fixed(TensorFormats::uniform(g, FpFormat::FP32))
        }
        Scheme::Unif => {
            cfg.promotion_enabled = false;
            mixed(assign_uniform(g, forced)?)
        }
        Scheme::Op | Scheme::OpPrime => {
            cfg.promotion_enabled = false;
            let variant = if scheme == Scheme::Op {
                OpVariant::Op
            } else {
                OpVariant::OpPrime
            };
            mixed(assign_op_based(g, variant, forced)?)
        }
        Scheme::Ours { r, order } => {
            cfg.promotion_enabled = true;
            mixed(assign_ours(g, r, order.with_seed(base.seed), forced)?.assignment)
        }
        Scheme::OursNoPromo { r, order } => {
            cfg.promotion_enabled = false;
            mixed(assign_ours(g, r, order.with_seed(base.seed), forced)?.assignment)
        }
    };
    Ok((plan, cfg))
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub row: TradeoffRow,
    pub summary: RunSummary,
    pub outcome: TrainOutcome,
}

/// Trains `scheme` once with seed `cfg.train.seed + run_index`. Does no IO.
pub fn run_single(
    cfg: &ExperimentConfig,
    g: &Graph,
    data: &SplitData,
    scheme: Scheme,
    run_index: usize,
) -> Result<RunResult> {
    let seed = cfg.train.seed.wrapping_add(run_index as u64);
    let base = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let (plan, train_cfg) = plan_for(g, scheme, &forced_tensors(g, cfg), &base)?;
    let outcome = engine::train(g, plan, &train_cfg, &data.train, &data.eval)
        .with_context(|| format!("training {} (seed {seed})", scheme.label()))?;

    let last = outcome.records.last().context("no epochs were run")?;
    let mean_lrt = outcome.mean_lrt();
    let best = outcome.best_eval_accuracy();
    let diverged = outcome.records.iter().any(|r| !r.train_loss.is_finite());
    let row = TradeoffRow {
        scheme: scheme.label(),
        r: scheme.ratio(),
        run_index,
        seed,
        mean_lrt: Some(mean_lrt),
        best_eval_accuracy: Some(best),
        flagged: diverged || !mean_lrt.is_finite() || !best.is_finite(),
    };
    let tensors = g.tensors();
    let summary = RunSummary {
        scheme: row.scheme.clone(),
        r: row.r,
        run_index,
        seed,
        epochs: outcome.records.len(),
        mean_lrt,
        final_lrt: last.lrt_now,
        best_eval_accuracy: best,
        final_eval_accuracy: last.eval_accuracy,
        final_eval_accuracy_fp32: last.eval_accuracy_fp32,
        promotions: outcome
            .promotions
            .iter()
            .map(|p| PromotionEntry {
                step: p.step,
                tensor: tensors[p.tensor.0].label(),
            })
            .collect(),
    };
    Ok(RunResult { row, summary, outcome })
}

/// Writes `epochs.csv` and `summary.json` into `dir`.
pub fn write_run(dir: &Path, run: &RunResult) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_epochs_csv(&dir.join("epochs.csv"), &run.outcome.records)?;
    write_json(&dir.join("summary.json"), &run.summary)
}

/// One training run of the configured scheme: writes the run files into `out`
/// and appends its row to `out/tradeoff.csv`.
pub fn train_to_dir(cfg: &ExperimentConfig, out: &Path) -> Result<RunResult> {
    let g = model_graph(cfg)?;
    let data = load_dataset(&cfg.dataset)?;
    let run = run_single(cfg, &g, &data, cfg.scheme, 0)?;
    write_run(out, &run)?;
    append_tradeoff_row(&out.join("tradeoff.csv"), &run.row)?;
    Ok(run)
}

/// The `(scheme, run_index)` jobs of a sweep: every ratio for the demotion
/// schemes, a single point for the others.
pub fn sweep_jobs(cfg: &ExperimentConfig) -> Vec<(Scheme, usize)> {
    let mut jobs = Vec::new();
    for &scheme in &cfg.sweep_schemes {
        let points: Vec<Scheme> = match scheme.ratio() {
            Some(_) => cfg.sweep_r_values.iter().map(|&r| scheme.with_ratio(r)).collect(),
            None => vec![scheme],
        };
        for point in points {
            jobs.extend((0..cfg.sweep_repeats).map(|i| (point, i)));
        }
    }
    jobs
}

fn run_dir(out: &Path, row: &TradeoffRow) -> PathBuf {
    let r = row.r.map_or_else(String::new, |r| format!("_r{r}"));
    out.join("runs").join(format!("{}{r}_run{}", row.scheme, row.run_index))
}

/// Runs every sweep job. Failed runs become flagged rows instead of aborting
/// the sweep. With `out`, per-run files go under `out/runs/` and the tables to
/// `out/tradeoff.csv` and `out/summary.csv`.
pub fn run_sweep(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<TradeoffRow>> {
    let g = model_graph(cfg)?;
    let data = load_dataset(&cfg.dataset)?;
    let mut rows = Vec::new();
    for (scheme, run_index) in sweep_jobs(cfg) {
        match run_single(cfg, &g, &data, scheme, run_index) {
            Ok(run) => {
                if let Some(out) = out {
                    write_run(&run_dir(out, &run.row), &run)?;
                }
                rows.push(run.row);
            }
            Err(_) => rows.push(TradeoffRow {
                scheme: scheme.label(),
                r: scheme.ratio(),
                run_index,
                seed: cfg.train.seed.wrapping_add(run_index as u64),
                mean_lrt: None,
                best_eval_accuracy: None,
                flagged: true,
            }),
        }
    }
    sort_rows(&mut rows);
    if let Some(out) = out {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        write_tradeoff_csv(&out.join("tradeoff.csv"), &rows)?;
        write_summary_csv(&out.join("summary.csv"), &summarize(&rows))?;
    }
    Ok(rows)
}
