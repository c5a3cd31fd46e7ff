use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mixprec_core::assign::lrt;
use mixprec_core::fpnum::FpFormat;
use mixprec_core::graph::group_tensors;
use mixprec_core::npreduce::{verify_reduction, KnapsackInstance};

use mixprec::config::{ExperimentConfig, Settings};
use mixprec::experiment::{forced_tensors, model_graph, plan_for, run_sweep, sweep_jobs, train_to_dir};
use mixprec::report::summarize;

#[derive(Parser)]
#[command(name = "mixprec", version, about = "Precision assignment experiments for low-precision training")]
struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Training seed (`train.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (`output.dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SchemeArgs {
    /// fp32, unif, op, op_prime, ours or ours_no_promo.
    #[arg(long)]
    scheme: Option<String>,
    /// Target low-precision ratio for the demotion schemes.
    #[arg(long)]
    r: Option<f64>,
    /// decreasing, increasing or random.
    #[arg(long)]
    order: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Describe a floating-point format fp(e, m, b).
    Formats {
        #[arg(short, long = "exp-bits")]
        e: u32,
        #[arg(short, long = "man-bits")]
        m: u32,
        #[arg(short, long = "bias", default_value_t = 0, allow_negative_numbers = true)]
        b: i32,
        /// Also list every representable value.
        #[arg(long)]
        values: bool,
    },
    /// Print the precision assignment of the configured model.
    Assign {
        #[command(flatten)]
        scheme: SchemeArgs,
    },
    /// Train once and write epochs.csv, summary.json and a tradeoff row.
    Train {
        #[command(flatten)]
        scheme: SchemeArgs,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train every (scheme, r, repeat) combination and write tradeoff tables.
    Sweep {
        /// Comma-separated scheme names.
        #[arg(long)]
        schemes: Option<String>,
        /// Comma-separated ratios, or `deciles`.
        #[arg(long = "r-values")]
        r_values: Option<String>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Build the knapsack reduction for an instance and check it exhaustively.
    Reduce {
        /// Comma-separated item weights.
        #[arg(long, value_delimiter = ',', required = true)]
        weights: Vec<u64>,
        /// Comma-separated item profits.
        #[arg(long, value_delimiter = ',', required = true)]
        profits: Vec<u64>,
        #[arg(long)]
        capacity: u64,
        /// Loss scale exponent; the smallest working value by default.
        #[arg(long)]
        k: Option<u32>,
        #[arg(long)]
        l: Option<u32>,
    },
}

fn settings(cli: &Cli) -> Result<Settings> {
    let mut s = match &cli.config {
        Some(path) => Settings::load(path)?,
        None => Settings::default(),
    };
    for o in &cli.overrides {
        s.apply(o)?;
    }
    if let Some(seed) = cli.seed {
        s.set("train.seed", &seed.to_string())?;
    }
    if let Some(out) = &cli.out {
        s.set("output.dir", &out.to_string_lossy())?;
    }
    Ok(s)
}

fn apply_scheme(s: &mut Settings, a: &SchemeArgs) -> Result<()> {
    if let Some(v) = &a.scheme {
        s.set("scheme.kind", v)?;
    }
    if let Some(v) = a.r {
        s.set("scheme.r", &v.to_string())?;
    }
    if let Some(v) = &a.order {
        s.set("scheme.order", v)?;
    }
    Ok(())
}

fn formats(e: u32, m: u32, b: i32, values: bool) -> Result<()> {
    let f = FpFormat::new(e, m, b)?;
    println!("format: {f}");
    println!("bitwidth: {}", f.bitwidth());
    println!("max: {:e}", f.max_magnitude());
    println!("min_normal: {:e}", f.min_normal());
    println!("min_subnormal: {:e}", f.min_subnormal());
    if values {
        for v in f.enumerate_values()? {
            println!("{v:e}");
        }
    }
    Ok(())
}

fn assign(cfg: &ExperimentConfig) -> Result<()> {
    let g = model_graph(cfg)?;
    let (plan, _) = plan_for(&g, cfg.scheme, &forced_tensors(&g, cfg), &cfg.train)?;
    let mut group_of = vec![0; g.num_tensors()];
    for (gi, group) in group_tensors(&g).iter().enumerate() {
        for id in &group.members {
            group_of[id.0] = gi;
        }
    }
    println!("id,tensor,kind,size,group,level");
    for t in g.tensors() {
        let level = plan.assignment().map_or("fp32", |a| a.level(t.id).name());
        println!(
            "{},{},{},{},{},{}",
            t.id.0,
            t.label(),
            t.kind.name(),
            t.size,
            group_of[t.id.0],
            level
        );
    }
    let ratio = plan.assignment().map_or(0.0, |a| lrt(&g, a));
    println!("# scheme={} lrt={ratio}", cfg.scheme.label());
    Ok(())
}

fn reduce(weights: Vec<u64>, profits: Vec<u64>, capacity: u64, k: Option<u32>, l: Option<u32>) -> Result<()> {
    let inst = KnapsackInstance::new(weights, profits, capacity)?;
    let report = verify_reduction(&inst, k, l)?;
    let ri = &report.instance;
    println!("hi: {}", ri.formats.hi);
    println!("lo: {}", ri.formats.lo);
    println!("k: {}  l: {}", ri.formats.k, ri.formats.l);
    println!("x: {:?}", ri.x);
    println!("y: {:e}", ri.y);
    println!("r: {}", ri.r);
    println!("tensors: {}  size: {}", ri.num_tensors(), ri.size());
    let bits = |sel: &[bool]| sel.iter().map(|&b| if b { '1' } else { '0' }).collect::<String>();
    println!(
        "knapsack optimum: {} (profit {})",
        bits(&report.knapsack.selection),
        report.knapsack.profit
    );
    println!(
        "tradeoff optimum: accuracy {} lrt {}",
        report.tradeoff.accuracy, report.tradeoff.lrt
    );
    println!(
        "extracted: {} (weight {}, profit {})",
        bits(&report.extracted),
        report.extracted_weight(),
        report.extracted_profit()
    );
    if !report.holds() {
        bail!("the extracted selection is not an optimal knapsack solution");
    }
    println!("reduction holds");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut s = settings(&cli)?;
    match cli.command {
        Command::Formats { e, m, b, values } => formats(e, m, b, values),
        Command::Assign { scheme } => {
            apply_scheme(&mut s, &scheme)?;
            assign(&ExperimentConfig::from_settings(&s)?)
        }
        Command::Train { scheme, epochs } => {
            apply_scheme(&mut s, &scheme)?;
            if let Some(e) = epochs {
                s.set("train.epochs", &e.to_string())?;
            }
            let cfg = ExperimentConfig::from_settings(&s)?;
            let run = train_to_dir(&cfg, &cfg.output_dir)?;
            println!(
                "{}: best eval accuracy {}, mean lrt {}, {} promotions -> {}",
                run.row.scheme,
                run.summary.best_eval_accuracy,
                run.summary.mean_lrt,
                run.summary.promotions.len(),
                cfg.output_dir.display()
            );
            Ok(())
        }
        Command::Sweep {
            schemes,
            r_values,
            repeats,
            epochs,
        } => {
            for (key, value) in [
                ("sweep.schemes", schemes),
                ("sweep.r_values", r_values),
                ("sweep.repeats", repeats.map(|v| v.to_string())),
                ("train.epochs", epochs.map(|v| v.to_string())),
            ] {
                if let Some(v) = value {
                    s.set(key, &v)?;
                }
            }
            let cfg = ExperimentConfig::from_settings(&s)?;
            eprintln!("running {} jobs", sweep_jobs(&cfg).len());
            let rows = run_sweep(&cfg, Some(&cfg.output_dir))?;
            for p in summarize(&rows) {
                let r = p.r.map_or_else(|| "-".to_string(), |r| r.to_string());
                let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
                println!(
                    "{:<16} r={:<4} runs={} failed={} lrt={} acc={} [{}, {}]",
                    p.scheme,
                    r,
                    p.runs,
                    p.failed,
                    fmt(p.mean_lrt),
                    fmt(p.mean_accuracy),
                    fmt(p.min_accuracy),
                    fmt(p.max_accuracy)
                );
            }
            let flagged = rows.iter().filter(|r| r.flagged).count();
            if flagged > 0 {
                eprintln!("{flagged} runs flagged");
            }
            Ok(())
        }
        Command::Reduce {
            weights,
            profits,
            capacity,
            k,
            l,
        } => reduce(weights, profits, capacity, k, l).context("reduce"),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
