use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use stabletrack::dataio::{read_report_json, write_report, Dataset, MetricsReport, ReportFormat, Split};
use stabletrack::decorr::{demo_basis, demo_batch, demo_control_batch, optimize_weights, weight_entropy, DecorrConfig, WeightSolution};
use stabletrack::diffnet::load_checkpoint;
use stabletrack::synth::build_dataset;
use stabletrack::trackeval::{curves_csv, evaluate_split, NetworkPredictor};
use stabletrack::trainloop::{train, TrainPaths};

use crate::config::RunConfig;

/// Environment variable naming the default dataset root.
pub const DATA_ENV: &str = "STABLETRACK_DATA";

#[derive(Debug, Parser)]
#[command(name = "stabletrack", version, about = "Synthetic point-cloud tracking with decorrelated sample weighting")]
pub struct Cli {
    /// JSON run configuration (defaults when omitted).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Config override `section.key=value`; may repeat.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for the subcommand's randomness (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for tracklet-level parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a tracker.
    Train {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        /// Checkpoint path; the `.ckpt` extension may be omitted.
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Report path; `.json` writes JSON, anything else CSV.
        #[arg(long)]
        out: PathBuf,
        /// Also write success/precision curves as CSV.
        #[arg(long)]
        curves: Option<PathBuf>,
    },
    /// Compare two JSON reports row by row (deltas are b − a).
    Report {
        #[arg(long = "a")]
        a: PathBuf,
        #[arg(long = "b")]
        b: PathBuf,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve sample weights on a built-in confounded batch and print JSON.
    DecorrDemo {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct DataArg {
    /// Dataset root.
    #[arg(long = "data", env = DATA_ENV)]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    match flag.or_else(|| fallback.clone()) {
        Some(p) => Ok(p),
        None => bail!("no {name} path: pass --{name} or set io.{name} in the config"),
    }
}

/// Writes the resolved config next to an output artifact.
fn echo_config(cfg: &RunConfig, path: &Path) -> Result<()> {
    fs::write(path, cfg.to_json() + "\n").with_context(|| format!("writing {}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => fs::create_dir_all(d).with_context(|| format!("creating {}", d.display())),
        _ => Ok(()),
    }
}

fn sidecar(artifact: &Path) -> PathBuf {
    let stem = artifact.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    artifact.with_file_name(format!("{stem}.config.json"))
}

fn resolve_checkpoint(p: &Path) -> PathBuf {
    if !p.exists() && p.extension().is_none() {
        let with = p.with_extension("ckpt");
        if with.exists() {
            return with;
        }
    }
    p.to_path_buf()
}

/// Applies `--seed` to the seed that the subcommand consumes.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, crate::config::ConfigError> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        match cli.command {
            Command::Gen { .. } => cfg.dataset.seed = seed,
            Command::Train { .. } | Command::DecorrDemo { .. } => cfg.train.seed = seed,
            Command::Eval { .. } => cfg.eval.seed = seed,
            Command::Report { .. } => {}
        }
    }
    Ok(cfg)
}

pub fn run(cli: Cli, cfg: RunConfig) -> Result<()> {
    if cli.print_config {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new().num_threads(cli.jobs.max(1)).build_global().context("starting worker pool")?;
    match cli.command {
        Command::Gen { out } => {
            let out = required(out, &cfg.io.data, "out")?;
            let manifest = build_dataset(&cfg.dataset.to_dataset_config(), cfg.dataset.seed, &out)?;
            echo_config(&cfg, &out.join("config.json"))?;
            let n: usize = manifest.splits.values().map(Vec::len).sum();
            log::info!("wrote {n} tracklets to {}", out.display());
        }
        Command::Train { data, out, resume } => {
            let data = required(data.path, &cfg.io.data, "data")?;
            let out = required(out, &cfg.io.out, "out")?;
            let paths = TrainPaths { data, out: out.clone(), resume: resume.map(|p| resolve_checkpoint(&p)) };
            let outcome = train(&cfg.train_config(), &paths)?;
            echo_config(&cfg, &out.join("config.json"))?;
            log::info!("{} batches; final checkpoint {}", outcome.records.len(), outcome.final_checkpoint.display());
        }
        Command::Eval { ckpt, data, split, out, curves } => {
            let data = required(data.path, &cfg.io.data, "data")?;
            let ckpt = load_checkpoint(&resolve_checkpoint(&ckpt))?;
            let (net, _, header) = ckpt.into_network()?;
            let dataset = Dataset::open(&data)?;
            let eval_cfg = cfg.eval_config(&header.net);
            let (report, results) =
                evaluate_split(&NetworkPredictor(&net), &dataset, split.into(), &eval_cfg, cfg.eval.seed, &cfg.fingerprint())?;
            ensure_parent(&out)?;
            write_report(&report, &out, ReportFormat::from_path(&out))?;
            echo_config(&cfg, &sidecar(&out))?;
            if let Some(c) = curves {
                ensure_parent(&c)?;
                fs::write(&c, curves_csv(&results)).with_context(|| format!("writing {}", c.display()))?;
            }
        }
        Command::Report { a, b, out } => {
            let ra = read_report_json(&a)?;
            let rb = read_report_json(&b)?;
            let table = compare_reports(&ra, &rb);
            match out {
                Some(p) => {
                    ensure_parent(&p)?;
                    fs::write(&p, &table).with_context(|| format!("writing {}", p.display()))?;
                    echo_config(&cfg, &sidecar(&p))?;
                }
                None => print!("{table}"),
            }
        }
        Command::DecorrDemo { out } => {
            let text = serde_json::to_string_pretty(&decorr_demo(cfg.train.seed, &cfg.train.decorr)?)? + "\n";
            match out {
                Some(p) => {
                    ensure_parent(&p)?;
                    fs::write(&p, &text).with_context(|| format!("writing {}", p.display()))?;
                    echo_config(&cfg, &sidecar(&p))?;
                }
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

/// Rows of `a` matched by (split, category, flag) in `b`, with b − a deltas.
pub fn compare_reports(a: &MetricsReport, b: &MetricsReport) -> String {
    let mut out = String::from(
        "split,category,observed_flag,success_a,success_b,success_delta,precision_a,precision_b,precision_delta\n",
    );
    for ra in a.rows() {
        let Some(rb) = b
            .rows()
            .find(|r| r.split() == ra.split() && r.category() == ra.category() && r.observed_flag() == ra.observed_flag())
        else {
            continue;
        };
        out.push_str(&format!(
            "{},{},{},{:.3},{:.3},{:+.3},{:.3},{:.3},{:+.3}\n",
            ra.split(),
            ra.category(),
            ra.observed_flag().as_str(),
            ra.success(),
            rb.success(),
            rb.success() - ra.success(),
            ra.precision(),
            rb.precision(),
            rb.precision() - ra.precision()
        ));
    }
    out
}

const HISTOGRAM_BINS: usize = 10;

/// Counts of `B·w` (weight relative to uniform) in equal bins over
/// `[0, 2)`, plus an overflow bin.
fn weight_histogram(w: &[f64]) -> Vec<usize> {
    let b = w.len() as f64;
    let mut bins = vec![0; HISTOGRAM_BINS + 1];
    for &v in w {
        let k = (v * b / 2.0 * HISTOGRAM_BINS as f64).floor() as usize;
        bins[k.min(HISTOGRAM_BINS)] += 1;
    }
    bins
}

fn solution_json(s: &WeightSolution) -> serde_json::Value {
    json!({
        "initial_objective": s.initial_objective,
        "final_objective": s.final_objective,
        "relative_decrease": (s.initial_objective - s.final_objective) / s.initial_objective,
        "best_iteration": s.best_iteration,
        "weight_entropy": weight_entropy(&s.weights),
        "histogram": weight_histogram(&s.weights),
        "weights": s.weights,
    })
}

/// Weight solve on the built-in confounded batch and its independent control.
pub fn decorr_demo(seed: u64, config: &DecorrConfig) -> Result<serde_json::Value> {
    let basis = demo_basis(seed, config);
    let conf = optimize_weights(&demo_batch(seed), &basis, config)?;
    let ctrl = optimize_weights(&demo_control_batch(seed), &basis, config)?;
    Ok(json!({
        "seed": seed,
        "config": config,
        "histogram_bins": format!("{HISTOGRAM_BINS} bins of B*w over [0, 2), then overflow"),
        "confounded": solution_json(&conf),
        "control": solution_json(&ctrl),
    }))
}
