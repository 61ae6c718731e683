use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use coper::coperset::{build_dataset, verify_dataset, Dataset};
use coper::evalkit::{emit_category_bar, emit_heatmap, emit_loss_curves, evaluate, EvalReport};
use coper::experiments::{run_experiment, ExperimentProfile, ProfileName, RunSummary, Scale};
use coper::ropelab::{check_relative_invariance, invariance_premise_test, rule_periodicity_counterexample, PhaseConfig};
use coper::seqmodel::{Checkpoint, ModelConfig, PeKind, Transformer};
use coper::trainer::{mean_metrics, train, RunLog, TrainConfig};
use coper::Error;

#[derive(Parser, Debug)]
#[command(name = "coper", version, about = "Periodic composition benchmarks and a small transformer to test on them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset: manifest plus one JSONL file per split.
    Gen {
        #[arg(long)]
        profile: ProfileName,
        #[command(flatten)]
        opts: ProfileOpts,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-check every record of a dataset directory.
    Verify {
        dir: PathBuf,
    },
    /// Train a model on a profile's dataset (or on `--data`).
    Train {
        #[arg(long)]
        profile: ProfileName,
        #[command(flatten)]
        opts: ProfileOpts,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Existing dataset directory; generated from the profile otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Greedy-decode the test splits and write grids and category tables.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Samples per split.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Print numerical witnesses as JSON.
    Analyze {
        #[arg(value_enum)]
        what: Analysis,
        #[arg(long, default_value_t = 4)]
        period: u64,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        /// Comma-separated integers for `premise`.
        #[arg(long)]
        seq: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-render SVG/CSV figures from a run or eval directory.
    Plot {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate, train, evaluate and plot in one go.
    RunExperiment {
        profile: ProfileName,
        #[command(flatten)]
        opts: ProfileOpts,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Several seeds, each under `<out>/seed-<n>`, plus a mean summary.
        #[arg(long, value_delimiter = ',', conflicts_with = "seed")]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
struct ProfileOpts {
    /// Desk-scale settings (default).
    #[arg(long, conflicts_with = "paper")]
    desk: bool,
    /// Published-scale settings.
    #[arg(long)]
    paper: bool,
    /// JSON file merged over the profile; flags win over the file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pe: Option<PeArg>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum PeArg {
    Rope,
    Sinpe,
    None,
}

impl From<PeArg> for PeKind {
    fn from(p: PeArg) -> Self {
        match p {
            PeArg::Rope => PeKind::Rope,
            PeArg::Sinpe => PeKind::Sinpe,
            PeArg::None => PeKind::None,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Analysis {
    RopeCounterexample,
    RelativeInvariance,
    Premise,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn resolve(name: ProfileName, opts: &ProfileOpts) -> Result<ExperimentProfile> {
    let scale = if opts.paper { Scale::Paper } else { Scale::Desk };
    let mut profile = ExperimentProfile::resolve(name, scale);
    if let Some(path) = &opts.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let over: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut base = serde_json::to_value(&profile)?;
        merge(&mut base, over);
        profile = serde_json::from_value(base).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    }
    if let Some(pe) = opts.pe {
        profile.model.pe_kind = pe.into();
    }
    if let Some(layers) = opts.layers {
        profile.model.n_layers = layers;
    }
    if let Some(epochs) = opts.epochs {
        profile.train.epochs = epochs;
        profile.train.eval_every = profile.train.eval_every.min(epochs);
    }
    profile.validate()?;
    Ok(profile)
}

#[derive(Serialize)]
struct Stamp<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    profile: Option<String>,
    scale: Option<Scale>,
    seed: Option<u64>,
    created_unix: u64,
}

fn stamp(dir: &Path, command: &str, profile: Option<&ExperimentProfile>, seed: Option<u64>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let s = Stamp {
        tool: "coper",
        version: env!("CARGO_PKG_VERSION"),
        command,
        profile: profile.map(|p| p.name.to_string()),
        scale: profile.map(|p| p.scale),
        seed,
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    };
    write_json(&dir.join("stamp.json"), &s)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn write_report(dir: &Path, report: &EvalReport, title: &str) -> Result<()> {
    write_json(&dir.join("eval.json"), report)?;
    emit_heatmap(&report.grid, dir, "heatmap", title)?;
    emit_category_bar(&[(title.to_string(), report.category)], dir, "categories", title)?;
    Ok(())
}

/// The title a run directory was rendered with.
fn run_title(run: &Path) -> Option<String> {
    let text = std::fs::read_to_string(run.join("profile.json")).ok()?;
    let p: ExperimentProfile = serde_json::from_str(&text).ok()?;
    Some(format!("{} ({})", p.name, p.model.pe_kind))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { profile, opts, seed, out } => {
            let p = resolve(profile, &opts)?;
            let ds = build_dataset(&p.task, p.counts, seed)?;
            ds.write(&out)?;
            stamp(&out, "gen", Some(&p), Some(seed))?;
            print_json(&json!({ "out": out, "counts": ds.manifest.counts }))
        }
        Command::Verify { dir } => {
            let report = verify_dataset(&dir)?;
            match &report.failure {
                None => print_json(&json!({ "ok": true, "checked": report.checked })),
                Some(f) => Err(Error::Config(format!("{}:{}: {}", f.file, f.line, f.reason)).into()),
            }
        }
        Command::Train {
            profile,
            opts,
            seed,
            out,
            data,
        } => {
            let p = resolve(profile, &opts)?;
            let ds = match &data {
                Some(dir) => Dataset::load(dir)?,
                None => {
                    let ds = build_dataset(&p.task, p.counts, seed)?;
                    ds.write(&out.join("dataset"))?;
                    ds
                }
            };
            let mut model = Transformer::<f32>::new(ModelConfig {
                init_seed: seed,
                ..p.model.clone()
            })?;
            let cfg = TrainConfig { seed, ..p.train.clone() };
            let outcome = train(&mut model, &ds, &cfg)?;
            outcome.checkpoint.save(&out.join("checkpoint"))?;
            outcome.log.write(&out)?;
            emit_loss_curves(&outcome.log, &out, "curves", &p.name.to_string())?;
            stamp(&out, "train", Some(&p), Some(seed))?;
            print_json(&outcome.log.last())
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            limit,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let ds = Dataset::load(&data)?;
            let report = evaluate(&ckpt, &ds, limit)?;
            std::fs::create_dir_all(&out)?;
            write_report(&out, &report, &report.model)?;
            stamp(&out, "eval", None, Some(ckpt.master_seed))?;
            print_json(&report.category)
        }
        Command::Analyze {
            what,
            period,
            trials,
            seq,
            out,
        } => {
            let value = match what {
                Analysis::RopeCounterexample => serde_json::to_value(rule_periodicity_counterexample())?,
                Analysis::RelativeInvariance => {
                    let dev = check_relative_invariance(PhaseConfig::new(period)?, trials)?;
                    json!({ "period": period, "trials": trials, "max_deviation": dev })
                }
                Analysis::Premise => {
                    let text = seq.ok_or_else(|| Error::Config("premise needs --seq".into()))?;
                    let values = text
                        .split(',')
                        .map(|t| t.trim().parse::<i64>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| Error::Config(format!("--seq: {e}")))?;
                    let outcome = invariance_premise_test(&values, period as usize)?;
                    json!({ "period": period, "sequence": values, "outcome": outcome })
                }
            };
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                write_json(&dir.join("analysis.json"), &value)?;
                stamp(&dir, "analyze", None, None)?;
            }
            print_json(&value)
        }
        Command::Plot { run, out } => {
            let out = out.unwrap_or_else(|| run.clone());
            let title = run_title(&run);
            let mut made = Vec::new();
            let log_path = run.join("runlog.json");
            if log_path.exists() {
                let log: RunLog = serde_json::from_str(&std::fs::read_to_string(&log_path)?)
                    .map_err(|e| Error::Config(format!("{}: {e}", log_path.display())))?;
                emit_loss_curves(&log, &out, "curves", title.as_deref().unwrap_or("loss"))?;
                made.push("curves");
            }
            let eval_path = run.join("eval.json");
            if eval_path.exists() {
                let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(&eval_path)?)
                    .map_err(|e| Error::Config(format!("{}: {e}", eval_path.display())))?;
                write_report(&out, &report, title.as_deref().unwrap_or(&report.model))?;
                made.extend(["heatmap", "categories"]);
            }
            if made.is_empty() {
                return Err(Error::Config(format!("{} holds neither runlog.json nor eval.json", run.display())).into());
            }
            stamp(&out, "plot", None, None)?;
            print_json(&json!({ "out": out, "figures": made }))
        }
        Command::RunExperiment {
            profile,
            opts,
            seed,
            seeds,
            out,
        } => {
            let p = resolve(profile, &opts)?;
            match seeds {
                None => {
                    let a = run_experiment(&p, seed, Some(&out))?;
                    stamp(&out, "run-experiment", Some(&p), Some(seed))?;
                    print_json(&a.summary)
                }
                Some(seeds) => {
                    let mut summaries: Vec<RunSummary> = Vec::new();
                    for s in &seeds {
                        let dir = out.join(format!("seed-{s}"));
                        summaries.push(run_experiment(&p, *s, Some(&dir))?.summary);
                        stamp(&dir, "run-experiment", Some(&p), Some(*s))?;
                    }
                    let metrics: Vec<_> = summaries.iter().map(|s| s.metrics()).collect();
                    let agg = json!({
                        "profile": p.name,
                        "seeds": seeds,
                        "per_seed": metrics,
                        "mean": mean_metrics(&metrics),
                    });
                    write_json(&out.join("summary.json"), &agg)?;
                    stamp(&out, "run-experiment", Some(&p), None)?;
                    print_json(&agg)
                }
            }
        }
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("COPER_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::Config(format!("COPER_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(err) if err.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match configure_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
