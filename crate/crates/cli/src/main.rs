//! `ssp`: generate data, train, evaluate, run ablations and export analyses.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric abort,
//! 4 missing artifact, 1 anything else.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ssp_core::analysis::{decay_csv, decay_curve, gates_csv, paths_csv, prompts_csv, ConnectivityGraph};
use ssp_core::data::{generate_sample, index_hash, read_dataset, write_dataset, Split};
use ssp_core::model::{load_checkpoint, FreezePolicy};
use ssp_core::prompt::Strategy;
use ssp_core::run::{run_ablation, run_strategy_sweep, run_training, RunConfig, CONFIG_FILE, EXPORTS_DIR};
use ssp_core::train::evaluate;
use ssp_core::{Result, SspError};

#[derive(Parser)]
#[command(name = "ssp", version, about = "State-space prompting for video classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset.
    Gen(Common),
    /// Train one model into a run directory.
    Train(TrainArgs),
    /// Evaluate a run's checkpoint on the validation split.
    Eval(EvalArgs),
    /// Train the module and gate ablation grids.
    Ablate(AblateArgs),
    /// Export decay curves, path lengths, update gates and prompts.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (dataset for `gen`, run root otherwise).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    policy: Option<FreezePolicy>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long = "n-ifs")]
    n_ifs: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory written by `train`.
    run: PathBuf,
    /// Dataset directory; defaults to the run's `data_dir`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "best")]
    checkpoint: String,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    /// Sweep the four sampling strategies instead of the ablation grids.
    #[arg(long)]
    strategies: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Run directory written by `train`.
    run: PathBuf,
    #[arg(long)]
    decay: bool,
    #[arg(long)]
    paths: bool,
    #[arg(long)]
    gates: bool,
    #[arg(long)]
    prompts: bool,
    /// Class and index of the synthetic clip to trace.
    #[arg(long, default_value_t = 0)]
    class: usize,
    #[arg(long, default_value_t = 0)]
    sample: usize,
    #[arg(long, default_value = "best")]
    checkpoint: String,
}

fn deterministic() -> bool {
    std::env::var("SSP_DETERMINISTIC").is_ok_and(|v| v == "1")
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = &c.out {
        cfg.out = v.clone();
    }
    if let Some(v) = &c.data {
        cfg.data_dir = v.clone();
    }
    if let Some(v) = c.policy {
        cfg.policy = v;
    }
    if let Some(v) = c.strategy {
        cfg.strategy = v;
    }
    if let Some(v) = c.n_ifs {
        cfg.n_ifs = v;
    }
    if let Some(v) = c.threads {
        cfg.threads = v;
    }
    if let Some(v) = c.epochs {
        cfg.epochs = v;
        cfg.warmup_epochs = cfg.warmup_epochs.min(v);
    }
    if let Some(v) = c.lr {
        cfg.lr = v;
    }
    if deterministic() {
        cfg.threads = 1;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| SspError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn cmd_gen(c: &Common) -> Result<()> {
    let mut cfg = resolve(c)?;
    if let Some(seed) = c.seed {
        cfg.data_seed = seed;
    }
    let dir = c.out.clone().unwrap_or_else(|| cfg.data_dir.clone());
    let index = write_dataset(&cfg.synth_spec(), &dir)?;
    let val = index.iter().filter(|e| e.split == Split::Val).count();
    println!(
        "dataset {}: {} clips, {} classes, {} train / {val} val",
        dir.display(),
        index.len(),
        cfg.n_classes,
        index.len() - val
    );
    println!("index sha256 {}", index_hash(&dir)?);
    Ok(())
}

fn cmd_train(c: &Common) -> Result<()> {
    let cfg = resolve(c)?;
    let data = read_dataset(&cfg.data_dir)?;
    let (model, report) = run_training(&cfg, &data, &cfg.out)?;
    let (trainable, total) = model.parameter_counts(cfg.policy);
    for row in report.history.iter().filter(|r| r.split == "val") {
        println!(
            "epoch {:>3}  val loss {:.4}  top1 {:.4}  lr {:.2e}",
            row.epoch, row.loss, row.top1, row.lr
        );
    }
    println!("trainable parameters {trainable} / {total}");
    println!(
        "best val top1 {:.4} at epoch {}, final {:.4}",
        report.best_val_top1, report.best_epoch, report.final_val_top1
    );
    let frozen = report.frozen_before.len();
    let status = if report.frozen_unchanged() {
        "unchanged"
    } else {
        "CHANGED"
    };
    println!("frozen tensors: {frozen} {status}");
    println!("run directory {}", cfg.out.display());
    Ok(())
}

fn run_config(run: &Path) -> Result<RunConfig> {
    RunConfig::load(&run.join(CONFIG_FILE))
}

fn checkpoint_dir(run: &Path, name: &str) -> PathBuf {
    run.join("checkpoints").join(name)
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let cfg = run_config(&a.run)?;
    let model = load_checkpoint(&checkpoint_dir(&a.run, &a.checkpoint))?;
    let data_dir = a.data.clone().unwrap_or(cfg.data_dir);
    let data = read_dataset(&data_dir)?;
    let (loss, top1) = evaluate(&model, &data.val)?;
    println!("val loss {loss:.6}  top1 {top1:.4}  ({} clips)", data.val.len());
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let cfg = resolve(&a.common)?;
    let data = read_dataset(&cfg.data_dir)?;
    let (rows, summary) = if a.strategies {
        run_strategy_sweep(&cfg, &data, &cfg.out, a.seeds)?
    } else {
        run_ablation(&cfg, &data, &cfg.out, a.seeds)?
    };
    for r in &rows {
        println!(
            "{:<18} seed {:>3}  best {:.4}  final {:.4}",
            r.arm, r.seed, r.best_val_top1, r.final_val_top1
        );
    }
    for s in &summary {
        println!("{:<18} mean {:.4} ± {:.4} over {}", s.arm, s.mean, s.sd, s.runs);
    }
    Ok(())
}

fn cmd_analyze(a: &AnalyzeArgs) -> Result<()> {
    let cfg = run_config(&a.run)?;
    let model = load_checkpoint(&checkpoint_dir(&a.run, &a.checkpoint))?;
    let all = !(a.decay || a.paths || a.gates || a.prompts);
    let exports = a.run.join(EXPORTS_DIR);
    fs::create_dir_all(&exports).map_err(|e| SspError::Io {
        path: exports.clone(),
        source: e,
    })?;
    let mc = &model.config;
    let video = generate_sample(&cfg.synth_spec(), a.class, a.sample)?;
    let trace = model.trace(&video)?;
    let mut written = 0;
    if all || a.decay {
        for (l, lt) in trace.iter().enumerate() {
            for ch in 0..lt.gates.delta.shape()[1] {
                let curve = decay_curve(&lt.gates, ch)?;
                write(&exports.join(format!("decay_layer{l}_ch{ch}.csv")), &decay_csv(&curve))?;
                written += 1;
            }
        }
    }
    if all || a.gates {
        for l in 0..trace.len() {
            write(
                &exports.join(format!("gates_layer{l}.csv")),
                &gates_csv(&trace, l, mc.width / mc.patch_w)?,
            )?;
            written += 1;
        }
    }
    if all || a.paths {
        let graph = ConnectivityGraph::from_config(mc);
        write(&exports.join("paths.csv"), &paths_csv(&graph)?)?;
        written += 1;
        println!("max hop count over the sequence: {}", graph.diameter()?);
    }
    if all || a.prompts {
        for l in 0..trace.len() {
            write(&a.run.join(format!("layer{l}_prompts.csv")), &prompts_csv(&trace, l)?)?;
            written += 1;
        }
    }
    println!("wrote {written} files for {}", a.run.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(c) => cmd_gen(c),
        Command::Train(t) => cmd_train(&t.common),
        Command::Eval(e) => cmd_eval(e),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Analyze(a) => cmd_analyze(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
