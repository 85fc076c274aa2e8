//! Command-line entry point: dataset generation, training, evaluation,
//! the ablation grid and the gradient-check suite.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure. Every run
//! persists its resolved configuration next to its outputs so any
//! artifact can be reproduced from the sidecar file alone.

use anyhow::{bail, Context};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use crosspath::ablate::ablate;
use crosspath::checkpoint::{load_checkpoint, save_checkpoint};
use crosspath::data::{generate_dataset, read_dataset, split, write_dataset};
use crosspath::eval::evaluate_map;
use crosspath::gradcheck::{end_to_end_check, run_op_suite};
use crosspath::model::ModelConfig;
use crosspath::rng::SplitMix64;
use crosspath::train::{TrainConfig, Trainer};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "crosspath",
    about = "Train set-prediction transformers with decoding-path augmentation and cross-path consistency on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset (JSONL).
    GenData(GenDataArgs),
    /// Train a model on a dataset file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset file.
    Eval(EvalArgs),
    /// Run the decoder-sharing × consistency grid and the path sweep.
    Ablate(AblateArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, serde::Serialize)]
struct GenDataArgs {
    /// Output JSONL path.
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes.
    #[arg(long, default_value_t = 512)]
    scenes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, serde::Serialize, Clone)]
struct TrainArgs {
    /// Input dataset (JSONL from gen-data).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint, logs and resolved config.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated decoding paths, e.g. 1,2,3,4 (must include 1).
    #[arg(long, default_value = "1,2,3,4")]
    paths: String,
    /// Share one decoder across paths (true) or give each path its own.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    share_decoder: bool,
    /// Enable the cross-path consistency loss.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    cpc: bool,
    #[arg(long, default_value_t = 1000)]
    steps: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep encoder and patch embedding at their initial values.
    #[arg(long, default_value_t = false)]
    freeze_encoder: bool,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// Fraction of the dataset used for training; the rest evaluates.
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    /// Evaluate every N steps (0 = final evaluation only).
    #[arg(long, default_value_t = 0)]
    eval_every: u64,
}

#[derive(Args, serde::Serialize)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, serde::Serialize)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 600)]
    steps: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, serde::Serialize)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_paths(spec: &str) -> anyhow::Result<Vec<u8>> {
    let paths: Vec<u8> = spec
        .split(',')
        .map(|p| p.trim().parse::<u8>().context("paths must be integers"))
        .collect::<anyhow::Result<_>>()?;
    if paths.is_empty() || !paths.contains(&1) {
        bail!("--paths must include path 1");
    }
    Ok(paths)
}

fn write_config(path: &Path, command: &str, args: &impl serde::Serialize) -> anyhow::Result<()> {
    let body = serde_json::json!({ "command": command, "args": args });
    std::fs::write(path, serde_json::to_string_pretty(&body)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_gen_data(args: GenDataArgs) -> anyhow::Result<()> {
    let scenes = generate_dataset(args.scenes, args.seed)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    write_dataset(&scenes, &args.out)?;
    write_config(&args.out.with_extension("config.json"), "gen-data", &args)?;
    println!(
        "wrote {} scenes to {} (seed {})",
        scenes.len(),
        args.out.display(),
        args.seed
    );
    Ok(())
}

fn train_config_from(args: &TrainArgs, paths: Vec<u8>) -> TrainConfig {
    TrainConfig {
        steps: args.steps,
        batch_size: args.batch_size,
        active_paths: paths,
        share_decoder: args.share_decoder,
        cpc_enabled: args.cpc,
        freeze_encoder: args.freeze_encoder,
        seed: args.seed,
        eval_every: args.eval_every,
        ..TrainConfig::default()
    }
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let paths = parse_paths(&args.paths)?;
    let scenes = read_dataset(&args.data)?;
    let mut split_rng = SplitMix64::new(args.seed);
    let (train_scenes, eval_scenes) = split(&scenes, args.train_fraction, &mut split_rng)?;

    std::fs::create_dir_all(&args.out)?;
    write_config(&args.out.join("resolved_config.json"), "train", &args)?;

    let cfg = train_config_from(&args, paths);
    let mut trainer = Trainer::new(ModelConfig::default(), cfg)?;
    let eval_ref = if eval_scenes.is_empty() { None } else { Some(&eval_scenes[..]) };
    let (curve, events) = trainer.run(&train_scenes, eval_ref)?;

    let mut losses = std::io::BufWriter::new(std::fs::File::create(args.out.join("losses.jsonl"))?);
    for (step, report) in curve.iter().enumerate() {
        let line = serde_json::json!({ "step": step + 1, "loss": report });
        writeln!(losses, "{line}")?;
    }
    losses.flush()?;

    let mut stream = std::io::BufWriter::new(std::fs::File::create(args.out.join("events.jsonl"))?);
    for event in &events {
        writeln!(stream, "{}", serde_json::to_string(event)?)?;
    }
    stream.flush()?;

    save_checkpoint(&trainer, &args.out.join("checkpoint.json"))?;

    let final_loss = curve.last().map(|r| r.total).unwrap_or(f64::NAN);
    println!(
        "trained {} steps on {} scenes; final loss {:.4}",
        trainer.step,
        train_scenes.len(),
        final_loss
    );
    if let Some(last) = events.last() {
        println!("eval mAP at step {}: {:.4}", last.step, last.map);
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let loaded = load_checkpoint(&args.checkpoint)?;
    let scenes = read_dataset(&args.data)?;
    let metrics = evaluate_map(&loaded.model, &scenes)?;
    let out = serde_json::json!({
        "resolved_config": { "command": "eval", "args": args },
        "scenes": scenes.len(),
        "metrics": metrics,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> anyhow::Result<()> {
    let scenes = read_dataset(&args.data)?;
    let mut split_rng = SplitMix64::new(args.seed);
    let (train_scenes, eval_scenes) = split(&scenes, 0.8, &mut split_rng)?;

    std::fs::create_dir_all(&args.out)?;
    write_config(&args.out.join("resolved_config.json"), "ablate", &args)?;

    let base = TrainConfig {
        steps: args.steps,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let report = ablate(&base, ModelConfig::default(), &train_scenes, &eval_scenes)?;
    let csv = report.to_csv();
    std::fs::write(args.out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> anyhow::Result<()> {
    let reports = run_op_suite(args.seed, 100)?;
    let mut worst_op: f64 = 0.0;
    for r in &reports {
        println!("op {:<12} cases {:>4} max rel err {:.3e}", r.op, r.cases, r.max_rel_err);
        worst_op = worst_op.max(r.max_rel_err);
    }
    let e2e = end_to_end_check(args.seed, 5)?;
    println!("end-to-end    entries    5 max rel err {e2e:.3e}");
    println!("max op rel err {worst_op:.3e} (tolerance 1e-4)");
    println!("end-to-end rel err {e2e:.3e} (tolerance 1e-3)");
    if worst_op >= 1e-4 || e2e >= 1e-3 {
        bail!("gradient check exceeded tolerance");
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successful outcomes; anything else
            // is a usage error with the synopsis on stderr.
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                _ => {
                    eprintln!("{e}");
                    ExitCode::from(1)
                }
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
