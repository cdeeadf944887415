use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use repcount::eval::{complexity_csv, sweep_csv};
use repcount::pipeline;
use repcount::{Error, MaeNormalization, Result, RunConfig};

#[derive(Parser)]
#[command(name = "repcount", version, about = "Query-based repetition counting on synthetic sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test datasets.
    Generate(RunArgs),
    /// Train a model and keep the checkpoint with the best validation OBO.
    Train(TrainArgs),
    /// Write overall and per-period-class metrics.
    Eval(EvalArgs),
    /// Dump every query's probability and interval next to the ground truth.
    Predict(EvalArgs),
    /// Multiply-accumulate counts of the model and the similarity-matrix baseline.
    Benchmark(BenchArgs),
    /// Metrics across counting thresholds.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Full,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; missing fields take preset defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the configured `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Directory holding `train.bin` and `val.bin`; defaults to the output directory.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Counting threshold; defaults to the checkpoint's `alpha`.
    #[arg(long)]
    alpha: Option<f64>,
    /// Normalize MAE by the predicted count instead of the true count.
    #[arg(long)]
    mae_by_prediction: bool,
    /// Output directory; prints to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Comma-separated sequence lengths.
    #[arg(long, default_value = "64,128,256,512")]
    lengths: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated thresholds.
    #[arg(long, default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
    alphas: String,
    #[arg(long)]
    mae_by_prediction: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(path: Option<&Path>, preset: Preset) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => match preset {
            Preset::Desk => RunConfig::desk(),
            Preset::Full => RunConfig::full(),
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

fn norm(by_prediction: bool) -> MaeNormalization {
    if by_prediction {
        MaeNormalization::Predicted
    } else {
        MaeNormalization::GroundTruth
    }
}

fn emit(out: Option<&Path>, file: &str, text: &str) -> Result<()> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(file), text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn parse_alphas(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config {
                    field: "alphas".into(),
                    reason: format!("`{t}` is not a number"),
                })
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(args) => {
            let mut cfg = load_config(args.config.as_deref(), args.preset)?;
            if let Some(seed) = args.seed {
                cfg.generator.master_seed = seed;
            }
            let out = args.out.unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
            let m = pipeline::generate_to_dir(&cfg, &out)?;
            eprintln!("wrote {} train, {} val, {} test sequences to {}", m.train, m.val, m.test, out.display());
        }
        Command::Train(args) => {
            let mut cfg = load_config(args.run.config.as_deref(), args.run.preset)?;
            if let Some(seed) = args.run.seed {
                cfg.train.seed = seed;
            }
            let out = args.run.out.unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
            let data = args.data.unwrap_or_else(|| out.clone());
            let outcome = pipeline::train_to_dir(&cfg, &data, &out)?;
            eprintln!(
                "best epoch {} (val OBO {:.4}, MAE {:.4}); checkpoint in {}",
                outcome.best_epoch,
                outcome.best_report.overall.obo,
                outcome.best_report.overall.mae,
                out.display()
            );
        }
        Command::Eval(args) => {
            let report = pipeline::eval_report(&args.checkpoint, &args.data, args.alpha, norm(args.mae_by_prediction))?;
            emit(args.out.as_deref(), "metrics.csv", &report.to_csv())?;
        }
        Command::Predict(args) => {
            let dump = pipeline::predict_dump(&args.checkpoint, &args.data, args.alpha)?;
            emit(args.out.as_deref(), "predictions.csv", &dump)?;
        }
        Command::Benchmark(args) => {
            let cfg = load_config(args.config.as_deref(), args.preset)?;
            let lengths = pipeline::parse_lengths(&args.lengths)?;
            let rows = pipeline::benchmark(&cfg.model, &lengths)?;
            for r in &rows {
                eprintln!("T={} forward {:.4}s", r.record.seq_len, r.seconds);
            }
            let records: Vec<_> = rows.iter().map(|r| r.record).collect();
            emit(args.out.as_deref(), "complexity.csv", &complexity_csv(&records))?;
        }
        Command::Sweep(args) => {
            let alphas = parse_alphas(&args.alphas)?;
            let rows = pipeline::sweep(&args.checkpoint, &args.data, &alphas, norm(args.mae_by_prediction))?;
            emit(args.out.as_deref(), "sweep.csv", &sweep_csv(&rows))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
