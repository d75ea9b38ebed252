//! Operator surface: dataset generation, training, evaluation, the
//! ablation matrix, and diagnostics exports.

use clap::{Args, Parser, Subcommand};
use cosa_core::config::TrainConfig;
use cosa_core::data::{generate_synthetic, Dataset, Split, SyntheticSpec};
use cosa_core::diagnostics;
use cosa_core::trainer::{self, AblationRow};
use cosa_core::CosaError;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "cosa",
    version,
    about = "Cooperative sentiment agents for multimodal sentiment analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a generator spec.
    GenData(GenDataArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Evaluate a trained run on a split.
    Eval(EvalArgs),
    /// Train and compare a matrix of module-toggle settings.
    Ablate(AblateArgs),
    /// Export diagnostic CSVs from a trained run.
    Diagnose(DiagnoseArgs),
    /// Export disentangled features as CSV.
    ExportFeatures(ExportArgs),
    /// Export per-frame fusion weights as CSV.
    ExportWeights(ExportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Generator spec JSON; omit for the built-in default spec.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory for packs and manifest.json.
    #[arg(long)]
    out: PathBuf,
    /// Override the spec seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config JSON; omit for desk-scale defaults for the
    /// dataset's task.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (containing manifest.json) or manifest path.
    #[arg(long)]
    data: PathBuf,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured epoch count.
    #[arg(long)]
    epochs: Option<u32>,
    /// Override the active modality subset, e.g. VAT, VA, T.
    #[arg(long)]
    modalities: Option<String>,
    /// Resume from the run's last checkpoint instead of starting fresh.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory produced by train.
    #[arg(long)]
    run: PathBuf,
    /// Dataset directory or manifest path.
    #[arg(long)]
    data: PathBuf,
    /// Split to evaluate: train, valid, or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Which checkpoint to load: best or last.
    #[arg(long, default_value = "best")]
    checkpoint: String,
}

#[derive(Args)]
struct AblateArgs {
    /// Base training config JSON; omit for desk-scale defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory or manifest path.
    #[arg(long)]
    data: PathBuf,
    /// Matrix JSON (list of {name, toggles}); omit for the standard
    /// nine-row matrix.
    #[arg(long)]
    matrix: Option<PathBuf>,
    /// Output directory for per-row runs and the comparison table.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated seeds, one run per (row, seed).
    #[arg(long, default_value = "1")]
    seeds: String,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Run directory produced by train.
    #[arg(long)]
    run: PathBuf,
    /// Dataset directory or manifest path.
    #[arg(long)]
    data: PathBuf,
    /// similarity, weights, or features.
    #[arg(long)]
    kind: String,
    #[arg(long, default_value = "test")]
    split: String,
    /// Output CSV path; defaults to <run>/exports/<kind>_<split>.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "best")]
    checkpoint: String,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "best")]
    checkpoint: String,
}

/// Relative output paths resolve under this root when set.
const ARTIFACT_ROOT_ENV: &str = "COSA_ARTIFACT_ROOT";

fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(ARTIFACT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.json")
    } else {
        data.to_path_buf()
    }
}

fn load_run(
    run: &Path,
    data: &Path,
    checkpoint: &str,
) -> Result<(Dataset, TrainConfig, cosa_core::model::CosaModel), CosaError> {
    let dataset = Dataset::load(&manifest_path(data))?;
    let (cfg, model) = trainer::load_model(run, &dataset, checkpoint)?;
    Ok((dataset, cfg, model))
}

fn run_command(command: Command) -> Result<(), CosaError> {
    match command {
        Command::GenData(args) => {
            let mut spec = match &args.spec {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| CosaError::io(path.display().to_string(), e))?;
                    serde_json::from_str::<SyntheticSpec>(&text)?
                }
                None => SyntheticSpec::default(),
            };
            if let Some(seed) = args.seed {
                spec.seed = seed;
            }
            let out = resolve_out(&args.out);
            let manifest = generate_synthetic(&spec, &out)?;
            println!(
                "{}",
                serde_json::json!({
                    "out": out,
                    "generator_hash": manifest.generator_hash,
                    "train": manifest.train.size,
                    "valid": manifest.valid.size,
                    "test": manifest.test.size,
                })
            );
            Ok(())
        }
        Command::Train(args) => {
            let manifest = manifest_path(&args.data);
            let dataset = Dataset::load(&manifest)?;
            let out = resolve_out(&args.out);
            let artifacts = if args.resume {
                trainer::resume(&out, &dataset, None)?
            } else {
                let mut cfg = match &args.config {
                    Some(path) => TrainConfig::load(path)?,
                    None => TrainConfig::desk(dataset.manifest.task),
                };
                if let Some(seed) = args.seed {
                    cfg.seed = seed;
                }
                if let Some(epochs) = args.epochs {
                    cfg.epochs = epochs;
                }
                if let Some(modalities) = &args.modalities {
                    cfg.modalities = modalities.clone();
                }
                cfg.validate()?;
                trainer::train(&cfg, &dataset, &manifest, &out, None)?
            };
            println!("{}", serde_json::to_string(&artifacts)?);
            Ok(())
        }
        Command::Eval(args) => {
            let split = Split::parse(&args.split)?;
            let (dataset, _, model) = load_run(&args.run, &args.data, &args.checkpoint)?;
            let metrics = trainer::metrics_for_split(&model, &dataset, split)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
            Ok(())
        }
        Command::Ablate(args) => {
            let manifest = manifest_path(&args.data);
            let dataset = Dataset::load(&manifest)?;
            let base = match &args.config {
                Some(path) => TrainConfig::load(path)?,
                None => TrainConfig::desk(dataset.manifest.task),
            };
            let matrix: Vec<AblationRow> = match &args.matrix {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| CosaError::io(path.display().to_string(), e))?;
                    serde_json::from_str(&text)?
                }
                None => trainer::table1_matrix(),
            };
            let seeds: Vec<u64> = args
                .seeds
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| CosaError::Config(format!("bad seed '{s}'")))
                })
                .collect::<Result<_, _>>()?;
            let out = resolve_out(&args.out);
            let table = trainer::run_matrix(&base, &manifest, &matrix, &seeds, &out)?;
            let json_path = out.join("comparison.json");
            std::fs::write(&json_path, serde_json::to_string_pretty(&table)?)
                .map_err(|e| CosaError::io(json_path.display().to_string(), e))?;
            let text_path = out.join("comparison.txt");
            std::fs::write(&text_path, table.render_text())
                .map_err(|e| CosaError::io(text_path.display().to_string(), e))?;
            print!("{}", table.render_text());
            Ok(())
        }
        Command::Diagnose(args) => {
            let split = Split::parse(&args.split)?;
            let (dataset, _, model) = load_run(&args.run, &args.data, &args.checkpoint)?;
            let csv = match args.kind.as_str() {
                "similarity" => diagnostics::similarity_csv(&model, &dataset, split)?,
                "weights" => diagnostics::weights_csv(&model, &dataset, split)?,
                "features" => diagnostics::features_csv(&model, &dataset, split)?,
                other => {
                    return Err(CosaError::Config(format!(
                        "unknown diagnostic '{other}' (use similarity, weights, features)"
                    )))
                }
            };
            write_export(args.out, &args.run, &args.kind, &args.split, csv)
        }
        Command::ExportFeatures(args) => {
            let split = Split::parse(&args.split)?;
            let (dataset, _, model) = load_run(&args.run, &args.data, &args.checkpoint)?;
            let csv = diagnostics::features_csv(&model, &dataset, split)?;
            write_export(args.out, &args.run, "features", &args.split, csv)
        }
        Command::ExportWeights(args) => {
            let split = Split::parse(&args.split)?;
            let (dataset, _, model) = load_run(&args.run, &args.data, &args.checkpoint)?;
            let csv = diagnostics::weights_csv(&model, &dataset, split)?;
            write_export(args.out, &args.run, "weights", &args.split, csv)
        }
    }
}

fn write_export(
    out: Option<PathBuf>,
    run: &Path,
    kind: &str,
    split: &str,
    csv: String,
) -> Result<(), CosaError> {
    let out = match out {
        Some(path) => resolve_out(&path),
        None => {
            let dir = run.join("exports");
            std::fs::create_dir_all(&dir)
                .map_err(|e| CosaError::io(dir.display().to_string(), e))?;
            dir.join(format!("{kind}_{split}.csv"))
        }
    };
    std::fs::write(&out, csv).map_err(|e| CosaError::io(out.display().to_string(), e))?;
    println!("{}", serde_json::json!({ "written": out }));
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successful exits; anything
            // else is a usage error.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run_command(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
