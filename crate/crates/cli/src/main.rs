//! `mmh`: setup / train / generate for multimodal seq2seq experiments.
//!
//! Exit codes: 0 on success, 1 on configuration or validation errors
//! (including usage mistakes), 2 on runtime failures such as a diverging
//! loss. Extra `--key value` pairs after the fixed flags are config
//! overrides; bare keys address the `training` section, dotted keys
//! (`--model.dropout 0.1`) any section. CLI values take precedence over
//! the configuration file; the `MMH_SEED` environment variable is the
//! fallback seed when the config does not set one.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mmh_core::config::load_config;
use mmh_core::metadata::Split;
use mmh_core::modality::Modality;
use mmh_core::model::ModelError;
use mmh_core::pipeline::{self, PipelineError, Task};

#[derive(Parser)]
#[command(
    name = "mmh",
    version,
    about = "Config-driven multimodal sequence-to-sequence experiments",
    long_about = None
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Instantiate and persist the training actors for a modality.
    Setup {
        /// Input modality (text2text, pose2text, features2text,
        /// video2text, image2text, mixed).
        #[arg(long = "modality")]
        modality: String,
        /// Path to the four-section YAML configuration.
        #[arg(long = "config_path")]
        config_path: PathBuf,
    },
    /// Run the training loop inside an artifacts directory.
    Train {
        /// seq2seq or mixed-seq2seq.
        #[arg(long = "task")]
        task: String,
        /// Artifacts directory produced by `mmh setup`.
        #[arg(long = "output_path")]
        output_path: PathBuf,
        /// Config overrides: `--max_steps 5`, `--training.lr 1e-3`, ...
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Decode a split, score it and write the prediction dump.
    Generate {
        /// seq2seq or mixed-seq2seq.
        #[arg(long = "task")]
        task: String,
        /// bleu, chrf or perplexity.
        #[arg(long = "metric_name")]
        metric_name: String,
        /// The run config or the artifacts directory itself.
        #[arg(long = "config_path")]
        config_path: PathBuf,
        /// Checkpoint to decode with (default: best, then final, then init).
        #[arg(long = "checkpoint")]
        checkpoint: Option<PathBuf>,
        /// Split to decode: validation or test.
        #[arg(long = "split", default_value = "test")]
        split: String,
        /// Config overrides, e.g. `--beam 4 --max_len 32`.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Pipeline(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

enum CliError {
    Usage(String),
    Pipeline(PipelineError),
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError::Pipeline(e)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Setup {
            modality,
            config_path,
        } => {
            let modality: Modality = modality
                .parse()
                .map_err(|e: mmh_core::modality::UnknownModality| CliError::Usage(e.to_string()))?;
            let config = load_config(&config_path).map_err(PipelineError::from)?;
            let artifacts = pipeline::setup(modality, &config)?;
            println!("{}", artifacts.dir.display());
            Ok(())
        }
        Command::Train {
            task,
            output_path,
            overrides,
        } => {
            let task: Task = task.parse().map_err(CliError::Usage)?;
            let overrides = parse_overrides(&overrides)?;
            let outcome = pipeline::train(&output_path, task, &overrides)?;
            println!(
                "trained {} steps (final loss {:.6})",
                outcome.steps_run, outcome.final_loss
            );
            println!("{}", outcome.final_checkpoint.display());
            Ok(())
        }
        Command::Generate {
            task,
            metric_name,
            config_path,
            checkpoint,
            split,
            overrides,
        } => {
            let task: Task = task.parse().map_err(CliError::Usage)?;
            let split = match split.as_str() {
                "validation" => Split::Validation,
                "test" => Split::Test,
                other => {
                    return Err(CliError::Usage(format!(
                        "unknown split {other:?} (known: validation, test)"
                    )))
                }
            };
            let overrides = parse_overrides(&overrides)?;
            let artifacts_dir = resolve_artifacts_dir(&config_path, &overrides)?;
            let (result, dump) = pipeline::generate(
                &artifacts_dir,
                task,
                checkpoint.as_deref(),
                &metric_name,
                split,
                &overrides,
            )?;
            println!("{}: {:.2}", result.metric_name, result.score);
            eprintln!("predictions: {}", dump.display());
            Ok(())
        }
    }
}

/// `--config_path` accepts either the YAML config (artifacts resolved via
/// `training.output_dir`) or an artifacts directory directly.
fn resolve_artifacts_dir(
    config_path: &Path,
    overrides: &[(String, String)],
) -> Result<PathBuf, CliError> {
    if config_path.is_dir() {
        return Ok(config_path.to_path_buf());
    }
    let mut config = load_config(config_path).map_err(PipelineError::from)?;
    mmh_core::config::apply_overrides(&mut config, overrides).map_err(PipelineError::from)?;
    Ok(config.training.output_dir)
}

/// Parses trailing `--key value` / `--key=value` pairs.
fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, CliError> {
    let mut overrides = Vec::new();
    let mut iter = raw.iter();
    while let Some(item) = iter.next() {
        let key = item
            .strip_prefix("--")
            .ok_or_else(|| CliError::Usage(format!("expected `--key value`, got {item:?}")))?;
        if let Some((k, v)) = key.split_once('=') {
            overrides.push((k.to_string(), v.to_string()));
            continue;
        }
        let value = iter
            .next()
            .ok_or_else(|| CliError::Usage(format!("override `--{key}` is missing a value")))?;
        overrides.push((key.to_string(), value.clone()));
    }
    Ok(overrides)
}

/// 1 for configuration/validation problems, 2 for runtime failures.
fn exit_code(e: &PipelineError) -> u8 {
    match e {
        PipelineError::Config(_)
        | PipelineError::Metadata(_)
        | PipelineError::Metaproc(_)
        | PipelineError::Vocab(_)
        | PipelineError::ValidationFailed { .. }
        | PipelineError::MissingDataFile(_)
        | PipelineError::UnknownMetric(_)
        | PipelineError::UnsupportedModel(_)
        | PipelineError::TaskMismatch { .. }
        | PipelineError::MissingArtifact(..) => 1,
        PipelineError::Model(
            ModelError::IncompatibleSpec(_)
            | ModelError::InvalidSpec(_)
            | ModelError::UnknownPolicy(_),
        ) => 1,
        _ => 2,
    }
}
