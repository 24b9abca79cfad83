use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use masd_core::loss::LossWeights;
use masd_core::pipeline::{ExperimentConfig, Logger, Pipeline, StageOutcome};
use masd_core::{Error, Result};
use serde_json::json;

/// Weakly supervised saliency detection: data, training, inference, evaluation.
#[derive(Parser)]
#[command(name = "masd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set classifier.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Loss weights `l1,l2,l3,l4`, replacing the problem's defaults. Toggles are kept.
    #[arg(long, value_name = "L1,L2,L3,L4", value_parser = parse_lambdas, allow_hyphen_values = true)]
    lambdas: Option<[f32; 4]>,
    /// Run directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Suppress JSON log lines on stderr.
    #[arg(long)]
    quiet: bool,
}

fn parse_lambdas(s: &str) -> std::result::Result<[f32; 4], String> {
    let v: Vec<f32> = s
        .split(',')
        .map(|t| t.trim().parse::<f32>().map_err(|e| format!("`{t}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<f32>| format!("expected 4 comma-separated values, got {}", v.len()))
}

#[derive(Clone, Copy, ValueEnum)]
enum Term {
    Tv,
    Area,
    Preserve,
    Destroy,
}

impl Term {
    fn as_str(self) -> &'static str {
        match self {
            Term::Tv => "tv",
            Term::Area => "area",
            Term::Preserve => "preserve",
            Term::Destroy => "destroy",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the encoder classifier and fix its EER threshold.
    TrainClassifier {
        #[command(flatten)]
        common: Common,
    },
    /// Train the mask decoder against the frozen classifier.
    TrainSaliency {
        #[command(flatten)]
        common: Common,
    },
    /// Predict probabilities and masks for the configured split.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory; defaults to the run's saliency checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compute FROC curves from predictions.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Predictions directory; defaults to the run's inference output.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Retrain the decoder with one loss term disabled and compare to the baseline.
    Ablate {
        #[command(flatten)]
        common: Common,
        term: Term,
    },
}

fn pipeline(common: &Common) -> Result<Pipeline> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path, &common.overrides)?,
        None => ExperimentConfig::from_json("{}", &common.overrides)?,
    };
    if let Some(l) = &common.lambdas {
        let base = config.loss_weights();
        config.weights = Some(LossWeights {
            lambda1: l[0],
            lambda2: l[1],
            lambda3: l[2],
            lambda4: l[3],
            ..base
        });
    }
    Pipeline::new(config, common.out.clone(), Logger { quiet: common.quiet })
}

fn run(cli: Cli) -> Result<StageOutcome> {
    match cli.command {
        Command::GenData { common } => pipeline(&common)?.gen_data(),
        Command::TrainClassifier { common } => pipeline(&common)?.train_classifier(),
        Command::TrainSaliency { common } => pipeline(&common)?.train_saliency(),
        Command::Infer { common, checkpoint } => pipeline(&common)?.infer(checkpoint.as_deref()),
        Command::Evaluate { common, predictions } => pipeline(&common)?.evaluate(predictions.as_deref()),
        Command::Ablate { common, term } => pipeline(&common)?.ablate(term.as_str()),
    }
}

fn error_line(e: &Error) -> String {
    let mut v = json!({ "error": e.kind(), "message": e.to_string() });
    if let Error::Prerequisite { stage } = e {
        v["stage"] = json!(stage);
    }
    v.to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let message = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", json!({ "error": "usage", "message": message }));
            return ExitCode::from(2);
        }
    };
    // Stage completion and skips are already logged by the pipeline.
    match run(cli) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
