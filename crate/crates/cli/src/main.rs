//! `orthojoint` command-line tool.
//!
//! Every failure is reported as one JSON line on stderr,
//! `{"error": <kind>, "message": <text>}`, with exit status 1 (2 for
//! malformed command lines). Successful commands print a one-line JSON
//! summary, including the effective configuration, on stdout.

mod settings;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use orthojoint::eval::{evaluate, evaluate_labeled, write_score_table};
use orthojoint::io::{load_features_csv, load_labeled_csv, write_dataset_csv, write_predictions_csv};
use orthojoint::{generate_synthetic, grid_search, load_csv, stratified_split, train_joint, Dataset, ModelFile};
use serde_json::json;

use settings::{grid, synth_spec, train_config, FileConfig, SynthFlags, TrainFlags};

#[derive(Debug)]
pub struct CliError {
    kind: String,
    message: String,
    code: u8,
}

impl CliError {
    pub fn new(kind: &str, message: impl Into<String>) -> Self {
        CliError {
            kind: kind.to_string(),
            message: message.into(),
            code: 1,
        }
    }
}

impl From<orthojoint::Error> for CliError {
    fn from(e: orthojoint::Error) -> Self {
        CliError::new(e.kind(), e.to_string())
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::new("Io", format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "orthojoint", version, about = "Joint binary classification and ordinal regression with a near-orthogonality coupling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Input data options common to the data-reading commands.
#[derive(clap::Args, Debug, Clone)]
struct DataArgs {
    /// Dataset CSV with a header row.
    #[arg(long)]
    data: PathBuf,
    /// TOML file with default settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Feature columns, comma separated; default is every non-label column.
    #[arg(long)]
    features: Option<String>,
    #[arg(long)]
    gender_col: Option<String>,
    #[arg(long)]
    age_col: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset CSV.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        spec: SynthFlags,
    },
    /// Train a joint model; writes the model file and a fit report.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Output model file.
        #[arg(long)]
        model: PathBuf,
        /// Output fit report JSON.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
        /// Train on this many rows per (class, gender) cell and hold out the rest.
        #[arg(long)]
        per_class_train: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write per-row predictions.
    Predict {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a model; defaults to the rows held out when it was trained.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        per_class_train: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Score every row of the file even if the model recorded a split.
        #[arg(long)]
        all_rows: bool,
    },
    /// Cross-validated grid search; writes the score table CSV.
    Gridsearch {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
        /// Candidate lambda1 values, comma separated.
        #[arg(long)]
        lambda1_grid: Option<String>,
        #[arg(long)]
        lambda2_grid: Option<String>,
        #[arg(long)]
        lambda3_grid: Option<String>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Search on the training part of a stratified split only.
        #[arg(long)]
        per_class_train: Option<usize>,
    },
    /// Print the cosine and angle between the two learned directions.
    Angle {
        #[arg(long)]
        model: PathBuf,
    },
}

struct Loaded {
    file: FileConfig,
    features: Option<Vec<String>>,
    gender_col: String,
    age_col: String,
}

fn load_settings(a: &DataArgs) -> Result<Loaded, CliError> {
    let file = FileConfig::load(a.config.as_deref())?;
    let features = a.features.as_ref().map(|s| s.split(',').map(|t| t.trim().to_string()).collect());
    let gender_col = a.gender_col.clone().or_else(|| file.gender_col.clone()).unwrap_or_else(|| "gender".into());
    let age_col = a.age_col.clone().or_else(|| file.age_col.clone()).unwrap_or_else(|| "age".into());
    Ok(Loaded {
        file,
        features,
        gender_col,
        age_col,
    })
}

impl Loaded {
    fn dataset(&self, path: &Path) -> Result<Dataset, CliError> {
        Ok(load_csv(path, self.features.as_deref(), &self.gender_col, &self.age_col)?)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).map_err(|e| CliError::new("Format", e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

/// Splits `d` when a per-cell training size is given.
fn maybe_split(d: Dataset, per_class_train: Option<usize>, seed: u64) -> Result<(Dataset, Option<Dataset>), CliError> {
    match per_class_train {
        Some(p) => {
            let (train, test) = stratified_split(&d, p, seed)?;
            Ok((train, Some(test)))
        }
        None => Ok((d, None)),
    }
}

fn run(cli: Cli) -> Result<serde_json::Value, CliError> {
    match cli.command {
        Command::Synth { out, seed, config, spec } => {
            let file = FileConfig::load(config.as_deref())?;
            let spec = synth_spec(&spec, seed, &file);
            let d = generate_synthetic(&spec)?;
            write_dataset_csv(&d, create(&out)?)?;
            Ok(json!({"command": "synth", "out": out, "n_samples": d.n_samples(), "spec": spec}))
        }
        Command::Train {
            data,
            model,
            out,
            train,
            per_class_train,
            seed,
        } => {
            let s = load_settings(&data)?;
            let full = s.dataset(&data.data)?;
            let seed = seed.or(s.file.seed).unwrap_or(0);
            let per_class_train = per_class_train.or(s.file.per_class_train);
            let (d, held_out) = maybe_split(full, per_class_train, seed)?;
            let cfg = train_config(&train, &s.file, &d)?;
            let (m, report) = train_joint(&d, &cfg)?;
            let mut mf = ModelFile::new(&m, d.maps(), &report, Some(seed), d.n_samples());
            mf.metadata.per_class_train = per_class_train;
            mf.save(&model)?;
            write_json(&out, &report)?;
            Ok(json!({
                "command": "train",
                "model": model,
                "report": out,
                "n_train": d.n_samples(),
                "n_held_out": held_out.map_or(0, |t| t.n_samples()),
                "cos_angle": report.cos_angle,
                "converged": report.converged,
                "config": report.config,
            }))
        }
        Command::Predict { data, model, out } => {
            let s = load_settings(&data)?;
            let mf = ModelFile::load(&model)?;
            let m = mf.model()?;
            let maps = mf.label_maps()?;
            let x = load_features_csv(&data.data, s.features.as_deref(), &s.gender_col, &s.age_col)?;
            let genders = m.predict_gender(&x)?;
            let classes = m.predict_class(&x)?;
            write_predictions_csv(&genders, &classes, &maps, create(&out)?)?;
            Ok(json!({"command": "predict", "out": out, "n_rows": genders.len(), "config": mf.metadata.config}))
        }
        Command::Eval {
            data,
            model,
            out,
            per_class_train,
            seed,
            all_rows,
        } => {
            let s = load_settings(&data)?;
            let mf = ModelFile::load(&model)?;
            let m = mf.model()?;
            let maps = mf.label_maps()?;
            let per_class_train = if all_rows {
                None
            } else {
                per_class_train.or(s.file.per_class_train).or(mf.metadata.per_class_train)
            };
            let seed = seed.or(s.file.seed).or(mf.metadata.seed).unwrap_or(0);
            let (result, rows) = match per_class_train {
                Some(p) => {
                    let full = s.dataset(&data.data)?;
                    if *full.maps() != maps {
                        return Err(CliError::new("UnknownLabel", "label values differ from the ones the model was trained on"));
                    }
                    let (_, test) = stratified_split(&full, p, seed)?;
                    (evaluate(&m, &test)?, "held_out")
                }
                None => {
                    let r = load_labeled_csv(&data.data, s.features.as_deref(), &s.gender_col, &s.age_col, &maps)?;
                    (evaluate_labeled(&m, &r.features, &r.genders, &r.classes, &maps)?, "all")
                }
            };
            let doc = json!({"rows": rows, "result": result, "config": mf.metadata.config});
            write_json(&out, &doc)?;
            Ok(json!({
                "command": "eval",
                "out": out,
                "rows": rows,
                "n_samples": result.n_samples,
                "gender_accuracy": result.gender_accuracy,
                "age_mae": result.age_mae,
            }))
        }
        Command::Gridsearch {
            data,
            out,
            train,
            lambda1_grid,
            lambda2_grid,
            lambda3_grid,
            folds,
            seed,
            per_class_train,
        } => {
            let s = load_settings(&data)?;
            let full = s.dataset(&data.data)?;
            let seed = seed.or(s.file.seed).unwrap_or(0);
            let (d, _) = maybe_split(full, per_class_train.or(s.file.per_class_train), seed)?;
            let base = train_config(&train, &s.file, &d)?;
            let g = grid(lambda1_grid.as_deref(), lambda2_grid.as_deref(), lambda3_grid.as_deref(), &s.file, &base)?;
            let folds = folds.or(s.file.folds).unwrap_or(3);
            let r = grid_search(&d, &base, &g, folds, seed)?;
            write_score_table(&r.rows, create(&out)?)?;
            Ok(json!({
                "command": "gridsearch",
                "out": out,
                "folds": folds,
                "grid": g,
                "best": r.best,
                "best_mean_mae": r.best_score.mean_mae,
                "best_mean_acc": r.best_score.mean_acc,
                "failed_cells": r.rows.iter().filter(|row| row.error.is_some()).count(),
            }))
        }
        Command::Angle { model } => {
            let mf = ModelFile::load(&model)?;
            let cos = mf.model()?.cos_angle()?;
            Ok(json!({"cos_angle": cos, "theta_deg": cos.acos().to_degrees()}))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            report(&CliError {
                kind: "Usage".into(),
                message: first,
                code: 2,
            });
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            report(&e);
            ExitCode::from(e.code)
        }
    }
}

fn report(e: &CliError) {
    eprintln!("{}", json!({"error": e.kind, "message": e.message}));
}
