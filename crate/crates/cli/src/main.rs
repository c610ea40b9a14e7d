//! `scorecraft` command-line tool: synthesize data, train, score, evaluate,
//! plot-ready density curves and the loss-combination ablation.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 numerical divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use scorecraft::eval::{evaluate, kde, DEFAULT_GRID_POINTS};
use scorecraft::pipeline::{ablation_cases, run_case, run_training, AblationRow, TrainOptions};
use scorecraft::{load_csv, synth_generate, ConstraintConfig, Dataset, Error, ScoringModel, SyntheticSpec};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "scorecraft", version, about = "Learn bounded monotone scoring functions from unlabeled data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the four-feature synthetic benchmark as CSV (columns x1..x4, y).
    Synth {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the feature pipeline, split 70/30 and train; writes the model and
    /// `<stem>.report.json` next to it.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_model: PathBuf,
        /// Regress on the label column instead of the constraints.
        #[arg(long, requires = "label")]
        supervised: bool,
        #[arg(long)]
        label: Option<String>,
        /// Use unconstrained weights.
        #[arg(long)]
        no_monotone: bool,
    },
    /// Score every row of a CSV; writes `row_id,score`.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the metrics report for a scores file.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Ground-truth column in the data file.
        #[arg(long)]
        truth: Option<String>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Kernel density curve of a scores file as `grid,density` CSV.
    Report {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the Silverman bandwidth.
        #[arg(long)]
        bandwidth: Option<f64>,
    },
    /// Train and evaluate every loss combination with and without
    /// monotonicity, plus the supervised baseline.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds; defaults to the config's training seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Ground-truth column, used for the supervised case and the label metrics.
        #[arg(long)]
        label: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SCORECRAFT_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } => 3,
        _ => 2,
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Synth { n, seed, out } => {
            let data = synth_generate(&SyntheticSpec {
                n: n as usize,
                seed,
                ..SyntheticSpec::default()
            })?;
            data.write_csv(&out, "y")
        }
        Command::Train {
            config,
            data,
            out_model,
            supervised,
            label,
            no_monotone,
        } => {
            let config = ConstraintConfig::load(&config)?;
            let data = load_csv(&data, label.as_deref())?;
            let opts = TrainOptions {
                monotone: !no_monotone,
                supervised,
            };
            let outcome = run_training(&data, &config, &opts)?;
            outcome.model.save(&out_model)?;
            let report_path = report_path(&out_model);
            write_json(&report_path, &outcome.report)?;
            log::info!(
                "trained on {} rows; final loss {:.6}; report at {}",
                outcome.train_rows.len(),
                outcome.report.final_loss.total,
                report_path.display()
            );
            Ok(())
        }
        Command::Score { model, data, out } => {
            let model = ScoringModel::load(&model)?;
            let data = load_csv(&data, None)?;
            let expected = &model.pipeline.feature_names;
            let extra: Vec<&str> = data
                .feature_names()
                .iter()
                .filter(|n| !expected.contains(n))
                .map(String::as_str)
                .collect();
            if !extra.is_empty() {
                log::info!("ignoring columns not used by the model: {}", extra.join(", "));
            }
            let scores = model.score_dataset(&data)?;
            let mut text = String::from("row_id,score\n");
            for (i, s) in scores.iter().enumerate() {
                text.push_str(&format!("{i},{s}\n"));
            }
            write_text(&out, &text)
        }
        Command::Eval {
            scores,
            data,
            truth,
            config,
            out,
        } => {
            let config = ConstraintConfig::load(&config)?;
            let data = load_csv(&data, truth.as_deref())?;
            let (ids, scores) = read_scores(&scores)?;
            if ids.len() != data.n_rows() {
                return Err(Error::InvalidInput(format!(
                    "scores file has {} rows, data has {}",
                    ids.len(),
                    data.n_rows()
                )));
            }
            if let Some(bad) = ids.iter().find(|&&i| i >= data.n_rows()) {
                return Err(Error::InvalidInput(format!("row_id {bad} is out of range")));
            }
            let rows = data.subset(&ids);
            let features = rows.select(&config.feature_names())?;
            let report = evaluate(&scores, &features, rows.labels(), config.bounds, &config.distribution)?;
            write_json(&out, &report)
        }
        Command::Report { scores, out, bandwidth } => {
            let (_, scores) = read_scores(&scores)?;
            let curve = kde(&scores, bandwidth, DEFAULT_GRID_POINTS)?;
            curve.save_csv(&out)
        }
        Command::Ablate {
            data,
            config,
            out,
            seeds,
            label,
        } => {
            let config = ConstraintConfig::load(&config)?;
            let data = load_csv(&data, label.as_deref())?;
            let seeds = if seeds.is_empty() { vec![config.train.seed] } else { seeds };
            let cases = ablation_cases();
            let jobs: Vec<_> = seeds
                .iter()
                .flat_map(|&seed| cases.iter().map(move |case| (seed, case)))
                .collect();
            let rows: Vec<AblationRow> = jobs
                .par_iter()
                .map(|&(seed, case)| {
                    log::info!("case {} ({}) seed {seed}", case.case, case.constraint);
                    run_case(&data, &config, case, seed)
                })
                .collect::<Result<_, _>>()?;
            write_json(&out, &rows)
        }
    }
}

/// `dir/model.json` -> `dir/model.report.json`.
fn report_path(model: &Path) -> PathBuf {
    let stem = model.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    model.with_file_name(format!("{stem}.report.json"))
}

/// Reads a `row_id,score` file. Without a `row_id` column rows are numbered
/// in file order.
fn read_scores(path: &Path) -> Result<(Vec<usize>, Vec<f64>), Error> {
    let table: Dataset = load_csv(path, None)?;
    let score_col = table
        .column_index("score")
        .ok_or_else(|| Error::Format(format!("{} has no 'score' column", path.display())))?;
    let scores = table.column(score_col);
    let ids = match table.column_index("row_id") {
        Some(j) => table
            .column(j)
            .into_iter()
            .map(|v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Format(format!("invalid row_id {v}")))
                }
            })
            .collect::<Result<_, _>>()?,
        None => (0..scores.len()).collect(),
    };
    Ok((ids, scores))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
