//! Experiment configs, synthetic corpora, runs, sweeps and reports.

pub mod config;
pub mod corpus;
pub mod report;
pub mod run;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{Condition, CorpusSource, EvalSettings, ExperimentConfig, Grid};
pub use corpus::{make_synthetic_corpus, verification_trials, SynthConfig, SynthCorpus, SynthUtterance, Voice};
pub use report::{aggregate, parse_csv, render_csv, render_text, ResultRow};
pub use run::{
    collect_results, prepare_data, run_dir, run_experiment, run_hash, run_single, ExperimentOutcome, PreparedData,
    RunFailure, RunResult,
};

#[derive(Error, Debug)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing paths: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingPaths(Vec<PathBuf>),
    #[error("report: {0}")]
    Report(String),
    #[error(transparent)]
    Train(#[from] crate::trainer::TrainError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error(transparent)]
    Audio(#[from] crate::audio::AudioError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
