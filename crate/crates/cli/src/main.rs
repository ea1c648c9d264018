//! `aat`: train, evaluate, sweep and report speaker verification
//! experiments, generate synthetic corpora and serve the listening benchmark.
//!
//! Every subcommand takes `--config PATH` (TOML, defaults for anything
//! missing), `--seed N` and `--out DIR`. The exit code is 0 only when every
//! sub-run succeeded.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use aat_core::audio::LogMelExtractor;
use aat_core::eval::{evaluate_with, write_scores, write_trials};
use aat_core::experiment::{
    aggregate, collect_results, make_synthetic_corpus, prepare_data, render_csv, render_text, run_experiment,
    run_single, verification_trials, Condition, CorpusSource, ExperimentConfig, RunResult,
};
use aat_core::human::{BenchmarkService, BenchmarkSet};
use aat_core::trainer::{stream, TrainState};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aat", version, about = "Self-supervised speaker verification with augmentation adversarial training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML). Omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate the base condition of the config once.
    Train(Common),
    /// Score the trial list with a saved checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run every (condition, seed) of the config's grid, then report.
    Sweep(Common),
    /// Aggregate finished runs under `--out` into text and CSV tables.
    Report(Common),
    /// Write the config's synthetic corpus as WAV files, manifests and trials.
    SynthCorpus(Common),
    /// Serve the human listening benchmark over HTTP.
    ServeBenchmark {
        #[command(flatten)]
        common: Common,
        /// Trial list (`<0|1> <a> <b>`) to build the benchmark from. Not
        /// needed when `--out` already holds a benchmark.
        #[arg(long)]
        trials: Option<PathBuf>,
        /// Directory the trial paths are relative to.
        #[arg(long, default_value = ".")]
        audio_root: PathBuf,
        #[arg(long, default_value_t = 4)]
        subsets: usize,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn print_result(r: &RunResult, cached: bool) {
    println!(
        "seed {} lambda {} EER {:.2}% minDCF {:.3}{}  [{}]",
        r.seed,
        if r.condition.aat_enabled { r.condition.lambda.to_string() } else { "off".into() },
        100.0 * r.eer,
        r.min_dcf,
        if cached { " (cached)" } else { "" },
        &r.config_hash[..16],
    );
}

fn train_cmd(c: &Common) -> Result<bool> {
    let cfg = load_config(c)?;
    cfg.check_paths()?;
    fs::create_dir_all(&c.out)?;
    let data = prepare_data(&cfg.corpus)?;
    let (r, cached) = run_single(&cfg, &Condition::of(&cfg.train), cfg.seed, &data, &c.out)?;
    print_result(&r, cached);
    Ok(true)
}

fn evaluate_cmd(c: &Common, checkpoint: &Path) -> Result<bool> {
    let cfg = load_config(c)?;
    cfg.check_paths()?;
    let state = TrainState::load(checkpoint)?;
    let data = prepare_data(&cfg.corpus)?;
    let extractor = LogMelExtractor::new(cfg.train.features.clone());
    let r = evaluate_with(
        &data.trials,
        |k| data.load_eval(k),
        &state.model.encoder,
        &extractor,
        cfg.eval.policy,
        cfg.eval.dcf,
    )?;
    fs::create_dir_all(&c.out)?;
    write_scores(&c.out.join("scores.txt"), &data.trials, &r.scores)?;
    println!("EER {:.2}% minDCF {:.3} over {} trials", 100.0 * r.eer, r.min_dcf, data.trials.len());
    Ok(true)
}

fn write_report(out: &Path, results: &[RunResult]) -> Result<()> {
    let rows = aggregate(results);
    let text = render_text(&rows);
    fs::write(out.join("report.txt"), &text)?;
    fs::write(out.join("report.csv"), render_csv(&rows))?;
    print!("{text}");
    Ok(())
}

fn sweep_cmd(c: &Common) -> Result<bool> {
    let cfg = load_config(c)?;
    let outcome = run_experiment(&cfg, &c.out)?;
    for r in &outcome.results {
        print_result(r, false);
    }
    for f in &outcome.failures {
        eprintln!("warning: run with seed {} and lambda {} failed: {}", f.seed, f.condition.lambda, f.error);
    }
    if !outcome.failures.is_empty() {
        eprintln!(
            "warning: report covers {} of {} runs",
            outcome.results.len(),
            outcome.results.len() + outcome.failures.len()
        );
    }
    if !outcome.results.is_empty() {
        write_report(&c.out, &outcome.results)?;
    }
    Ok(outcome.all_succeeded())
}

fn report_cmd(c: &Common) -> Result<bool> {
    let results = collect_results(&c.out)?;
    if results.is_empty() {
        return Err(format!("no finished runs under {}", c.out.join("runs").display()).into());
    }
    write_report(&c.out, &results)?;
    Ok(true)
}

fn synth_cmd(c: &Common) -> Result<bool> {
    let cfg = load_config(c)?;
    let CorpusSource::Synthetic {
        synth,
        held_out_speakers,
        trials_per_class,
        corpus_seed,
        ..
    } = &cfg.corpus
    else {
        return Err("synth-corpus needs a synthetic corpus in the config".into());
    };
    let seed = c.seed.unwrap_or(*corpus_seed);
    let corpus = make_synthetic_corpus(synth, seed);
    let manifest = corpus.write(&c.out)?;
    let held_out = format!("spk{:03}", synth.n_speakers - held_out_speakers);
    let (train, test): (Vec<_>, Vec<_>) = corpus.utterances.iter().cloned().partition(|u| u.speaker < held_out);
    let lines: String = train
        .iter()
        .map(|u| format!("{} {}\n", u.id, u.relative_path().display()))
        .collect();
    fs::write(c.out.join("train.txt"), lines)?;
    let mut trials = verification_trials(&test, *trials_per_class, &mut stream(seed, 21));
    for t in &mut trials {
        for p in [&mut t.a, &mut t.b] {
            let u = test.iter().find(|u| u.id == *p).expect("trials reference held-out utterances");
            *p = u.relative_path().display().to_string();
        }
    }
    write_trials(&c.out.join("trials.txt"), &trials)?;
    println!(
        "{} utterances in {}, {} training, {} trials",
        corpus.utterances.len(),
        manifest.display(),
        train.len(),
        trials.len()
    );
    Ok(true)
}

fn serve_cmd(c: &Common, trials: Option<&Path>, audio_root: &Path, subsets: usize, addr: SocketAddr) -> Result<bool> {
    fs::create_dir_all(&c.out)?;
    let set_path = c.out.join("benchmark.json");
    let set = if set_path.is_file() {
        BenchmarkSet::load(&set_path)?
    } else {
        let trials = trials.ok_or("--trials is required to create a new benchmark")?;
        let set = BenchmarkSet::from_trials(&aat_core::eval::read_trials(trials)?, subsets, audio_root)?;
        set.save(&set_path)?;
        set
    };
    let n = set.pairs.len();
    let svc = Arc::new(BenchmarkService::open(set, &c.out.join("records.log"))?);
    println!("serving {n} pairs on http://{addr}");
    tokio::runtime::Runtime::new()?.block_on(aat_server::serve(addr, svc))?;
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Train(c) => train_cmd(c),
        Command::Evaluate { common, checkpoint } => evaluate_cmd(common, checkpoint),
        Command::Sweep(c) => sweep_cmd(c),
        Command::Report(c) => report_cmd(c),
        Command::SynthCorpus(c) => synth_cmd(c),
        Command::ServeBenchmark {
            common,
            trials,
            audio_root,
            subsets,
            addr,
        } => serve_cmd(common, trials.as_deref(), audio_root, *subsets, *addr),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
