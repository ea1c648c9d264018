//! Running the condition matrix: data preparation, content-addressed run
//! directories, per-run isolation and aggregation.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{Condition, CorpusSource, ExperimentConfig};
use super::corpus::{make_synthetic_corpus, verification_trials};
use super::ExperimentError;
use crate::audio::manifest::{load_bank, load_utterances};
use crate::audio::wav::read_wav;
use crate::audio::{AugmentationBank, LogMelExtractor, Waveform};
use crate::encoder::Encoder;
use crate::eval::{evaluate_with, read_trials, write_scores, EvalError, EvalResult, Trial};
use crate::probe::{channel_probe, ProbeResult};
use crate::trainer::{stream, train, RunOutput, TrainConfig, TrainState, Utterance};

/// Bumped whenever a change would alter results for an unchanged config.
const RUN_FORMAT: u32 = 1;

/// Stream ids for data preparation, kept apart from the trainer's.
const CORPUS_BANK_STREAM: u64 = 20;
const CORPUS_TRIAL_STREAM: u64 = 21;
const PROBE_STREAM: u64 = 22;

/// Training utterances, an augmentation bank and an evaluation set.
pub struct PreparedData {
    pub train: Vec<Utterance>,
    pub bank: AugmentationBank,
    pub trials: Vec<Trial>,
    /// Evaluation audio keyed by trial path.
    pub eval_audio: HashMap<String, Waveform>,
}

impl PreparedData {
    pub fn load_eval(&self, key: &str) -> Result<Waveform, EvalError> {
        self.eval_audio
            .get(key)
            .cloned()
            .ok_or_else(|| EvalError::MissingAudio(vec![PathBuf::from(key)]))
    }

    /// Held-out utterances for the channel probe.
    pub fn eval_utterances(&self) -> Vec<Utterance> {
        let mut keys: Vec<&String> = self.eval_audio.keys().collect();
        keys.sort();
        keys.into_iter()
            .map(|k| Utterance {
                id: k.clone(),
                wave: self.eval_audio[k].clone(),
            })
            .collect()
    }
}

fn synthetic_bank(source_seed: u64, per_category: usize, train: &[Utterance]) -> AugmentationBank {
    let babble = train.iter().take(32).map(|u| u.wave.clone()).collect();
    AugmentationBank::synthetic(&mut stream(source_seed, CORPUS_BANK_STREAM), per_category, babble)
}

pub fn prepare_data(source: &CorpusSource) -> Result<PreparedData, ExperimentError> {
    match source {
        CorpusSource::Synthetic {
            synth,
            held_out_speakers,
            trials_per_class,
            corpus_seed,
            bank_per_category,
        } => {
            let corpus = make_synthetic_corpus(synth, *corpus_seed);
            let cut = synth.n_speakers - held_out_speakers;
            let held_out_name = format!("spk{cut:03}");
            let (train_u, test_u): (Vec<_>, Vec<_>) =
                corpus.utterances.into_iter().partition(|u| u.speaker < held_out_name);
            let trials = verification_trials(&test_u, *trials_per_class, &mut stream(*corpus_seed, CORPUS_TRIAL_STREAM));
            let train: Vec<Utterance> = train_u
                .into_iter()
                .map(|u| Utterance { id: u.id, wave: u.wave })
                .collect();
            Ok(PreparedData {
                bank: synthetic_bank(*corpus_seed, *bank_per_category, &train),
                train,
                trials,
                eval_audio: test_u.into_iter().map(|u| (u.id, u.wave)).collect(),
            })
        }
        CorpusSource::Files {
            root,
            train_manifest,
            trials,
            noise_manifest,
            rir_manifest,
        } => {
            let train: Vec<Utterance> = load_utterances(train_manifest, root)?
                .into_iter()
                .map(|(id, wave)| Utterance { id, wave })
                .collect();
            let bank = match (noise_manifest, rir_manifest) {
                (Some(n), Some(r)) => load_bank(n, r, root)?,
                _ => synthetic_bank(0, 4, &train),
            };
            let trials = read_trials(trials)?;
            let mut missing = Vec::new();
            let mut eval_audio = HashMap::new();
            for key in trials.iter().flat_map(|t| [&t.a, &t.b]) {
                if eval_audio.contains_key(key) {
                    continue;
                }
                let path = root.join(key);
                if !path.is_file() {
                    missing.push(path);
                    continue;
                }
                eval_audio.insert(key.clone(), read_wav(&path)?);
            }
            if !missing.is_empty() {
                missing.sort();
                missing.dedup();
                return Err(EvalError::MissingAudio(missing).into());
            }
            Ok(PreparedData {
                train,
                bank,
                trials,
                eval_audio,
            })
        }
    }
}

/// Everything that determines a sub-run's results.
#[derive(Serialize)]
struct RunKey<'a> {
    format: u32,
    corpus: &'a CorpusSource,
    train: &'a TrainConfig,
    eval: &'a super::config::EvalSettings,
    seed: u64,
}

pub fn run_hash(cfg: &ExperimentConfig, train: &TrainConfig, seed: u64) -> String {
    let key = RunKey {
        format: RUN_FORMAT,
        corpus: &cfg.corpus,
        train,
        eval: &cfg.eval,
        seed,
    };
    let json = serde_json::to_string(&key).expect("run keys serialize");
    hex::encode(Sha256::digest(json.as_bytes()))
}

/// The outcome of one (condition, seed) sub-run, stored as `result.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub condition: Condition,
    pub dataset: String,
    pub seed: u64,
    pub config_hash: String,
    pub eer: f64,
    pub min_dcf: f64,
    pub untrained_eer: Option<f64>,
    pub probe: Option<ProbeResult>,
    pub iterations: usize,
}

pub fn run_dir(out: &Path, hash: &str) -> PathBuf {
    out.join("runs").join(&hash[..16])
}

fn evaluate_encoder(
    data: &PreparedData,
    encoder: &Encoder,
    extractor: &LogMelExtractor,
    cfg: &ExperimentConfig,
) -> Result<EvalResult, ExperimentError> {
    Ok(evaluate_with(
        &data.trials,
        |k| data.load_eval(k),
        encoder,
        extractor,
        cfg.eval.policy,
        cfg.eval.dcf,
    )?)
}

/// Trains and evaluates one sub-run, or returns the stored result when the
/// run directory already holds one for the same hash.
pub fn run_single(
    cfg: &ExperimentConfig,
    condition: &Condition,
    seed: u64,
    data: &PreparedData,
    out: &Path,
) -> Result<(RunResult, bool), ExperimentError> {
    let train_cfg = condition.apply(&cfg.train);
    let hash = run_hash(cfg, &train_cfg, seed);
    let dir = run_dir(out, &hash);
    let result_path = dir.join("result.json");
    if let Ok(text) = fs::read_to_string(&result_path) {
        if let Ok(r) = serde_json::from_str::<RunResult>(&text) {
            if r.config_hash == hash {
                return Ok((r, true));
            }
        }
    }
    fs::create_dir_all(&dir)?;
    let mut resolved = cfg.clone();
    resolved.train = train_cfg.clone();
    resolved.seed = seed;
    resolved.repeats = 1;
    resolved.grid = Default::default();
    fs::write(dir.join("config.toml"), resolved.to_toml())?;

    let extractor = LogMelExtractor::new(train_cfg.features.clone());
    let untrained = TrainState::new(&train_cfg, seed)?;
    let untrained_eer = evaluate_encoder(data, &untrained.model.encoder, &extractor, cfg)?.eer;
    let report = train(&data.train, &data.bank, &train_cfg, seed, Some(&RunOutput { dir: dir.clone() }))?;
    let encoder = &report.state.model.encoder;
    let result = evaluate_encoder(data, encoder, &extractor, cfg)?;
    write_scores(&dir.join("scores.txt"), &data.trials, &result.scores)?;
    let probe = match &cfg.eval.probe {
        Some(pcfg) => {
            let utts = data.eval_utterances();
            let refs: Vec<&Utterance> = utts.iter().collect();
            let mut rng = stream(seed, PROBE_STREAM);
            Some(channel_probe(encoder, &refs, &train_cfg.batch, &data.bank, &extractor, pcfg, &mut rng)?)
        }
        None => None,
    };
    let r = RunResult {
        condition: condition.clone(),
        dataset: cfg.dataset_name(),
        seed,
        config_hash: hash,
        eer: result.eer,
        min_dcf: result.min_dcf,
        untrained_eer: Some(untrained_eer),
        probe,
        iterations: report.metrics.len(),
    };
    let tmp = dir.join("result.json.tmp");
    fs::write(&tmp, serde_json::to_string_pretty(&r).expect("results serialize"))?;
    fs::rename(&tmp, &result_path)?;
    Ok((r, false))
}

/// A failed sub-run, kept so aggregation can say what is missing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub condition: Condition,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentOutcome {
    pub results: Vec<RunResult>,
    pub failures: Vec<RunFailure>,
    pub cache_hits: usize,
}

impl ExperimentOutcome {
    pub fn all_succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Runs every (condition, seed) pair. A failing sub-run is recorded and the
/// rest continue.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome, ExperimentError> {
    cfg.validate()?;
    cfg.check_paths()?;
    fs::create_dir_all(out)?;
    fs::write(out.join("experiment.toml"), cfg.to_toml())?;
    let data = prepare_data(&cfg.corpus)?;
    let mut outcome = ExperimentOutcome::default();
    for condition in cfg.conditions() {
        for seed in cfg.seeds() {
            match run_single(cfg, &condition, seed, &data, out) {
                Ok((r, hit)) => {
                    outcome.cache_hits += hit as usize;
                    outcome.results.push(r);
                }
                Err(e) => outcome.failures.push(RunFailure {
                    condition: condition.clone(),
                    seed,
                    error: e.to_string(),
                }),
            }
        }
    }
    Ok(outcome)
}

/// Every `result.json` under `out/runs`, in directory order.
pub fn collect_results(out: &Path) -> Result<Vec<RunResult>, ExperimentError> {
    let runs = out.join("runs");
    let mut dirs: Vec<PathBuf> = match fs::read_dir(&runs) {
        Ok(rd) => rd.filter_map(|e| e.ok().map(|e| e.path())).collect(),
        Err(_) => return Ok(Vec::new()),
    };
    dirs.sort();
    let mut results = Vec::new();
    for d in dirs {
        let p = d.join("result.json");
        if let Ok(text) = fs::read_to_string(&p) {
            results.push(
                serde_json::from_str(&text)
                    .map_err(|e| ExperimentError::Config(format!("{}: {e}", p.display())))?,
            );
        }
    }
    Ok(results)
}
