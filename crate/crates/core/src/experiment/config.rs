//! Experiment configuration: the base training setup, the data it runs on,
//! evaluation settings and the condition grid to sweep.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::corpus::SynthConfig;
use super::ExperimentError;
use crate::audio::AugmentRegime;
use crate::eval::{DcfParams, EvalPolicy};
use crate::losses::SpeakerLoss;
use crate::probe::ProbeConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    /// Generated in memory. The first `n_speakers - held_out_speakers`
    /// speakers train; the rest form the verification and probe set.
    Synthetic {
        #[serde(default)]
        synth: SynthConfig,
        #[serde(default = "default_held_out")]
        held_out_speakers: usize,
        #[serde(default = "default_trials")]
        trials_per_class: usize,
        #[serde(default)]
        corpus_seed: u64,
        /// Noise recordings per category in the generated augmentation bank.
        #[serde(default = "default_bank_size")]
        bank_per_category: usize,
    },
    /// Audio on disk. Paths in manifests and trial lists resolve against
    /// `root`. Without noise or RIR manifests a generated bank is used.
    Files {
        root: PathBuf,
        train_manifest: PathBuf,
        trials: PathBuf,
        noise_manifest: Option<PathBuf>,
        rir_manifest: Option<PathBuf>,
    },
}

fn or<T: Clone>(v: &[T], d: T) -> Vec<T> {
    if v.is_empty() {
        vec![d]
    } else {
        v.to_vec()
    }
}

fn default_held_out() -> usize {
    8
}
fn default_trials() -> usize {
    300
}
fn default_bank_size() -> usize {
    4
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource::Synthetic {
            synth: SynthConfig::default(),
            held_out_speakers: default_held_out(),
            trials_per_class: default_trials(),
            corpus_seed: 0,
            bank_per_category: default_bank_size(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Name of the evaluation set in reports.
    pub dataset: Option<String>,
    pub policy: EvalPolicy,
    pub dcf: DcfParams,
    /// Also fit a held-out channel probe on every run.
    pub probe: Option<ProbeConfig>,
}

/// Axes of the condition matrix. Empty axes take the base config's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub speaker_loss: Vec<SpeakerLoss>,
    pub regime: Vec<AugmentRegime>,
    pub augment_both_segments: Vec<bool>,
    pub lambda: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub repeats: usize,
    /// Root seed; repeat `r` runs with seed `seed + r`.
    pub seed: u64,
    pub corpus: CorpusSource,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub grid: Grid,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            repeats: 3,
            seed: 0,
            corpus: CorpusSource::default(),
            train: TrainConfig::default(),
            eval: EvalSettings::default(),
            grid: Grid::default(),
        }
    }
}

/// One cell of the condition matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub speaker_loss: SpeakerLoss,
    pub regime: AugmentRegime,
    pub augment_both_segments: bool,
    pub lambda: f64,
    pub aat_enabled: bool,
}

impl Condition {
    pub fn of(cfg: &TrainConfig) -> Self {
        Condition {
            speaker_loss: cfg.loss.speaker_loss,
            regime: cfg.batch.regime,
            augment_both_segments: cfg.batch.augment_both_segments,
            lambda: cfg.loss.lambda,
            aat_enabled: cfg.loss.aat_enabled,
        }
    }

    pub fn apply(&self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        c.loss.speaker_loss = self.speaker_loss;
        c.batch.regime = self.regime;
        c.batch.augment_both_segments = self.augment_both_segments;
        c.loss.lambda = self.lambda;
        c.loss.aat_enabled = self.aat_enabled;
        c
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// The config with every default filled in.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialize")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.repeats == 0 {
            return Err(ExperimentError::Config("repeats must be at least 1".into()));
        }
        self.train.validate()?;
        if self.eval.policy.n_segments == 0 || !(self.eval.policy.segment_s > 0.0) {
            return Err(ExperimentError::Config("eval policy needs segments of positive length".into()));
        }
        if self.grid.lambda.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(ExperimentError::Config("grid lambdas must be finite and non-negative".into()));
        }
        match &self.corpus {
            CorpusSource::Synthetic {
                synth,
                held_out_speakers,
                ..
            } => {
                if synth.n_speakers < 2 {
                    return Err(ExperimentError::Config("synthetic corpus needs at least 2 speakers".into()));
                }
                if *held_out_speakers < 2 || *held_out_speakers >= synth.n_speakers {
                    return Err(ExperimentError::Config(
                        "held_out_speakers must be at least 2 and leave training speakers".into(),
                    ));
                }
            }
            CorpusSource::Files { .. } => {}
        }
        Ok(())
    }

    /// Fails with the full list of configured paths that do not exist.
    pub fn check_paths(&self) -> Result<(), ExperimentError> {
        if let CorpusSource::Files {
            root,
            train_manifest,
            trials,
            noise_manifest,
            rir_manifest,
        } = &self.corpus
        {
            let missing: Vec<PathBuf> = [Some(root), Some(train_manifest), Some(trials), noise_manifest.as_ref(), rir_manifest.as_ref()]
                .into_iter()
                .flatten()
                .filter(|p| !p.exists())
                .cloned()
                .collect();
            if !missing.is_empty() {
                return Err(ExperimentError::MissingPaths(missing));
            }
        }
        Ok(())
    }

    pub fn dataset_name(&self) -> String {
        self.eval.dataset.clone().unwrap_or_else(|| match self.corpus {
            CorpusSource::Synthetic { .. } => "synthetic".into(),
            CorpusSource::Files { .. } => "files".into(),
        })
    }

    /// The grid expanded in (loss, regime, both, lambda) order. A lambda of
    /// zero keeps the adversarial branch enabled so its loss is still logged.
    pub fn conditions(&self) -> Vec<Condition> {
        let base = Condition::of(&self.train);
        let mut out = Vec::new();
        for &speaker_loss in &or(&self.grid.speaker_loss, base.speaker_loss) {
            for &regime in &or(&self.grid.regime, base.regime) {
                for &augment_both_segments in &or(&self.grid.augment_both_segments, base.augment_both_segments) {
                    for &lambda in &or(&self.grid.lambda, base.lambda) {
                        out.push(Condition {
                            speaker_loss,
                            regime,
                            augment_both_segments,
                            lambda,
                            aat_enabled: base.aat_enabled,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64).map(|r| self.seed + r).collect()
    }
}
