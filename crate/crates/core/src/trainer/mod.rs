//! Self-supervised training with alternating discriminator and embedding
//! updates.

mod batch;
mod step;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioError, AugmentationBank, LogMelConfig, LogMelExtractor};
use crate::encoder::{Encoder, EncoderConfig, EncoderError};
use crate::losses::{Discriminator, DiscriminatorConfig, LossConfig, LossError, SimilarityParams};
use crate::optim::{Adam, AdamConfig, StepDecay};
use crate::params::{Checkpoint, CheckpointError, ParamSet};

pub use batch::{epoch_batches, form_batch, BatchConfig, BatchItem, TrainingBatch, Utterance};
pub use step::{
    discriminator_logits, discriminator_step, embedding_gradients, embedding_step, forward_batch, pair_inputs,
    BatchEmbeddings, EmbeddingOptimizer, ForwardPass, SpeakerModel, StepLosses,
};

#[derive(Error, Debug)]
pub enum TrainError {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("corpus has {available} utterances but a batch needs {needed}")]
    ManifestTooSmall { available: usize, needed: usize },
    #[error("non-finite {which} at iteration {iteration}; batch written to {}", dump.as_ref().map_or("<not saved>".into(), |p| p.display().to_string()))]
    NonFiniteLoss {
        iteration: usize,
        which: &'static str,
        dump: Option<PathBuf>,
    },
    #[error("invalid training config: {0}")]
    InvalidConfig(&'static str),
    #[error("checkpoint does not match the config: {0}")]
    CheckpointMismatch(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub lr: StepDecay,
    /// Checkpoint cadence in epochs; 0 disables checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 150,
            lr: StepDecay::default(),
            checkpoint_every: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: BatchConfig,
    pub schedule: TrainSchedule,
    pub loss: LossConfig,
    pub encoder: EncoderConfig,
    pub discriminator: DiscriminatorConfig,
    pub optimizer: AdamConfig,
    pub features: LogMelConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.loss.validate()?;
        if self.batch.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1"));
        }
        if !(self.batch.segment_duration_s > 0.0) {
            return Err(TrainError::InvalidConfig("segment_duration_s must be positive"));
        }
        if !(self.schedule.lr.initial_lr > 0.0 && self.schedule.lr.decay > 0.0) {
            return Err(TrainError::InvalidConfig("learning rate and decay must be positive"));
        }
        if self.features.n_mels != self.encoder.n_mels {
            return Err(TrainError::InvalidConfig("feature and encoder mel counts differ"));
        }
        if self.discriminator.hidden == 0 {
            return Err(TrainError::InvalidConfig("discriminator hidden size must be positive"));
        }
        Ok(())
    }
}

/// One metrics log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iter: usize,
    pub epoch: usize,
    #[serde(rename = "L_spk")]
    pub l_spk: f64,
    #[serde(rename = "L_dis")]
    pub l_dis: Option<f64>,
    #[serde(rename = "L_aat")]
    pub l_aat: Option<f64>,
    pub lr: f64,
}

/// Everything needed to continue or evaluate a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: SpeakerModel,
    pub discriminator: Discriminator,
    pub opt_f: EmbeddingOptimizer,
    pub opt_g: Adam,
    /// Epochs completed.
    pub epoch: usize,
    /// Iterations completed.
    pub iteration: usize,
}

/// Independent random streams derived from one seed.
pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const INIT_STREAM: u64 = 0;
const DATA_STREAM: u64 = 1;

impl TrainState {
    pub fn new(cfg: &TrainConfig, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, INIT_STREAM);
        let encoder = Encoder::new(cfg.encoder.clone(), &mut rng)?;
        let model = SpeakerModel::new(encoder, SimilarityParams::default());
        let discriminator = Discriminator::new(cfg.encoder.embed_dim, cfg.discriminator, &mut rng);
        Ok(TrainState {
            opt_f: EmbeddingOptimizer::new(&model, cfg.optimizer),
            opt_g: Adam::new(discriminator.params(), cfg.optimizer),
            model,
            discriminator,
            epoch: 0,
            iteration: 0,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut groups = std::collections::BTreeMap::new();
        let mut put = |k: &str, p: &ParamSet| {
            groups.insert(k.to_string(), p.clone());
        };
        put("encoder", self.model.encoder.params());
        put("encoder_buffers", self.model.encoder.buffers());
        put("similarity", &self.model.similarity);
        put("discriminator", self.discriminator.params());
        put("discriminator_buffers", self.discriminator.buffers());
        put("adam_f_encoder_m", &self.opt_f.encoder.m);
        put("adam_f_encoder_v", &self.opt_f.encoder.v);
        put("adam_f_similarity_m", &self.opt_f.similarity.m);
        put("adam_f_similarity_v", &self.opt_f.similarity.v);
        put("adam_g_m", &self.opt_g.m);
        put("adam_g_v", &self.opt_g.v);
        Checkpoint {
            meta: serde_json::json!({
                "encoder_config": self.model.encoder.config(),
                "discriminator_config": self.discriminator.config(),
                "adam_config": self.opt_g.config,
                "adam_steps": {
                    "f_encoder": self.opt_f.encoder.step,
                    "f_similarity": self.opt_f.similarity.step,
                    "g": self.opt_g.step,
                },
                "epoch": self.epoch,
                "iteration": self.iteration,
            }),
            groups,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = |key: &str| ck.meta.get(key).cloned().ok_or(TrainError::CheckpointMismatch("missing metadata"));
        fn parse<T: serde::de::DeserializeOwned>(v: serde_json::Value) -> Result<T> {
            serde_json::from_value(v).map_err(|_| TrainError::CheckpointMismatch("bad metadata"))
        }
        let enc_cfg: EncoderConfig = parse(meta("encoder_config")?)?;
        let disc_cfg: DiscriminatorConfig = parse(meta("discriminator_config")?)?;
        let adam: AdamConfig = parse(meta("adam_config")?)?;
        let steps = meta("adam_steps")?;
        let step = |k: &str| steps.get(k).and_then(|v| v.as_u64()).ok_or(TrainError::CheckpointMismatch("missing step count"));
        let count = |k: &str| -> Result<usize> { Ok(meta(k)?.as_u64().ok_or(TrainError::CheckpointMismatch("bad counter"))? as usize) };
        let group = |k: &str| -> Result<ParamSet> { Ok(ck.group(k)?.clone()) };
        let encoder = Encoder::from_parts(enc_cfg.clone(), group("encoder")?, group("encoder_buffers")?)?;
        let discriminator = Discriminator::from_parts(enc_cfg.embed_dim, disc_cfg, group("discriminator")?, group("discriminator_buffers")?)
            .ok_or(TrainError::CheckpointMismatch("discriminator tensors"))?;
        let model = SpeakerModel {
            encoder,
            similarity: group("similarity")?,
        };
        let adam_state = |m: &str, v: &str, s: u64| -> Result<Adam> {
            Ok(Adam {
                config: adam,
                step: s,
                m: group(m)?,
                v: group(v)?,
            })
        };
        Ok(TrainState {
            opt_f: EmbeddingOptimizer {
                encoder: adam_state("adam_f_encoder_m", "adam_f_encoder_v", step("f_encoder")?)?,
                similarity: adam_state("adam_f_similarity_m", "adam_f_similarity_v", step("f_similarity")?)?,
            },
            opt_g: adam_state("adam_g_m", "adam_g_v", step("g")?)?,
            model,
            discriminator,
            epoch: count("epoch")?,
            iteration: count("iteration")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// One iteration: discriminator first (when AAT is on), then the
    /// embedding update, both on the same batch and forward pass.
    pub fn iterate(&mut self, batch: &TrainingBatch, cfg: &LossConfig, lr: f64) -> (Option<f64>, StepLosses) {
        let fwd = forward_batch(&self.model, batch);
        let l_dis = cfg
            .aat_enabled
            .then(|| discriminator_step(&fwd.embeddings(), &mut self.discriminator, &mut self.opt_g, lr));
        let losses = embedding_step(fwd, &mut self.model, &self.discriminator, &mut self.opt_f, cfg, lr);
        self.iteration += 1;
        (l_dis, losses)
    }
}

/// Where a run writes its metrics log, checkpoints and failure dumps.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }

    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("checkpoint_epoch{epoch:04}.ckpt"))
    }

    pub fn final_checkpoint_path(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }
}

pub struct TrainReport {
    pub state: TrainState,
    pub metrics: Vec<IterationMetrics>,
}

fn dump_batch(out: Option<&RunOutput>, iteration: usize, batch: &TrainingBatch) -> Option<PathBuf> {
    let out = out?;
    let path = out.dir.join(format!("nonfinite_iter{iteration}.json"));
    let items: Vec<_> = batch
        .items
        .iter()
        .map(|it| {
            serde_json::json!({
                "utterance_id": it.utterance_id,
                "seg1_span": [it.seg1_span.start, it.seg1_span.end],
                "seg2_span": [it.seg2_span.start, it.seg2_span.end],
                "specs": it.specs.iter().map(|s| s.as_ref().map(|s| serde_json::json!({
                    "regime": s.regime,
                    "noise_category": s.noise_category,
                    "snr_db": s.snr_db,
                    "has_rir": s.rir.is_some(),
                }))).collect::<Vec<_>>(),
            })
        })
        .collect();
    fs::write(&path, serde_json::to_vec_pretty(&items).ok()?).ok()?;
    Some(path)
}

/// Trains from scratch. With `out`, appends one JSON line per iteration to
/// the metrics log and writes checkpoints atomically.
pub fn train(
    corpus: &[Utterance],
    bank: &AugmentationBank,
    cfg: &TrainConfig,
    seed: u64,
    out: Option<&RunOutput>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let extractor = LogMelExtractor::new(cfg.features.clone());
    let mut state = TrainState::new(cfg, seed)?;
    let mut rng = stream(seed, DATA_STREAM);
    let mut log = match out {
        Some(o) => {
            fs::create_dir_all(&o.dir)?;
            Some(fs::File::create(o.metrics_path())?)
        }
        None => None,
    };
    let mut metrics = Vec::new();
    for epoch in 0..cfg.schedule.epochs {
        let lr = cfg.schedule.lr.lr(epoch);
        for idx in epoch_batches(corpus.len(), cfg.batch.batch_size, &mut rng)? {
            let utts: Vec<&Utterance> = idx.iter().map(|&i| &corpus[i]).collect();
            let batch = form_batch(&utts, &cfg.batch, bank, &extractor, &mut rng)?;
            let (l_dis, losses) = state.iterate(&batch, &cfg.loss, lr);
            let bad = [
                ("L_spk", Some(losses.l_spk)),
                ("L_dis", l_dis),
                ("L_aat", losses.l_aat),
            ]
            .into_iter()
            .find(|(_, v)| v.is_some_and(|v| !v.is_finite()));
            if let Some((which, _)) = bad {
                return Err(TrainError::NonFiniteLoss {
                    iteration: state.iteration,
                    which,
                    dump: dump_batch(out, state.iteration, &batch),
                });
            }
            let m = IterationMetrics {
                iter: state.iteration,
                epoch,
                l_spk: losses.l_spk,
                l_dis,
                l_aat: losses.l_aat,
                lr,
            };
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&m).expect("metrics serialize"))?;
            }
            metrics.push(m);
        }
        state.epoch = epoch + 1;
        if let Some(o) = out {
            if cfg.schedule.checkpoint_every > 0 && state.epoch % cfg.schedule.checkpoint_every == 0 {
                state.save(&o.checkpoint_path(state.epoch))?;
            }
        }
    }
    if let Some(o) = out {
        state.save(&o.final_checkpoint_path())?;
    }
    Ok(TrainReport { state, metrics })
}
