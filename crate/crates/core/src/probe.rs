//! A held-out channel probe: how much augmentation identity do embeddings
//! still carry?
//!
//! Held-out utterances go through the same three-view augmentation as a
//! training batch. The probe is a freshly initialized classifier with the
//! discriminator's architecture, trained to tell `e11 ⧺ e21` (shared channel)
//! from `e11 ⧺ e22` (different channels) on one half of the utterances and
//! scored on the other half.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{AugmentationBank, LogMelExtractor};
use crate::autograd::Graph;
use crate::encoder::{Encoder, Mode};
use crate::losses::{Discriminator, DiscriminatorConfig, DiscriminatorHead};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;
use crate::trainer::{form_batch, pair_inputs, BatchConfig, BatchEmbeddings, TrainError, Utterance};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden: usize,
    /// Augmentation draws per held-out utterance.
    pub draws_per_utterance: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 64,
            draws_per_utterance: 4,
            steps: 600,
            batch_size: 64,
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
}

/// Labelled pair inputs: rows of `[e_a ⧺ e_b]` and same-channel flags.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSet {
    pub inputs: Vec<Vec<f64>>,
    pub same: Vec<bool>,
}

impl ProbeSet {
    pub fn len(&self) -> usize {
        self.same.len()
    }

    pub fn is_empty(&self) -> bool {
        self.same.is_empty()
    }

    fn extend(&mut self, pairs: &Tensor, n: usize) {
        for r in 0..2 * n {
            self.inputs.push(pairs.row(r).to_vec());
            self.same.push(r < n);
        }
    }
}

/// Eval-mode probe pairs for `utts`, `draws_per_utterance` fresh draws each.
pub fn probe_pairs<R: Rng + ?Sized>(
    encoder: &Encoder,
    utts: &[&Utterance],
    batch: &BatchConfig,
    bank: &AugmentationBank,
    extractor: &LogMelExtractor,
    draws: usize,
    rng: &mut R,
) -> Result<ProbeSet, TrainError> {
    let mut set = ProbeSet { inputs: Vec::new(), same: Vec::new() };
    for _ in 0..draws {
        for chunk in utts.chunks(32) {
            let b = form_batch(chunk, batch, bank, extractor, rng)?;
            let maps = b.feature_maps();
            let emb = encoder.encode_batch(&maps)?;
            set.extend(&pair_inputs(&BatchEmbeddings::new(emb, chunk.len())), chunk.len());
        }
    }
    Ok(set)
}

fn accuracy(probe: &Discriminator, set: &ProbeSet) -> f64 {
    let correct = set
        .inputs
        .iter()
        .zip(&set.same)
        .filter(|(x, &same)| (probe.logit(x).expect("probe width matches its inputs") > 0.0) == same)
        .count();
    correct as f64 / set.len() as f64
}

/// Trains a fresh probe on `train` and reports accuracy on both sets.
pub fn fit_probe<R: Rng + ?Sized>(train: &ProbeSet, test: &ProbeSet, cfg: &ProbeConfig, rng: &mut R) -> ProbeResult {
    assert!(!train.is_empty() && !test.is_empty(), "probe sets must be non-empty");
    let dim = train.inputs[0].len();
    let dcfg = DiscriminatorConfig {
        hidden: cfg.hidden,
        head: DiscriminatorHead::SingleLogit,
    };
    let mut probe = Discriminator::new(dim / 2, dcfg, rng);
    let mut opt = Adam::new(probe.params(), AdamConfig::default());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let bs = cfg.batch_size.min(train.len()).max(2);
    for _ in 0..cfg.steps {
        if cursor + bs > order.len() {
            order.shuffle(rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + bs];
        cursor += bs;
        let mut data = Vec::with_capacity(bs * dim);
        let mut targets = Vec::with_capacity(bs);
        for &i in idx {
            data.extend_from_slice(&train.inputs[i]);
            targets.push(if train.same[i] { 1.0 } else { 0.0 });
        }
        let mut g = Graph::new();
        let p = probe.params().bind(&mut g, true);
        let x = g.constant(Tensor::from_vec(&[bs, dim], data));
        let (z, rec) = probe.forward(&mut g, &p, x, Mode::Train);
        let loss = g.bce_with_logits(z, &targets);
        let mut grads = g.backward(loss);
        let grads = p.grads(&mut grads);
        drop(p);
        opt.update(probe.params_mut(), &grads, cfg.lr);
        probe.update_running_stats(&rec);
    }
    ProbeResult {
        train_accuracy: accuracy(&probe, train),
        test_accuracy: accuracy(&probe, test),
        n_train: train.len(),
        n_test: test.len(),
    }
}

/// Splits `utts` in half by utterance, builds pairs for each half and fits a
/// probe. Pairs from one utterance never straddle the split.
pub fn channel_probe<R: Rng + ?Sized>(
    encoder: &Encoder,
    utts: &[&Utterance],
    batch: &BatchConfig,
    bank: &AugmentationBank,
    extractor: &LogMelExtractor,
    cfg: &ProbeConfig,
    rng: &mut R,
) -> Result<ProbeResult, TrainError> {
    if utts.len() < 2 {
        return Err(TrainError::ManifestTooSmall {
            available: utts.len(),
            needed: 2,
        });
    }
    let mut shuffled = utts.to_vec();
    shuffled.shuffle(rng);
    let (a, b) = shuffled.split_at(shuffled.len() / 2);
    let train = probe_pairs(encoder, a, batch, bank, extractor, cfg.draws_per_utterance, rng)?;
    let test = probe_pairs(encoder, b, batch, bank, extractor, cfg.draws_per_utterance, rng)?;
    Ok(fit_probe(&train, &test, cfg, rng))
}
