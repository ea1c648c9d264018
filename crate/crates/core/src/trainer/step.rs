//! The two phases of one iteration.
//!
//! The encoder runs once per batch. [`discriminator_step`] sees only the
//! detached embeddings, so it cannot touch the encoder. [`embedding_step`]
//! differentiates the same forward pass with the discriminator bound as
//! constants behind a gradient reversal node.

use crate::autograd::{Graph, Var};
use crate::encoder::{Encoder, Mode, NormRecord};
use crate::losses::{
    channel_pairs, channel_targets, clamp_scale, discriminator_loss, overall_loss, speaker_loss_graph,
    Discriminator, LossConfig, SimilarityParams,
};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamSet;
use crate::tensor::Tensor;

use super::TrainingBatch;

/// The embedding extractor `f` together with the similarity scale and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerModel {
    pub encoder: Encoder,
    pub similarity: ParamSet,
}

impl SpeakerModel {
    pub fn new(encoder: Encoder, similarity: SimilarityParams) -> Self {
        SpeakerModel {
            encoder,
            similarity: similarity.to_params(),
        }
    }

    pub fn similarity_params(&self) -> SimilarityParams {
        SimilarityParams::from_params(&self.similarity)
    }
}

/// Optimizer state of `f`: the encoder and the similarity parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingOptimizer {
    pub encoder: Adam,
    pub similarity: Adam,
}

impl EmbeddingOptimizer {
    pub fn new(model: &SpeakerModel, config: AdamConfig) -> Self {
        EmbeddingOptimizer {
            encoder: Adam::new(model.encoder.params(), config),
            similarity: Adam::new(&model.similarity, config),
        }
    }
}

/// Embedding values of a batch, cut off from the graph that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchEmbeddings {
    values: Tensor,
    n: usize,
}

impl BatchEmbeddings {
    /// `values` is `[3N, D]` in view-major order.
    pub fn new(values: Tensor, n: usize) -> Self {
        assert_eq!(values.shape()[0], 3 * n);
        BatchEmbeddings { values, n }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Row `i` of view `v` (0 = `(1,1)`, 1 = `(2,1)`, 2 = `(2,2)`).
    pub fn view(&self, v: usize, i: usize) -> &[f64] {
        self.values.row(v * self.n + i)
    }
}

/// A training-mode forward pass of `f` over a whole batch.
pub struct ForwardPass {
    graph: Graph,
    encoder_vars: Vec<Var>,
    similarity_vars: (Var, Var),
    embeddings: Var,
    n: usize,
    norm: NormRecord,
}

impl ForwardPass {
    pub fn embeddings(&self) -> BatchEmbeddings {
        BatchEmbeddings::new(self.graph.value(self.embeddings).clone(), self.n)
    }
}

pub fn forward_batch(model: &SpeakerModel, batch: &TrainingBatch) -> ForwardPass {
    let mut graph = Graph::new();
    let p = model.encoder.params().bind(&mut graph, true);
    let s = model.similarity.bind(&mut graph, true);
    let x = graph.constant(batch.stacked());
    let (embeddings, norm) = model.encoder.forward(&mut graph, &p, x, Mode::Train);
    ForwardPass {
        encoder_vars: p.vars().to_vec(),
        similarity_vars: (s.var("w"), s.var("b")),
        graph,
        embeddings,
        n: batch.len(),
        norm,
    }
}

/// Stacked discriminator inputs `[same × N; diff × N]`, shape `[2N, 2D]`.
pub fn pair_inputs(emb: &BatchEmbeddings) -> Tensor {
    let mut g = Graph::new();
    let e = g.constant(emb.values.clone());
    let pairs = channel_pairs(&mut g, e, emb.n);
    g.value(pairs).clone()
}

/// Training-mode logits of `g` on detached embeddings, without updating it.
pub fn discriminator_logits(emb: &BatchEmbeddings, disc: &Discriminator) -> Vec<f64> {
    let mut graph = Graph::new();
    let p = disc.params().bind(&mut graph, false);
    let x = graph.constant(pair_inputs(emb));
    let (z, _) = disc.forward(&mut graph, &p, x, Mode::Train);
    graph.value(z).data().to_vec()
}

/// One update of `g` on detached embeddings. Returns `L_dis` before the update.
pub fn discriminator_step(emb: &BatchEmbeddings, disc: &mut Discriminator, opt: &mut Adam, lr: f64) -> f64 {
    let mut graph = Graph::new();
    let p = disc.params().bind(&mut graph, true);
    let x = graph.constant(pair_inputs(emb));
    let (z, rec) = disc.forward(&mut graph, &p, x, Mode::Train);
    let loss = graph.bce_with_logits(z, &channel_targets(emb.n));
    let mut grads = graph.backward(loss);
    let grads = p.grads(&mut grads);
    let value = graph.value(loss).item();
    drop(p);
    opt.update(disc.params_mut(), &grads, lr);
    disc.update_running_stats(&rec);
    value
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub l_spk: f64,
    /// `None` when AAT is disabled.
    pub l_aat: Option<f64>,
    pub l_overall: f64,
}

/// Graph of `L_spk + λ·L_aat` on `fwd`, returning `(root, l_spk, l_aat)`.
/// The adversarial branch is only attached when `λ > 0`; its value is
/// still reported for any enabled config.
fn objective(fwd: &mut ForwardPass, disc: &Discriminator, cfg: &LossConfig) -> (Var, f64, Option<f64>) {
    let n = fwd.n;
    let g = &mut fwd.graph;
    let q = g.slice_rows(fwd.embeddings, 0, n);
    let p = g.slice_rows(fwd.embeddings, 2 * n, n);
    let l_spk = speaker_loss_graph(g, q, p, cfg.speaker_loss, fwd.similarity_vars);
    let spk_value = g.value(l_spk).item();
    if !cfg.aat_enabled {
        return (l_spk, spk_value, None);
    }
    if cfg.lambda == 0.0 {
        let emb = BatchEmbeddings::new(g.value(fwd.embeddings).clone(), n);
        let z = discriminator_logits(&emb, disc);
        let l_aat = discriminator_loss(&z[..n], &z[n..]).expect("batch is non-empty");
        return (l_spk, spk_value, Some(l_aat));
    }
    let reversed = g.reverse_grad(fwd.embeddings);
    let pairs = channel_pairs(g, reversed, n);
    let frozen = disc.params().bind(g, false);
    let (z, _) = disc.forward(g, &frozen, pairs, Mode::Train);
    let l_aat = g.bce_with_logits(z, &channel_targets(n));
    let aat_value = g.value(l_aat).item();
    let weighted = g.scale(l_aat, cfg.lambda);
    let root = g.add(l_spk, weighted);
    (root, spk_value, Some(aat_value))
}

/// Gradients of the embedding objective with respect to the encoder and the
/// similarity parameters, in parameter-set order, plus the losses.
pub fn embedding_gradients(
    fwd: &mut ForwardPass,
    disc: &Discriminator,
    cfg: &LossConfig,
) -> (Vec<Tensor>, Vec<Tensor>, StepLosses) {
    let (root, l_spk, l_aat) = objective(fwd, disc, cfg);
    let mut grads = fwd.graph.backward(root);
    let mut take = |v: Var| grads.take(v).expect("root depends on every bound parameter");
    let enc: Vec<Tensor> = fwd.encoder_vars.iter().map(|&v| take(v)).collect();
    let (w, b) = fwd.similarity_vars;
    let sim = match cfg.speaker_loss {
        crate::losses::SpeakerLoss::AngularPrototypical => vec![take(w), take(b)],
        crate::losses::SpeakerLoss::Prototypical => vec![Tensor::zeros(&[1]), Tensor::zeros(&[1])],
    };
    let l_overall = overall_loss(l_spk, l_aat.unwrap_or(0.0), cfg);
    debug_assert!(
        !cfg.aat_enabled || cfg.lambda == 0.0 || !l_overall.is_finite() || fwd.graph.value(root).item() == l_overall
    );
    (
        enc,
        sim,
        StepLosses {
            l_spk,
            l_aat,
            l_overall,
        },
    )
}

/// One update of `f` (encoder, `w`, `b`) with `g` frozen.
pub fn embedding_step(
    mut fwd: ForwardPass,
    model: &mut SpeakerModel,
    disc: &Discriminator,
    opt: &mut EmbeddingOptimizer,
    cfg: &LossConfig,
    lr: f64,
) -> StepLosses {
    let (enc, sim, losses) = embedding_gradients(&mut fwd, disc, cfg);
    opt.encoder.update(model.encoder.params_mut(), &enc, lr);
    opt.similarity.update(&mut model.similarity, &sim, lr);
    clamp_scale(&mut model.similarity);
    model.encoder.update_running_stats(&fwd.norm);
    losses
}
