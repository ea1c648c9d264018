//! Similarities, prototypical losses, the channel discriminator and the
//! adversarial objective.
//!
//! Each loss has a direct `f64` form, used for reporting and as a reference,
//! and a graph form that the trainer differentiates.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{log_sum_exp, softplus, Graph, Var};
use crate::encoder::{Mode, NormRecord, BN_EPS, BN_MOMENTUM};
use crate::params::{fan_in_uniform, Bound, ParamSet};
use crate::tensor::Tensor;

/// Lower bound enforced on the cosine scale after every update.
pub const W_MIN: f64 = 1e-6;

#[derive(Error, Debug, PartialEq)]
pub enum LossError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("cosine similarity of a zero vector is undefined")]
    ZeroVector,
    #[error("empty batch")]
    BatchEmpty,
    #[error("invalid loss config: {0}")]
    InvalidConfig(&'static str),
}

pub type Result<T> = std::result::Result<T, LossError>;

fn same_dim(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(LossError::DimensionMismatch(a.len(), b.len()));
    }
    Ok(())
}

/// `-‖a − b‖²`.
pub fn neg_l2_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    same_dim(a, b)?;
    Ok(-a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    same_dim(a, b)?;
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(LossError::ZeroVector);
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Learnable scale and offset of the angular similarity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityParams {
    pub w: f64,
    pub b: f64,
}

impl Default for SimilarityParams {
    fn default() -> Self {
        SimilarityParams { w: 10.0, b: -5.0 }
    }
}

impl SimilarityParams {
    pub fn to_params(self) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(self.w));
        p.insert("b", Tensor::scalar(self.b));
        p
    }

    pub fn from_params(p: &ParamSet) -> Self {
        SimilarityParams {
            w: p.tensor("w").item(),
            b: p.tensor("b").item(),
        }
    }
}

/// Restores `w >= W_MIN` inside a similarity parameter set.
pub fn clamp_scale(p: &mut ParamSet) {
    let w = p.get_mut("w").expect("similarity set has w");
    w.data_mut()[0] = w.data()[0].max(W_MIN);
}

/// `w · cos(a, b) + b`.
pub fn angular_similarity(a: &[f64], b: &[f64], p: SimilarityParams) -> Result<f64> {
    Ok(p.w * cosine(a, b)? + p.b)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeakerLoss {
    Prototypical,
    #[default]
    AngularPrototypical,
}

impl SpeakerLoss {
    pub fn label(self) -> &'static str {
        match self {
            SpeakerLoss::Prototypical => "P",
            SpeakerLoss::AngularPrototypical => "AP",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub speaker_loss: SpeakerLoss,
    pub lambda: f64,
    pub aat_enabled: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            speaker_loss: SpeakerLoss::AngularPrototypical,
            lambda: 3.0,
            aat_enabled: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(LossError::InvalidConfig("lambda must be finite and non-negative"));
        }
        Ok(())
    }

    /// Weight on the adversarial term; zero when AAT is off.
    pub fn effective_lambda(&self) -> f64 {
        if self.aat_enabled {
            self.lambda
        } else {
            0.0
        }
    }
}

/// Mean cross-entropy of each query's softmax over all prototypes, with the
/// matching prototype as the target.
pub fn prototypical_loss<S>(queries: &[Vec<f64>], prototypes: &[Vec<f64>], sim: S) -> Result<f64>
where
    S: Fn(&[f64], &[f64]) -> Result<f64>,
{
    if queries.is_empty() {
        return Err(LossError::BatchEmpty);
    }
    if queries.len() != prototypes.len() {
        return Err(LossError::DimensionMismatch(queries.len(), prototypes.len()));
    }
    let n = queries.len();
    let mut total = 0.0;
    for (i, q) in queries.iter().enumerate() {
        let row = prototypes.iter().map(|p| sim(q, p)).collect::<Result<Vec<_>>>()?;
        total += log_sum_exp(&row) - row[i];
    }
    Ok(total / n as f64)
}

/// Graph form of the speaker loss. `sim` holds the bound `(w, b)` and is
/// only read for the angular variant.
pub fn speaker_loss_graph(g: &mut Graph, queries: Var, prototypes: Var, kind: SpeakerLoss, sim: (Var, Var)) -> Var {
    let s = match kind {
        SpeakerLoss::Prototypical => g.neg_sq_dist(queries, prototypes),
        SpeakerLoss::AngularPrototypical => {
            let c = g.cosine(queries, prototypes);
            g.scalar_affine(c, sim.0, sim.1)
        }
    };
    g.diag_cross_entropy(s)
}

/// `−(1/2N) Σ [log σ(same_i) + log(1 − σ(diff_i))]` from logits.
pub fn discriminator_loss(same_logits: &[f64], diff_logits: &[f64]) -> Result<f64> {
    if same_logits.is_empty() || diff_logits.is_empty() {
        return Err(LossError::BatchEmpty);
    }
    if same_logits.len() != diff_logits.len() {
        return Err(LossError::DimensionMismatch(same_logits.len(), diff_logits.len()));
    }
    let n = same_logits.len() as f64;
    // −log σ(z) = softplus(−z); −log(1 − σ(z)) = softplus(z)
    let total: f64 = same_logits.iter().map(|z| softplus(-z)).sum::<f64>() + diff_logits.iter().map(|&z| softplus(z)).sum::<f64>();
    Ok(total / (2.0 * n))
}

/// Targets for a stacked `[same; diff]` logit column.
pub fn channel_targets(n: usize) -> Vec<f64> {
    let mut t = vec![1.0; n];
    t.resize(2 * n, 0.0);
    t
}

/// `L_spk + λ·L_aat`; exactly `L_spk` when AAT is disabled.
pub fn overall_loss(l_spk: f64, l_aat: f64, cfg: &LossConfig) -> f64 {
    if cfg.aat_enabled {
        l_spk + cfg.lambda * l_aat
    } else {
        l_spk
    }
}

/// Output layer of the discriminator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorHead {
    /// One logit read through a sigmoid.
    #[default]
    SingleLogit,
    /// Two logits under a softmax; their difference is the equivalent
    /// single logit.
    TwoLogit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub hidden: usize,
    pub head: DiscriminatorHead,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            hidden: 512,
            head: DiscriminatorHead::SingleLogit,
        }
    }
}

/// The channel classifier `g`: `Linear(2D → H) → ReLU → BatchNorm → Linear(H → 1|2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    embed_dim: usize,
    params: ParamSet,
    buffers: ParamSet,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(embed_dim: usize, config: DiscriminatorConfig, rng: &mut R) -> Self {
        let mut d = Self::zeroed(embed_dim, config);
        let (h, inp, out) = (config.hidden, 2 * embed_dim, d.outputs());
        *d.params.get_mut("fc1.weight").unwrap() = fan_in_uniform(&[h, inp], inp, rng);
        *d.params.get_mut("bn.gamma").unwrap() = Tensor::full(&[h], 1.0);
        *d.params.get_mut("fc2.weight").unwrap() = fan_in_uniform(&[out, h], h, rng);
        d
    }

    /// All parameters zero, so every logit is zero.
    pub fn zeroed(embed_dim: usize, config: DiscriminatorConfig) -> Self {
        let h = config.hidden;
        let out = match config.head {
            DiscriminatorHead::SingleLogit => 1,
            DiscriminatorHead::TwoLogit => 2,
        };
        let mut params = ParamSet::new();
        params.insert("fc1.weight", Tensor::zeros(&[h, 2 * embed_dim]));
        params.insert("fc1.bias", Tensor::zeros(&[h]));
        params.insert("bn.gamma", Tensor::zeros(&[h]));
        params.insert("bn.beta", Tensor::zeros(&[h]));
        params.insert("fc2.weight", Tensor::zeros(&[out, h]));
        params.insert("fc2.bias", Tensor::zeros(&[out]));
        let mut buffers = ParamSet::new();
        buffers.insert("bn.running_mean", Tensor::zeros(&[h]));
        buffers.insert("bn.running_var", Tensor::full(&[h], 1.0));
        Discriminator {
            config,
            embed_dim,
            params,
            buffers,
        }
    }

    pub fn from_parts(embed_dim: usize, config: DiscriminatorConfig, params: ParamSet, buffers: ParamSet) -> Option<Self> {
        let reference = Self::zeroed(embed_dim, config);
        let fits = |a: &ParamSet, b: &ParamSet| {
            a.names() == b.names() && a.tensors().iter().zip(b.tensors()).all(|(x, y)| x.shape() == y.shape())
        };
        (fits(&reference.params, &params) && fits(&reference.buffers, &buffers)).then_some(Discriminator {
            config,
            embed_dim,
            params,
            buffers,
        })
    }

    fn outputs(&self) -> usize {
        self.params.tensor("fc2.bias").len()
    }

    pub fn config(&self) -> DiscriminatorConfig {
        self.config
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamSet {
        &self.buffers
    }

    /// `pairs [n, 2D]` → logits `[n, 1]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, pairs: Var, mode: Mode) -> (Var, NormRecord) {
        let mut rec = Vec::new();
        let h = g.linear(pairs, p.var("fc1.weight"), Some(p.var("fc1.bias")));
        let h = g.relu(h);
        let (gamma, beta) = (p.var("bn.gamma"), p.var("bn.beta"));
        let h = match mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm(h, gamma, beta, BN_EPS);
                rec.push(("bn".to_string(), stats));
                y
            }
            Mode::Eval => {
                let (m, v) = (self.buffers.tensor("bn.running_mean"), self.buffers.tensor("bn.running_var"));
                g.frozen_norm(h, gamma, beta, m.data(), v.data(), BN_EPS)
            }
        };
        let z = g.linear(h, p.var("fc2.weight"), Some(p.var("fc2.bias")));
        let z = match self.config.head {
            DiscriminatorHead::SingleLogit => z,
            DiscriminatorHead::TwoLogit => g.column_diff(z),
        };
        (z, rec)
    }

    pub fn update_running_stats(&mut self, rec: &NormRecord) {
        for (_, stats) in rec {
            for (key, fresh) in [("bn.running_mean", &stats.mean), ("bn.running_var", &stats.var)] {
                let buf = self.buffers.get_mut(key).unwrap();
                for (r, v) in buf.data_mut().iter_mut().zip(fresh) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                }
            }
        }
    }

    /// Inference-mode logit of one concatenated pair `e_a ⧺ e_b`.
    pub fn logit(&self, pair: &[f64]) -> Result<f64> {
        if pair.len() != 2 * self.embed_dim {
            return Err(LossError::DimensionMismatch(pair.len(), 2 * self.embed_dim));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(Tensor::from_vec(&[1, pair.len()], pair.to_vec()));
        let (z, _) = self.forward(&mut g, &p, x, Mode::Eval);
        Ok(g.value(z).item())
    }
}

/// Splits stacked embeddings `[(1,1) × N; (2,1) × N; (2,2) × N]` into the
/// discriminator batch `[same × N; diff × N]` of shape `[2N, 2D]`, where
/// `same_i = e_{i,1,1} ⧺ e_{i,2,1}` and `diff_i = e_{i,1,1} ⧺ e_{i,2,2}`.
pub fn channel_pairs(g: &mut Graph, emb: Var, n: usize) -> Var {
    let a = g.slice_rows(emb, 0, n);
    let b = g.slice_rows(emb, n, n);
    let c = g.slice_rows(emb, 2 * n, n);
    let same = g.concat_cols(a, b);
    let diff = g.concat_cols(a, c);
    g.concat_rows(same, diff)
}
