//! The speaker embedding extractor: a thin residual network over log-mel
//! features, self-attentive pooling over time, and a linear projection.
//!
//! Input layout is `[B, 1, T, M]` with time as height and mel bins as width.
//! Stages 2 to 4 halve both axes with stride-2 convolutions (kernel 3, pad 1),
//! which maps `T` frames to `floor((T - 1) / 2) + 1`. That never reaches zero,
//! so any `T >= 1` survives the stack: the minimum input length is one frame.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::FeatureMap;
use crate::autograd::{Graph, NormStats, Var};
use crate::params::{fan_in_uniform, he_normal, Bound, ParamSet};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Error, Debug, PartialEq)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(&'static str),
    #[error("input has {frames} frames; the encoder needs at least {minimum}")]
    InputTooShort { frames: usize, minimum: usize },
    #[error("input has {found} mel bins, the encoder was built for {expected}")]
    MelMismatch { expected: usize, found: usize },
    #[error("batched inputs must share one length ({0} and {1} frames)")]
    RaggedBatch(usize, usize),
    #[error("empty batch")]
    EmptyBatch,
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub channel_widths: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub attention_hidden: usize,
    pub n_mels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            embed_dim: 512,
            channel_widths: [16, 32, 64, 128],
            blocks_per_stage: [3, 4, 6, 3],
            attention_hidden: 128,
            n_mels: 40,
        }
    }
}

impl EncoderConfig {
    /// The same topology at full ResNet-34 width.
    pub fn full_width() -> Self {
        EncoderConfig {
            channel_widths: [64, 128, 256, 512],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(EncoderError::InvalidConfig("embed_dim must be positive"));
        }
        if self.channel_widths.contains(&0) {
            return Err(EncoderError::InvalidConfig("channel widths must be positive"));
        }
        if self.blocks_per_stage.contains(&0) {
            return Err(EncoderError::InvalidConfig("every stage needs at least one block"));
        }
        if self.attention_hidden == 0 || self.n_mels == 0 {
            return Err(EncoderError::InvalidConfig("attention_hidden and n_mels must be positive"));
        }
        Ok(())
    }

    pub fn pooled_channels(&self) -> usize {
        self.channel_widths[3]
    }
}

fn downsampled(n: usize) -> usize {
    (n - 1) / 2 + 1
}

/// Frames left after the convolutional stack for an input of `frames`.
pub fn output_frames(frames: usize) -> usize {
    (0..3).fold(frames, |t, _| downsampled(t))
}

/// Smallest accepted input length, found by walking the stack's arithmetic.
pub fn min_input_frames() -> usize {
    (1..).find(|&t| output_frames(t) >= 1).unwrap()
}

/// Whether normalization layers use batch statistics or running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics gathered by a training-mode forward pass, keyed by layer.
pub type NormRecord = Vec<(String, NormStats)>;

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    params: ParamSet,
    buffers: ParamSet,
}

struct Builder<'a, R: ?Sized> {
    params: ParamSet,
    buffers: ParamSet,
    rng: Option<&'a mut R>,
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn conv(&mut self, name: String, cout: usize, cin: usize, k: usize) {
        let shape = [cout, cin, k, k];
        let t = match self.rng.as_deref_mut() {
            Some(rng) => he_normal(&shape, cin * k * k, rng),
            None => Tensor::zeros(&shape),
        };
        self.params.insert(name, t);
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize) {
        let t = match self.rng.as_deref_mut() {
            Some(rng) => fan_in_uniform(&[out, inp], inp, rng),
            None => Tensor::zeros(&[out, inp]),
        };
        self.params.insert(format!("{name}.weight"), t);
    }

    fn norm(&mut self, name: String, c: usize) {
        let one = if self.rng.is_some() { 1.0 } else { 0.0 };
        self.params.insert(format!("{name}.gamma"), Tensor::full(&[c], one));
        self.params.insert(format!("{name}.beta"), Tensor::zeros(&[c]));
        self.buffers.insert(format!("{name}.running_mean"), Tensor::zeros(&[c]));
        self.buffers.insert(format!("{name}.running_var"), Tensor::full(&[c], 1.0));
    }
}

impl Encoder {
    /// He-initialized convolutions, unit norm scales, zero biases.
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        Self::build(config, Some(rng))
    }

    /// Every parameter set to zero. Same structure as [`Encoder::new`].
    pub fn zeroed(config: EncoderConfig) -> Result<Self> {
        Self::build::<rand_chacha::ChaCha8Rng>(config, None)
    }

    fn build<R: Rng + ?Sized>(config: EncoderConfig, rng: Option<&mut R>) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            params: ParamSet::new(),
            buffers: ParamSet::new(),
            rng,
        };
        let w = config.channel_widths;
        b.conv("stem.conv.weight".into(), w[0], 1, 3);
        b.norm("stem.bn".into(), w[0]);
        let mut cin = w[0];
        for s in 0..4 {
            for k in 0..config.blocks_per_stage[s] {
                let p = format!("stage{}.block{k}", s + 1);
                let stride = if s > 0 && k == 0 { 2 } else { 1 };
                b.conv(format!("{p}.conv1.weight"), w[s], cin, 3);
                b.norm(format!("{p}.bn1"), w[s]);
                b.conv(format!("{p}.conv2.weight"), w[s], w[s], 3);
                b.norm(format!("{p}.bn2"), w[s]);
                if stride != 1 || cin != w[s] {
                    b.conv(format!("{p}.shortcut.conv.weight"), w[s], cin, 1);
                    b.norm(format!("{p}.shortcut.bn"), w[s]);
                }
                cin = w[s];
            }
        }
        let (c, h, d) = (config.pooled_channels(), config.attention_hidden, config.embed_dim);
        b.linear("pool.attention", h, c);
        b.params.insert("pool.attention.bias", Tensor::zeros(&[h]));
        b.linear("pool.score", 1, h);
        b.linear("projection", d, c);
        b.params.insert("projection.bias", Tensor::zeros(&[d]));
        Ok(Encoder {
            config,
            params: b.params,
            buffers: b.buffers,
        })
    }

    /// Reassembles an encoder from stored tensors, checking names and shapes.
    pub fn from_parts(config: EncoderConfig, params: ParamSet, buffers: ParamSet) -> Result<Self> {
        let reference = Self::zeroed(config.clone())?;
        let same = |a: &ParamSet, b: &ParamSet| {
            a.names() == b.names() && a.tensors().iter().zip(b.tensors()).all(|(x, y)| x.shape() == y.shape())
        };
        if !same(&reference.params, &params) || !same(&reference.buffers, &buffers) {
            return Err(EncoderError::InvalidConfig("stored tensors do not match the config"));
        }
        Ok(Encoder {
            config,
            params,
            buffers,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Running normalization statistics (not trained by gradient).
    pub fn buffers(&self) -> &ParamSet {
        &self.buffers
    }

    fn norm(&self, g: &mut Graph, p: &Bound, x: Var, name: &str, mode: Mode, rec: &mut NormRecord) -> Var {
        let (gamma, beta) = (p.var(&format!("{name}.gamma")), p.var(&format!("{name}.beta")));
        match mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm(x, gamma, beta, BN_EPS);
                rec.push((name.to_string(), stats));
                y
            }
            Mode::Eval => {
                let mean = self.buffers.tensor(&format!("{name}.running_mean")).data();
                let var = self.buffers.tensor(&format!("{name}.running_var")).data();
                g.frozen_norm(x, gamma, beta, mean, var, BN_EPS)
            }
        }
    }

    /// `x [B, 1, T, M]` → embeddings `[B, D]`. `p` must be this encoder's
    /// parameters bound on `g`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, mode: Mode) -> (Var, NormRecord) {
        let mut rec = Vec::new();
        let y = g.conv2d(x, p.var("stem.conv.weight"), 1, 1);
        let y = self.norm(g, p, y, "stem.bn", mode, &mut rec);
        let mut y = g.relu(y);
        for s in 0..4 {
            for k in 0..self.config.blocks_per_stage[s] {
                let n = format!("stage{}.block{k}", s + 1);
                let stride = if s > 0 && k == 0 { 2 } else { 1 };
                let h = g.conv2d(y, p.var(&format!("{n}.conv1.weight")), stride, 1);
                let h = self.norm(g, p, h, &format!("{n}.bn1"), mode, &mut rec);
                let h = g.relu(h);
                let h = g.conv2d(h, p.var(&format!("{n}.conv2.weight")), 1, 1);
                let h = self.norm(g, p, h, &format!("{n}.bn2"), mode, &mut rec);
                let shortcut = if self.params.index_of(&format!("{n}.shortcut.conv.weight")).is_some() {
                    let sc = g.conv2d(y, p.var(&format!("{n}.shortcut.conv.weight")), stride, 0);
                    self.norm(g, p, sc, &format!("{n}.shortcut.bn"), mode, &mut rec)
                } else {
                    y
                };
                let sum = g.add(h, shortcut);
                y = g.relu(sum);
            }
        }
        // [B, C, T', M'] → mean over frequency → [B, T', C]
        let y = g.mean_last_axis(y);
        let frames = g.swap_last_two(y);
        let shape = g.value(frames).shape().to_vec();
        let (b, t, c) = (shape[0], shape[1], shape[2]);
        let flat = g.reshape(frames, &[b * t, c]);
        let hidden = g.linear(flat, p.var("pool.attention.weight"), Some(p.var("pool.attention.bias")));
        let hidden = g.tanh(hidden);
        let scores = g.linear(hidden, p.var("pool.score.weight"), None);
        let scores = g.reshape(scores, &[b, t]);
        let pooled = g.softmax_pool(frames, scores);
        let emb = g.linear(pooled, p.var("projection.weight"), Some(p.var("projection.bias")));
        (emb, rec)
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, rec: &NormRecord) {
        for (name, stats) in rec {
            for (key, fresh) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
                let buf = self
                    .buffers
                    .get_mut(&format!("{name}.{key}"))
                    .expect("statistics come from this encoder's layers");
                for (r, v) in buf.data_mut().iter_mut().zip(fresh) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                }
            }
        }
    }

    /// Checks one feature map against the encoder's input contract.
    pub fn check_input(&self, fm: &FeatureMap) -> Result<()> {
        if fm.n_mels() != self.config.n_mels {
            return Err(EncoderError::MelMismatch {
                expected: self.config.n_mels,
                found: fm.n_mels(),
            });
        }
        let minimum = min_input_frames();
        if fm.n_frames() < minimum {
            return Err(EncoderError::InputTooShort {
                frames: fm.n_frames(),
                minimum,
            });
        }
        Ok(())
    }

    /// Stacks equal-length feature maps into `[B, 1, T, M]`.
    pub fn stack(&self, maps: &[&FeatureMap]) -> Result<Tensor> {
        let first = maps.first().ok_or(EncoderError::EmptyBatch)?;
        let mut data = Vec::with_capacity(maps.len() * first.values().len());
        for fm in maps {
            self.check_input(fm)?;
            if fm.n_frames() != first.n_frames() {
                return Err(EncoderError::RaggedBatch(first.n_frames(), fm.n_frames()));
            }
            data.extend_from_slice(fm.values());
        }
        Ok(Tensor::from_vec(&[maps.len(), 1, first.n_frames(), first.n_mels()], data))
    }

    /// Inference on equal-length maps: `[B, D]`.
    pub fn encode_batch(&self, maps: &[&FeatureMap]) -> Result<Tensor> {
        let x = self.stack(maps)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(x);
        let (emb, _) = self.forward(&mut g, &p, x, Mode::Eval);
        Ok(g.value(emb).clone())
    }

    /// Inference on one feature map of any accepted length.
    pub fn encode(&self, fm: &FeatureMap) -> Result<Vec<f64>> {
        Ok(self.encode_batch(&[fm])?.into_data())
    }

    /// The pooling layer's weights, for calling [`attentive_pool`] directly.
    pub fn attention(&self) -> AttentionParams<'_> {
        AttentionParams {
            hidden_weight: self.params.tensor("pool.attention.weight"),
            hidden_bias: self.params.tensor("pool.attention.bias"),
            score_weight: self.params.tensor("pool.score.weight"),
        }
    }

    pub fn parameter_summary(&self) -> ParameterSummary {
        parameter_summary(&self.params)
    }
}

/// Scoring network of self-attentive pooling:
/// `score_t = v · tanh(W h_t + b)`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams<'a> {
    pub hidden_weight: &'a Tensor,
    pub hidden_bias: &'a Tensor,
    pub score_weight: &'a Tensor,
}

/// Pools `frames` (`T'` rows of `C` values) into one `C`-vector. Returns the
/// pooled vector and the attention weights.
pub fn attentive_pool(frames: &[Vec<f64>], att: AttentionParams<'_>) -> (Vec<f64>, Vec<f64>) {
    assert!(!frames.is_empty(), "pooling needs at least one frame");
    let c = frames[0].len();
    let h = att.hidden_bias.len();
    let w = att.hidden_weight.data();
    let scores: Vec<f64> = frames
        .iter()
        .map(|f| {
            assert_eq!(f.len(), c);
            (0..h)
                .map(|j| {
                    let pre: f64 = att.hidden_bias.data()[j] + (0..c).map(|i| w[j * c + i] * f[i]).sum::<f64>();
                    att.score_weight.data()[j] * pre.tanh()
                })
                .sum()
        })
        .collect();
    let mut weights = vec![0.0; frames.len()];
    crate::autograd::softmax_into(&scores, &mut weights);
    let mut pooled = vec![0.0; c];
    for (a, f) in weights.iter().zip(frames) {
        for (p, v) in pooled.iter_mut().zip(f) {
            *p += a * v;
        }
    }
    (pooled, weights)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParameterSummary {
    pub total: usize,
    /// `(group, count)` in network order: stem, stage1..stage4, pool, projection.
    pub groups: Vec<(String, usize)>,
}

pub fn parameter_summary(params: &ParamSet) -> ParameterSummary {
    let mut groups: Vec<(String, usize)> = Vec::new();
    for (name, t) in params.iter() {
        let group = name.split('.').next().unwrap_or(name);
        match groups.last_mut() {
            Some((g, n)) if g == group => *n += t.len(),
            _ => groups.push((group.to_string(), t.len())),
        }
    }
    ParameterSummary {
        total: params.count(),
        groups,
    }
}
