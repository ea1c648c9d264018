//! Batches of three views per utterance: `(1,1)`, `(2,1)` and `(2,2)`, where
//! the first index is the segment and the second the augmentation draw.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::audio::{
    augment, sample_segments, AugmentRegime, AugmentationBank, AugmentationSpec, FeatureMap, LogMelExtractor, Waveform,
};
use crate::tensor::Tensor;

/// One training utterance. Speaker identity is never needed for training.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub wave: Waveform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub segment_duration_s: f64,
    pub regime: AugmentRegime,
    pub augment_both_segments: bool,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            batch_size: 200,
            segment_duration_s: 1.8,
            regime: AugmentRegime::NoiseAndRir,
            augment_both_segments: true,
        }
    }
}

/// The three views of one utterance. `specs[v]` is `None` for a clean view;
/// views that share a draw hold the same `Arc`.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub utterance_id: String,
    pub seg1_span: std::ops::Range<usize>,
    pub seg2_span: std::ops::Range<usize>,
    pub specs: [Option<Arc<AugmentationSpec>>; 3],
    pub waves: [Waveform; 3],
    pub features: [FeatureMap; 3],
}

#[derive(Clone, Debug)]
pub struct TrainingBatch {
    pub items: Vec<BatchItem>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.items.iter().map(|i| i.utterance_id.as_str()).collect()
    }

    /// All `3N` feature maps, view-major: `(1,1) × N`, `(2,1) × N`, `(2,2) × N`.
    pub fn feature_maps(&self) -> Vec<&FeatureMap> {
        (0..3).flat_map(|v| self.items.iter().map(move |it| &it.features[v])).collect()
    }

    /// `[3N, 1, T, M]` in [`TrainingBatch::feature_maps`] order.
    pub fn stacked(&self) -> Tensor {
        let maps = self.feature_maps();
        let (t, m) = (maps[0].n_frames(), maps[0].n_mels());
        let data = maps.iter().flat_map(|f| f.values().iter().copied()).collect();
        Tensor::from_vec(&[maps.len(), 1, t, m], data)
    }
}

/// Builds the views for `utts`. `(1,1)` and `(2,1)` share one channel draw
/// (both clean when only one segment is augmented); `(2,2)` gets its own.
pub fn form_batch<R: Rng + ?Sized>(
    utts: &[&Utterance],
    cfg: &BatchConfig,
    bank: &AugmentationBank,
    extractor: &LogMelExtractor,
    rng: &mut R,
) -> Result<TrainingBatch> {
    let mut items = Vec::with_capacity(utts.len());
    for u in utts {
        let pair = sample_segments(&u.id, &u.wave, cfg.segment_duration_s, rng)?;
        let draw = |rng: &mut R| -> Result<Option<Arc<AugmentationSpec>>> {
            Ok(match cfg.regime {
                AugmentRegime::None => None,
                r => Some(Arc::new(bank.draw(r, cfg.augment_both_segments, pair.seg1.len(), rng)?)),
            })
        };
        let shared = if cfg.augment_both_segments { draw(rng)? } else { None };
        let own = draw(rng)?;
        let apply = |seg: &Waveform, spec: &Option<Arc<AugmentationSpec>>, rng: &mut R| -> Result<Waveform> {
            Ok(match spec {
                Some(s) => augment(seg, s, rng)?,
                None => seg.clone(),
            })
        };
        let waves = [
            apply(&pair.seg1, &shared, rng)?,
            apply(&pair.seg2, &shared, rng)?,
            apply(&pair.seg2, &own, rng)?,
        ];
        let features = [
            extractor.normalized(&waves[0])?,
            extractor.normalized(&waves[1])?,
            extractor.normalized(&waves[2])?,
        ];
        items.push(BatchItem {
            utterance_id: u.id.clone(),
            seg1_span: pair.seg1_span,
            seg2_span: pair.seg2_span,
            specs: [shared.clone(), shared, own],
            waves,
            features,
        });
    }
    Ok(TrainingBatch { items })
}

/// Shuffled utterance indices cut into full batches of `n`; the remainder
/// of the epoch is dropped.
pub fn epoch_batches<R: Rng + ?Sized>(corpus_len: usize, n: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if n == 0 || corpus_len < n {
        return Err(TrainError::ManifestTooSmall {
            available: corpus_len,
            needed: n,
        });
    }
    let mut order: Vec<usize> = (0..corpus_len).collect();
    order.shuffle(rng);
    Ok(order.chunks_exact(n).map(<[usize]>::to_vec).collect())
}
