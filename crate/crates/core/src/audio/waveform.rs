use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AudioError, Result, SAMPLE_RATE};

/// Mono audio at a fixed sample rate. Samples are finite and nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(AudioError::UnsupportedSampleRate(sample_rate));
        }
        if samples.is_empty() {
            return Err(AudioError::Empty);
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::NonFinite(i));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    /// A waveform at the pipeline's 16 kHz rate.
    pub fn at_16k(samples: Vec<f64>) -> Result<Self> {
        Self::new(samples, SAMPLE_RATE)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        power(&self.samples)
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// Copies `span` into a new waveform. Panics when the span is empty or out of range.
    pub fn crop(&self, span: Range<usize>) -> Waveform {
        assert!(!span.is_empty() && span.end <= self.samples.len());
        Waveform {
            samples: self.samples[span].to_vec(),
            sample_rate: self.sample_rate,
        }
    }

    pub(crate) fn with_samples(&self, samples: Vec<f64>) -> Waveform {
        Waveform {
            samples,
            sample_rate: self.sample_rate,
        }
    }

    pub(crate) fn require_pipeline_rate(&self) -> Result<()> {
        if self.sample_rate != SAMPLE_RATE {
            return Err(AudioError::UnsupportedSampleRate(self.sample_rate));
        }
        Ok(())
    }
}

pub(crate) fn power(samples: &[f64]) -> f64 {
    samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64
}

/// Two equal-length, non-overlapping crops of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentPair {
    pub utterance_id: String,
    pub seg1: Waveform,
    pub seg2: Waveform,
    pub seg1_span: Range<usize>,
    pub seg2_span: Range<usize>,
}

/// Number of samples in a crop of `duration_s` seconds.
pub fn segment_samples(duration_s: f64, sample_rate: u32) -> usize {
    (duration_s * sample_rate as f64).round() as usize
}

/// Draws two non-overlapping crops of `segment_duration_s` from `utt`.
///
/// Every placement of two disjoint equal-length spans is equally likely. A
/// placement is a pair of gap sizes `lo <= hi` in `0..=slack`, which maps
/// one-to-one onto a pair of distinct values `u < v` in `0..=slack + 1`
/// (`lo = u`, `hi = v - 1`); a fair coin then decides which span is `seg1`.
pub fn sample_segments<R: Rng + ?Sized>(
    utterance_id: &str,
    utt: &Waveform,
    segment_duration_s: f64,
    rng: &mut R,
) -> Result<SegmentPair> {
    let seg = segment_samples(segment_duration_s, utt.sample_rate());
    if seg == 0 || utt.len() < 2 * seg {
        return Err(AudioError::UtteranceTooShort {
            available: utt.len(),
            segment: seg,
        });
    }
    let slack = utt.len() - 2 * seg;
    let a = rng.random_range(0..=slack + 1);
    let mut b = rng.random_range(0..=slack);
    if b >= a {
        b += 1;
    }
    let (lo, hi) = (a.min(b), a.max(b) - 1);
    let first = lo..lo + seg;
    let second = hi + seg..hi + 2 * seg;
    let (seg1_span, seg2_span) = if rng.random_bool(0.5) {
        (first, second)
    } else {
        (second, first)
    };
    Ok(SegmentPair {
        utterance_id: utterance_id.to_string(),
        seg1: utt.crop(seg1_span.clone()),
        seg2: utt.crop(seg2_span.clone()),
        seg1_span,
        seg2_span,
    })
}
