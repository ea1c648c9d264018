//! Waveforms in, augmented log-mel feature maps out.

mod augment;
mod features;
pub mod manifest;
mod waveform;
pub mod wav;

use std::path::PathBuf;

use thiserror::Error;

pub use augment::{
    augment, convolve_rir, measured_snr_db, mix_noise_at_snr, AugmentRegime, AugmentationBank,
    AugmentationSpec, NoiseCategory,
};
pub use features::{instance_normalize, FeatureMap, LogMelConfig, LogMelExtractor};
pub use waveform::{sample_segments, segment_samples, SegmentPair, Waveform};

/// The only sample rate the pipeline accepts.
pub const SAMPLE_RATE: u32 = 16_000;

pub type Result<T> = std::result::Result<T, AudioError>;

#[derive(Error, Debug)]
pub enum AudioError {
    #[error("waveform is empty")]
    Empty,
    #[error("waveform contains a non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("sample rate {0} Hz is not supported (expected {SAMPLE_RATE} Hz)")]
    UnsupportedSampleRate(u32),
    #[error("utterance of {available} samples is too short for two segments of {segment} samples")]
    UtteranceTooShort { available: usize, segment: usize },
    #[error("segment of {available} samples is shorter than the {window}-sample analysis window")]
    SegmentTooShort { available: usize, window: usize },
    #[error("invalid impulse response: {0}")]
    InvalidFilter(&'static str),
    #[error("cannot mix at a fixed SNR: {0} has zero power")]
    SilentInput(&'static str),
    #[error("invalid augmentation spec: {0}")]
    InvalidSpec(&'static str),
    #[error("no {0} available in the augmentation bank")]
    EmptyBank(&'static str),
    #[error("{path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("{path}: unsupported WAV layout ({detail})")]
    WavFormat { path: PathBuf, detail: String },
    #[error("{path}:{line}: {detail}")]
    Manifest {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
