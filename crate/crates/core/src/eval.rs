//! Speaker-verification scoring and error metrics.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{wav::read_wav, AudioError, LogMelExtractor, Waveform};
use crate::encoder::{Encoder, EncoderError};
use crate::losses::cosine;

#[derive(Error, Debug)]
pub enum EvalError {
    #[error("need at least one same-speaker and one different-speaker trial")]
    DegenerateLabels,
    #[error("score {index} is not finite")]
    NonFiniteScore { index: usize },
    #[error("{} audio files are missing: {}", .0.len(), .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingAudio(Vec<PathBuf>),
    #[error("{path}:{line}: {detail}")]
    TrialFormat { path: PathBuf, line: usize, detail: String },
    #[error("invalid evaluation policy: {0}")]
    InvalidPolicy(&'static str),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Detection cost parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcfParams {
    pub c_miss: f64,
    pub c_fa: f64,
    pub p_target: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        DcfParams {
            c_miss: 1.0,
            c_fa: 1.0,
            p_target: 0.05,
        }
    }
}

/// One operating point of a threshold sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatingPoint {
    /// Accept when `score >= threshold`.
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

fn check_scores(scores: &[(f64, bool)]) -> Result<(usize, usize)> {
    if let Some(index) = scores.iter().position(|(s, _)| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore { index });
    }
    let n_same = scores.iter().filter(|(_, same)| *same).count();
    let n_diff = scores.len() - n_same;
    if n_same == 0 || n_diff == 0 {
        return Err(EvalError::DegenerateLabels);
    }
    Ok((n_same, n_diff))
}

/// Operating points at every distinct score and at `+∞`, in increasing
/// threshold order. `(score, is_same)` pairs.
pub fn operating_points(scores: &[(f64, bool)]) -> Result<Vec<OperatingPoint>> {
    let (n_same, n_diff) = check_scores(scores)?;
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut points = Vec::new();
    // Walking upward, everything below the current threshold is rejected.
    let (mut same_below, mut diff_below) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        points.push(OperatingPoint {
            threshold: t,
            far: (n_diff - diff_below) as f64 / n_diff as f64,
            frr: same_below as f64 / n_same as f64,
        });
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                same_below += 1;
            } else {
                diff_below += 1;
            }
            i += 1;
        }
    }
    points.push(OperatingPoint {
        threshold: f64::INFINITY,
        far: 0.0,
        frr: 1.0,
    });
    Ok(points)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
}

/// Equal error rate, interpolated linearly between the two operating points
/// where `FAR − FRR` changes sign.
pub fn compute_eer(scores: &[(f64, bool)]) -> Result<Eer> {
    let pts = operating_points(scores)?;
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (da, db) = (a.far - a.frr, b.far - b.frr);
        if da == 0.0 {
            return Ok(Eer {
                eer: a.far,
                threshold: a.threshold,
            });
        }
        if da > 0.0 && db <= 0.0 {
            let alpha = da / (da - db);
            let threshold = if b.threshold.is_finite() {
                a.threshold + alpha * (b.threshold - a.threshold)
            } else {
                a.threshold
            };
            return Ok(Eer {
                eer: a.far + alpha * (b.far - a.far),
                threshold,
            });
        }
    }
    unreachable!("FAR − FRR runs from ≥ 0 to −1 across the sweep")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinDcf {
    pub min_dcf: f64,
    pub threshold: f64,
}

/// Minimum normalized detection cost over all operating points.
pub fn compute_mindcf(scores: &[(f64, bool)], p: DcfParams) -> Result<MinDcf> {
    let pts = operating_points(scores)?;
    let norm = (p.c_miss * p.p_target).min(p.c_fa * (1.0 - p.p_target));
    let mut best = MinDcf {
        min_dcf: f64::INFINITY,
        threshold: f64::NAN,
    };
    for pt in pts {
        let cost = (p.c_miss * pt.frr * p.p_target + p.c_fa * pt.far * (1.0 - p.p_target)) / norm;
        if cost < best.min_dcf {
            best = MinDcf {
                min_dcf: cost,
                threshold: pt.threshold,
            };
        }
    }
    Ok(best)
}

/// Crop policy for evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalPolicy {
    pub n_segments: usize,
    pub segment_s: f64,
}

impl Default for EvalPolicy {
    fn default() -> Self {
        EvalPolicy {
            n_segments: 10,
            segment_s: 4.0,
        }
    }
}

/// Start offsets of `n` evenly spaced crops of `seg` samples in `len`
/// samples. Utterances no longer than one crop yield a single full-length
/// crop.
pub fn crop_starts(len: usize, seg: usize, n: usize) -> Vec<(usize, usize)> {
    if len <= seg {
        return vec![(0, len)];
    }
    let slack = len - seg;
    match n {
        0 => Vec::new(),
        1 => vec![(slack / 2, seg)],
        _ => (0..n)
            .map(|k| (((k * slack) as f64 / (n - 1) as f64).round() as usize, seg))
            .collect(),
    }
}

/// Embeddings of the evaluation crops of one utterance.
pub fn embed_crops(encoder: &Encoder, extractor: &LogMelExtractor, wave: &Waveform, policy: EvalPolicy) -> Result<Vec<Vec<f64>>> {
    if policy.n_segments == 0 || !(policy.segment_s > 0.0) {
        return Err(EvalError::InvalidPolicy("need at least one crop of positive length"));
    }
    let seg = crate::audio::segment_samples(policy.segment_s, wave.sample_rate());
    let maps = crop_starts(wave.len(), seg, policy.n_segments)
        .into_iter()
        .map(|(s, l)| extractor.normalized(&wave.crop(s..s + l)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let refs: Vec<_> = maps.iter().collect();
    let emb = encoder.encode_batch(&refs)?;
    Ok((0..maps.len()).map(|i| emb.row(i).to_vec()).collect())
}

/// Mean cosine similarity over all crop pairs. A zero embedding scores 0.
pub fn mean_pair_cosine(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for x in a {
        for y in b {
            total += cosine(x, y).unwrap_or(0.0);
        }
    }
    total / (a.len() * b.len()) as f64
}

pub fn score_trial(
    a: &Waveform,
    b: &Waveform,
    encoder: &Encoder,
    extractor: &LogMelExtractor,
    policy: EvalPolicy,
) -> Result<f64> {
    let ea = embed_crops(encoder, extractor, a, policy)?;
    let eb = embed_crops(encoder, extractor, b, policy)?;
    Ok(mean_pair_cosine(&ea, &eb))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub same: bool,
    pub a: String,
    pub b: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_dcf: f64,
    pub scores: Vec<f64>,
}

/// Scores every trial, embedding each distinct utterance once.
pub fn evaluate_with<F>(
    trials: &[Trial],
    mut load: F,
    encoder: &Encoder,
    extractor: &LogMelExtractor,
    policy: EvalPolicy,
    dcf: DcfParams,
) -> Result<EvalResult>
where
    F: FnMut(&str) -> Result<Waveform>,
{
    let mut cache: HashMap<&str, Vec<Vec<f64>>> = HashMap::new();
    for t in trials {
        for key in [t.a.as_str(), t.b.as_str()] {
            if !cache.contains_key(key) {
                let emb = embed_crops(encoder, extractor, &load(key)?, policy)?;
                cache.insert(key, emb);
            }
        }
    }
    let scores: Vec<f64> = trials.iter().map(|t| mean_pair_cosine(&cache[t.a.as_str()], &cache[t.b.as_str()])).collect();
    let labeled: Vec<(f64, bool)> = scores.iter().copied().zip(trials.iter().map(|t| t.same)).collect();
    let eer = compute_eer(&labeled)?;
    let dcf = compute_mindcf(&labeled, dcf)?;
    Ok(EvalResult {
        eer: eer.eer,
        eer_threshold: eer.threshold,
        min_dcf: dcf.min_dcf,
        scores,
    })
}

/// [`evaluate_with`] over WAV files under `root`. Every missing file is
/// reported before any scoring starts.
pub fn evaluate(
    trials: &[Trial],
    root: &Path,
    encoder: &Encoder,
    extractor: &LogMelExtractor,
    policy: EvalPolicy,
    dcf: DcfParams,
) -> Result<EvalResult> {
    let mut missing: Vec<PathBuf> = trials
        .iter()
        .flat_map(|t| [&t.a, &t.b])
        .map(|p| root.join(p))
        .filter(|p| !p.is_file())
        .collect();
    missing.sort();
    missing.dedup();
    if !missing.is_empty() {
        return Err(EvalError::MissingAudio(missing));
    }
    evaluate_with(trials, |p| Ok(read_wav(&root.join(p))?), encoder, extractor, policy, dcf)
}

/// Reads `<label 0|1> <path_a> <path_b>` lines.
pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |detail: &str| EvalError::TrialFormat {
            path: path.to_path_buf(),
            line: i + 1,
            detail: detail.to_string(),
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        let [label, a, b] = f.as_slice() else {
            return Err(bad("expected `<label> <path_a> <path_b>`"));
        };
        let same = match *label {
            "1" => true,
            "0" => false,
            _ => return Err(bad("label must be 0 or 1")),
        };
        out.push(Trial {
            same,
            a: a.to_string(),
            b: b.to_string(),
        });
    }
    Ok(out)
}

pub fn write_trials(path: &Path, trials: &[Trial]) -> Result<()> {
    let mut s = String::new();
    for t in trials {
        writeln!(s, "{} {} {}", u8::from(t.same), t.a, t.b).unwrap();
    }
    fs::write(path, s)?;
    Ok(())
}

/// Writes `<score> <path_a> <path_b>` lines with six decimals.
pub fn write_scores(path: &Path, trials: &[Trial], scores: &[f64]) -> Result<()> {
    let mut s = String::new();
    for (t, score) in trials.iter().zip(scores) {
        writeln!(s, "{score:.6} {} {}", t.a, t.b).unwrap();
    }
    fs::write(path, s)?;
    Ok(())
}
