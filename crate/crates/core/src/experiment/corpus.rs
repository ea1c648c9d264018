//! A synthetic speech-like corpus for desk-scale runs.
//!
//! Each pseudo-speaker is a source-filter voice: a glottal pulse train at a
//! speaker-specific pitch, shaped by a speaker-specific spectral tilt and
//! passed through cascaded formant resonators that glide between the
//! speaker's own vowel targets. Utterances are random syllable sequences with
//! fricative bursts and pauses. Because vowels change over time, speaker
//! identity lives in time-varying spectral structure and survives per-bin
//! normalization. With channel coloration on, every utterance additionally
//! passes through a random equalizer and picks up stationary colored noise.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::manifest::{write_utterance_manifest, UtteranceEntry};
use crate::audio::wav::write_wav;
use crate::audio::{AudioError, Waveform, SAMPLE_RATE};
use crate::eval::Trial;
use crate::trainer::{stream, Utterance};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub channel_coloration: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_speakers: 32,
            utts_per_speaker: 20,
            min_duration_s: 2.0,
            max_duration_s: 3.0,
            channel_coloration: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthUtterance {
    pub id: String,
    pub speaker: String,
    pub wave: Waveform,
}

impl SynthUtterance {
    pub fn relative_path(&self) -> PathBuf {
        PathBuf::from(format!("{}/{}.wav", self.speaker, self.id))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub utterances: Vec<SynthUtterance>,
}

impl SynthCorpus {
    pub fn training_set(&self) -> Vec<Utterance> {
        self.utterances
            .iter()
            .map(|u| Utterance {
                id: u.id.clone(),
                wave: u.wave.clone(),
            })
            .collect()
    }

    /// Writes `<speaker>/<id>.wav` files and `manifest.txt` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, AudioError> {
        let mut entries = Vec::new();
        for u in &self.utterances {
            let rel = u.relative_path();
            let path = dir.join(&rel);
            fs::create_dir_all(path.parent().expect("relative path has a speaker directory"))?;
            write_wav(&path, &u.wave)?;
            entries.push(UtteranceEntry { id: u.id.clone(), path: rel });
        }
        let manifest = dir.join("manifest.txt");
        write_utterance_manifest(&manifest, &entries)?;
        Ok(manifest)
    }
}

/// Base vowel formants (Hz) that every speaker perturbs.
const VOWELS: [[f64; 3]; 5] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
];

/// The fixed voice of one pseudo-speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct Voice {
    pub f0_hz: f64,
    pub vowels: Vec<[f64; 3]>,
    pub bandwidths: [f64; 3],
    pub tilt: f64,
    /// An extra fixed resonance above the vowel formants.
    pub ring_hz: f64,
    /// Fraction of each pitch period taken by the glottal pulse.
    pub open_quotient: f64,
    pub fricative_hz: f64,
    pub syllable_s: f64,
}

impl Voice {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let tract = rng.random_range(0.82..1.22);
        let vowels = VOWELS
            .iter()
            .map(|v| [0, 1, 2].map(|k| v[k] / tract * rng.random_range(0.82..1.18)))
            .collect();
        Voice {
            f0_hz: 85.0 * (260.0f64 / 85.0).powf(rng.random::<f64>()),
            vowels,
            bandwidths: [rng.random_range(50.0..110.0), rng.random_range(70.0..140.0), rng.random_range(100.0..200.0)],
            tilt: rng.random_range(0.55..0.95),
            ring_hz: rng.random_range(3_200.0..5_500.0),
            open_quotient: rng.random_range(0.3..0.8),
            fricative_hz: rng.random_range(2_500.0..6_500.0),
            syllable_s: rng.random_range(0.12..0.22),
        }
    }
}

/// Two-pole resonator with unit gain at DC-normalized peak.
#[derive(Clone, Copy, Default)]
struct Resonator {
    a1: f64,
    a2: f64,
    b0: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn tune(&mut self, freq: f64, bw: f64) {
        let fs = SAMPLE_RATE as f64;
        let r = (-PI * bw / fs).exp();
        self.a1 = 2.0 * r * (TAU * freq / fs).cos();
        self.a2 = -r * r;
        self.b0 = 1.0 - self.a1 - self.a2;
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.b0 * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Renders `duration_s` seconds of `voice`.
pub fn speak<R: Rng + ?Sized>(voice: &Voice, duration_s: f64, rng: &mut R) -> Vec<f64> {
    let fs = SAMPLE_RATE as f64;
    let len = (duration_s * fs).round() as usize;
    let mut out = vec![0.0; len];
    let mut formants = [Resonator::default(); 3];
    let mut ring = Resonator::default();
    ring.tune(voice.ring_hz, 250.0);
    let mut frication = Resonator::default();
    frication.tune(voice.fricative_hz, voice.fricative_hz * 0.25);
    let mut phase = 0.0;
    let mut tilt_state = 0.0;
    let mut current = voice.vowels[rng.random_range(0..voice.vowels.len())];
    let mut pos = 0;
    let mut f0_drift = 0.0;
    while pos < len {
        // Optional fricative onset, then a voiced nucleus, then a pause.
        if rng.random_bool(0.35) {
            let n = ((0.04 + 0.05 * rng.random::<f64>()) * fs) as usize;
            for i in 0..n.min(len - pos) {
                let env = (PI * i as f64 / n as f64).sin();
                out[pos + i] = 0.08 * env * frication.step(gaussian(rng));
            }
            pos += n;
        }
        let target = voice.vowels[rng.random_range(0..voice.vowels.len())];
        let n = ((voice.syllable_s * rng.random_range(0.7..1.4)) * fs) as usize;
        let glide = (0.03 * fs) as usize;
        f0_drift = 0.7 * f0_drift + 0.3 * rng.random_range(-0.12..0.12);
        let f0_start = voice.f0_hz * (1.0 + f0_drift);
        let f0_end = f0_start * rng.random_range(0.9..1.08);
        for i in 0..n {
            if pos + i >= len {
                break;
            }
            if i % 32 == 0 {
                let a = (i as f64 / glide as f64).min(1.0);
                for k in 0..3 {
                    formants[k].tune(current[k] + a * (target[k] - current[k]), voice.bandwidths[k]);
                }
            }
            let u = i as f64 / n as f64;
            let f0 = f0_start + u * (f0_end - f0_start);
            phase = (phase + f0 / fs).fract();
            // Rosenberg-style pulse derivative over the open phase.
            let src = if phase < voice.open_quotient {
                (TAU * phase / voice.open_quotient).sin()
            } else {
                0.0
            };
            tilt_state = voice.tilt * tilt_state + (1.0 - voice.tilt) * src;
            let mut y = tilt_state + 0.002 * gaussian(rng);
            for f in formants.iter_mut() {
                y = f.step(y);
            }
            y += 0.3 * ring.step(y);
            let env = (PI * u).sin().powf(0.6);
            out[pos + i] = env * y;
        }
        current = target;
        pos += n;
        pos += (rng.random_range(0.0..0.12) * fs) as usize;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    out
}

/// A random equalizer and stationary colored noise, fixed per utterance.
pub fn colour_channel<R: Rng + ?Sized>(samples: &mut [f64], rng: &mut R) {
    let fs = SAMPLE_RATE as f64;
    for _ in 0..2 {
        let f = 200.0 * (25.0f64).powf(rng.random::<f64>());
        let gain_db: f64 = rng.random_range(-6.0..6.0);
        let q: f64 = rng.random_range(0.7..2.0);
        // Peaking equalizer biquad.
        let a = 10f64.powf(gain_db / 40.0);
        let w = TAU * f / fs;
        let alpha = w.sin() / (2.0 * q);
        let (b0, b1, b2) = (1.0 + alpha * a, -2.0 * w.cos(), 1.0 - alpha * a);
        let (a0, a1, a2) = (1.0 + alpha / a, -2.0 * w.cos(), 1.0 - alpha / a);
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        for s in samples.iter_mut() {
            let x = *s;
            let y = (b0 * x + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2) / a0;
            x2 = x1;
            x1 = x;
            y2 = y1;
            y1 = y;
            *s = y;
        }
    }
    let pole: f64 = rng.random_range(0.0..0.97);
    let snr_db: f64 = rng.random_range(10.0..30.0);
    let mut state = 0.0;
    let noise: Vec<f64> = (0..samples.len())
        .map(|_| {
            state = pole * state + (1.0 - pole) * gaussian(rng);
            state
        })
        .collect();
    let p_sig = samples.iter().map(|v| v * v).sum::<f64>() / samples.len() as f64;
    let p_noise = noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64;
    if p_sig > 0.0 && p_noise > 0.0 {
        let k = (p_sig / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
        for (s, n) in samples.iter_mut().zip(noise) {
            *s += k * n;
        }
    }
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.95 {
        samples.iter_mut().for_each(|v| *v *= 0.95 / peak);
    }
}

/// Deterministic in `seed`. Speaker `s` always gets the same voice for a
/// given seed, whatever the utterance count.
pub fn make_synthetic_corpus(cfg: &SynthConfig, seed: u64) -> SynthCorpus {
    assert!(cfg.n_speakers >= 1 && cfg.min_duration_s > 0.0 && cfg.max_duration_s >= cfg.min_duration_s);
    let mut utterances = Vec::with_capacity(cfg.n_speakers * cfg.utts_per_speaker);
    for s in 0..cfg.n_speakers {
        let voice = Voice::random(&mut stream(seed, 1_000 + s as u64));
        let mut rng: ChaCha8Rng = stream(seed, 1_000_000 + s as u64);
        let speaker = format!("spk{s:03}");
        for u in 0..cfg.utts_per_speaker {
            let dur = if cfg.max_duration_s > cfg.min_duration_s {
                rng.random_range(cfg.min_duration_s..=cfg.max_duration_s)
            } else {
                cfg.min_duration_s
            };
            let mut samples = speak(&voice, dur, &mut rng);
            if cfg.channel_coloration {
                colour_channel(&mut samples, &mut rng);
            }
            utterances.push(SynthUtterance {
                id: format!("{speaker}-u{u:03}"),
                speaker: speaker.clone(),
                wave: Waveform::at_16k(samples).expect("synthesis is finite"),
            });
        }
    }
    SynthCorpus { utterances }
}

/// Balanced target and non-target trials over `utts`, keyed by utterance id.
/// Pairs are distinct and never compare an utterance with itself.
pub fn verification_trials<R: Rng + ?Sized>(utts: &[SynthUtterance], per_class: usize, rng: &mut R) -> Vec<Trial> {
    let mut same = Vec::new();
    let mut diff = Vec::new();
    for i in 0..utts.len() {
        for j in i + 1..utts.len() {
            if utts[i].speaker == utts[j].speaker {
                same.push((i, j));
            } else {
                diff.push((i, j));
            }
        }
    }
    same.shuffle(rng);
    diff.shuffle(rng);
    let mut trials: Vec<Trial> = same
        .into_iter()
        .take(per_class)
        .map(|p| (true, p))
        .chain(diff.into_iter().take(per_class).map(|p| (false, p)))
        .map(|(same, (i, j))| Trial {
            same,
            a: utts[i].id.clone(),
            b: utts[j].id.clone(),
        })
        .collect();
    trials.shuffle(rng);
    trials
}
