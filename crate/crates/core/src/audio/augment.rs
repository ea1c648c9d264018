use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::waveform::power;
use super::{AudioError, Result, Waveform, SAMPLE_RATE};

/// Which channel simulations a training run applies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentRegime {
    #[default]
    None,
    NoiseOnly,
    NoiseOrRir,
    NoiseAndRir,
}

impl AugmentRegime {
    pub fn label(&self) -> &'static str {
        match self {
            AugmentRegime::None => "none",
            AugmentRegime::NoiseOnly => "noise",
            AugmentRegime::NoiseOrRir => "noise_or_rir",
            AugmentRegime::NoiseAndRir => "noise_and_rir",
        }
    }
}

impl fmt::Display for AugmentRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseCategory {
    Ambient,
    Music,
    Babble,
}

impl NoiseCategory {
    /// SNR range in dB, drawn uniformly.
    pub fn snr_range_db(&self) -> (f64, f64) {
        match self {
            NoiseCategory::Ambient => (0.0, 15.0),
            NoiseCategory::Music => (5.0, 15.0),
            NoiseCategory::Babble => (13.0, 20.0),
        }
    }
}

impl FromStr for NoiseCategory {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "ambient" | "noise" => Ok(NoiseCategory::Ambient),
            "music" => Ok(NoiseCategory::Music),
            "babble" | "speech" => Ok(NoiseCategory::Babble),
            other => Err(format!("unknown noise category {other:?}")),
        }
    }
}

/// One sampled channel simulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub rir: Option<Vec<f64>>,
    pub noise: Option<Waveform>,
    pub noise_category: Option<NoiseCategory>,
    pub snr_db: f64,
    pub regime: AugmentRegime,
    pub augment_both_segments: bool,
}

impl AugmentationSpec {
    /// The identity channel.
    pub fn none(augment_both_segments: bool) -> Self {
        AugmentationSpec {
            rir: None,
            noise: None,
            noise_category: None,
            snr_db: 0.0,
            regime: AugmentRegime::None,
            augment_both_segments,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.snr_db.is_finite() {
            return Err(AudioError::InvalidSpec("snr_db must be finite"));
        }
        if self.rir.as_ref().is_some_and(|r| r.is_empty()) {
            return Err(AudioError::InvalidSpec("rir must be non-empty"));
        }
        let (has_rir, has_noise) = (self.rir.is_some(), self.noise.is_some());
        match self.regime {
            AugmentRegime::None if has_rir || has_noise => {
                Err(AudioError::InvalidSpec("regime none carries no rir or noise"))
            }
            AugmentRegime::NoiseOnly if !has_noise => {
                Err(AudioError::InvalidSpec("noise_only needs a noise recording"))
            }
            AugmentRegime::NoiseOrRir if !has_noise && !has_rir => {
                Err(AudioError::InvalidSpec("noise_or_rir needs a noise or an rir"))
            }
            AugmentRegime::NoiseAndRir if !has_noise || !has_rir => {
                Err(AudioError::InvalidSpec("noise_and_rir needs both a noise and an rir"))
            }
            _ => Ok(()),
        }
    }
}

fn validate_filter(rir: &[f64]) -> Result<()> {
    if rir.is_empty() {
        return Err(AudioError::InvalidFilter("empty"));
    }
    if rir.iter().any(|v| !v.is_finite()) {
        return Err(AudioError::InvalidFilter("non-finite tap"));
    }
    if rir.iter().all(|v| *v == 0.0) {
        return Err(AudioError::InvalidFilter("all taps are zero"));
    }
    Ok(())
}

/// Reverberates `seg` with `rir`.
///
/// Taps before the largest-magnitude tap are dropped so the direct path sits
/// at index 0, the linear convolution is truncated to the input length, and
/// the result is rescaled to the input's peak amplitude.
pub fn convolve_rir(seg: &Waveform, rir: &[f64]) -> Result<Waveform> {
    validate_filter(rir)?;
    let peak_tap = rir
        .iter()
        .enumerate()
        .fold((0, 0.0), |(bi, bv), (i, v)| if v.abs() > bv { (i, v.abs()) } else { (bi, bv) })
        .0;
    let len = seg.len();
    let taps = &rir[peak_tap..rir.len().min(peak_tap + len)];
    let mut out = if taps.len() <= 64 {
        direct_convolve(seg.samples(), taps, len)
    } else {
        fft_convolve(seg.samples(), taps, len)
    };
    let out_peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if out_peak > 0.0 {
        let k = seg.peak() / out_peak;
        out.iter_mut().for_each(|v| *v *= k);
    }
    Ok(seg.with_samples(out))
}

fn direct_convolve(x: &[f64], h: &[f64], len: usize) -> Vec<f64> {
    let mut y = vec![0.0; len];
    for (k, hk) in h.iter().enumerate() {
        for n in k..len {
            y[n] += hk * x[n - k];
        }
    }
    y
}

fn fft_convolve(x: &[f64], h: &[f64], len: usize) -> Vec<f64> {
    let n = (x.len() + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut xa: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    xa.resize(n, Complex::new(0.0, 0.0));
    let mut ha: Vec<Complex<f64>> = h.iter().map(|&v| Complex::new(v, 0.0)).collect();
    ha.resize(n, Complex::new(0.0, 0.0));
    fwd.process(&mut xa);
    fwd.process(&mut ha);
    for (a, b) in xa.iter_mut().zip(&ha) {
        *a *= b;
    }
    inv.process(&mut xa);
    xa[..len].iter().map(|c| c.re / n as f64).collect()
}

/// Adds `noise` to `seg` at `snr_db`.
///
/// Noise shorter than the segment is tiled; longer noise contributes its
/// leading window (random cropping happens when a spec is drawn). Both powers
/// are mean squares over the whole segment span.
pub fn mix_noise_at_snr(seg: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    if seg.sample_rate() != noise.sample_rate() {
        return Err(AudioError::UnsupportedSampleRate(noise.sample_rate()));
    }
    if !snr_db.is_finite() {
        return Err(AudioError::InvalidSpec("snr_db must be finite"));
    }
    let crop = fit_length(noise.samples(), seg.len());
    let p_seg = seg.power();
    let p_noise = power(&crop);
    if p_seg == 0.0 {
        return Err(AudioError::SilentInput("segment"));
    }
    if p_noise == 0.0 {
        return Err(AudioError::SilentInput("noise"));
    }
    let alpha = (p_seg / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let out = seg
        .samples()
        .iter()
        .zip(&crop)
        .map(|(s, n)| s + alpha * n)
        .collect();
    Ok(seg.with_samples(out))
}

fn fit_length(samples: &[f64], len: usize) -> Vec<f64> {
    samples.iter().cycle().take(len).copied().collect()
}

/// SNR of `mixture` treating `mixture - clean` as the noise.
pub fn measured_snr_db(clean: &Waveform, mixture: &Waveform) -> f64 {
    let residual: Vec<f64> = mixture
        .samples()
        .iter()
        .zip(clean.samples())
        .map(|(m, c)| m - c)
        .collect();
    10.0 * (clean.power() / power(&residual)).log10()
}

/// Applies one channel simulation. Reverberation always precedes additive noise.
pub fn augment<R: Rng + ?Sized>(seg: &Waveform, spec: &AugmentationSpec, rng: &mut R) -> Result<Waveform> {
    spec.validate()?;
    let add_noise = |w: &Waveform| mix_noise_at_snr(w, spec.noise.as_ref().unwrap(), spec.snr_db);
    let reverb = |w: &Waveform| convolve_rir(w, spec.rir.as_ref().unwrap());
    match spec.regime {
        AugmentRegime::None => Ok(seg.clone()),
        AugmentRegime::NoiseOnly => add_noise(seg),
        AugmentRegime::NoiseOrRir => match (spec.noise.is_some(), spec.rir.is_some()) {
            (true, true) => {
                if rng.random_bool(0.5) {
                    add_noise(seg)
                } else {
                    reverb(seg)
                }
            }
            (true, false) => add_noise(seg),
            _ => reverb(seg),
        },
        AugmentRegime::NoiseAndRir => add_noise(&reverb(seg)?),
    }
}

/// Noise recordings, speech recordings for babble, and room impulse responses
/// from which [`AugmentationSpec`]s are drawn.
#[derive(Clone, Debug, Default)]
pub struct AugmentationBank {
    noises: Vec<(NoiseCategory, Waveform)>,
    babble: Vec<Waveform>,
    rirs: Vec<Vec<f64>>,
}

impl AugmentationBank {
    /// `noises` may carry any category; babble-tagged recordings join the
    /// speech pool that babble is summed from.
    pub fn new(noises: Vec<(NoiseCategory, Waveform)>, rirs: Vec<Vec<f64>>) -> Result<Self> {
        let mut bank = AugmentationBank::default();
        for (cat, w) in noises {
            w.require_pipeline_rate()?;
            match cat {
                NoiseCategory::Babble => bank.babble.push(w),
                _ => bank.noises.push((cat, w)),
            }
        }
        for r in &rirs {
            validate_filter(r)?;
        }
        bank.rirs = rirs;
        Ok(bank)
    }

    /// A bank of generated ambient noise, music-like tones and decaying-noise
    /// room responses. `speech` feeds the babble pool.
    pub fn synthetic<R: Rng + ?Sized>(rng: &mut R, per_category: usize, speech: Vec<Waveform>) -> Self {
        let noise_len = 4 * SAMPLE_RATE as usize;
        let mut noises = Vec::new();
        for _ in 0..per_category {
            noises.push((NoiseCategory::Ambient, synth_ambient(rng, noise_len)));
            noises.push((NoiseCategory::Music, synth_music(rng, noise_len)));
        }
        let rirs = (0..per_category.max(1) * 2).map(|_| synth_rir(rng)).collect();
        AugmentationBank {
            noises,
            babble: speech,
            rirs,
        }
    }

    pub fn noise_count(&self) -> usize {
        self.noises.len()
    }

    pub fn babble_count(&self) -> usize {
        self.babble.len()
    }

    pub fn rir_count(&self) -> usize {
        self.rirs.len()
    }

    fn categories(&self) -> Vec<NoiseCategory> {
        let mut cats = Vec::new();
        for c in [NoiseCategory::Ambient, NoiseCategory::Music] {
            if self.noises.iter().any(|(k, _)| *k == c) {
                cats.push(c);
            }
        }
        if !self.babble.is_empty() {
            cats.push(NoiseCategory::Babble);
        }
        cats
    }

    /// Draws a complete spec for a segment of `seg_len` samples. Everything
    /// random about the channel is fixed here, including the noise crop and,
    /// for `noise_or_rir`, which branch applies, so two segments augmented
    /// with the same spec see an identical channel.
    pub fn draw<R: Rng + ?Sized>(
        &self,
        regime: AugmentRegime,
        augment_both_segments: bool,
        seg_len: usize,
        rng: &mut R,
    ) -> Result<AugmentationSpec> {
        let mut spec = AugmentationSpec::none(augment_both_segments);
        spec.regime = regime;
        let (want_noise, want_rir) = match regime {
            AugmentRegime::None => (false, false),
            AugmentRegime::NoiseOnly => (true, false),
            AugmentRegime::NoiseOrRir => {
                if rng.random_bool(0.5) {
                    (true, false)
                } else {
                    (false, true)
                }
            }
            AugmentRegime::NoiseAndRir => (true, true),
        };
        if want_noise {
            let cats = self.categories();
            let cat = *cats.choose(rng).ok_or(AudioError::EmptyBank("noise"))?;
            let (lo, hi) = cat.snr_range_db();
            spec.snr_db = rng.random_range(lo..=hi);
            spec.noise_category = Some(cat);
            spec.noise = Some(match cat {
                NoiseCategory::Babble => {
                    let talkers = rng.random_range(3..=7);
                    let mut mix = vec![0.0; seg_len];
                    for _ in 0..talkers {
                        let src = self.babble.choose(rng).unwrap();
                        for (m, v) in mix.iter_mut().zip(random_crop(src.samples(), seg_len, rng)) {
                            *m += v;
                        }
                    }
                    Waveform::at_16k(mix)?
                }
                _ => {
                    let pool: Vec<&Waveform> = self
                        .noises
                        .iter()
                        .filter(|(k, _)| *k == cat)
                        .map(|(_, w)| w)
                        .collect();
                    let src = pool.choose(rng).unwrap();
                    Waveform::at_16k(random_crop(src.samples(), seg_len, rng))?
                }
            });
        }
        if want_rir {
            spec.rir = Some(self.rirs.choose(rng).ok_or(AudioError::EmptyBank("rir"))?.clone());
        }
        Ok(spec)
    }
}

fn random_crop<R: Rng + ?Sized>(samples: &[f64], len: usize, rng: &mut R) -> Vec<f64> {
    if samples.len() <= len {
        return fit_length(samples, len);
    }
    let start = rng.random_range(0..=samples.len() - len);
    samples[start..start + len].to_vec()
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Low-passed white noise with a slow loudness drift.
fn synth_ambient<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Waveform {
    let pole: f64 = rng.random_range(0.0..0.95);
    let drift_hz: f64 = rng.random_range(0.1..1.0);
    let mut state = 0.0;
    let samples = (0..len)
        .map(|i| {
            state = pole * state + (1.0 - pole) * gaussian(rng);
            let t = i as f64 / SAMPLE_RATE as f64;
            0.2 * state * (1.0 + 0.3 * (std::f64::consts::TAU * drift_hz * t).sin())
        })
        .collect();
    Waveform::at_16k(samples).unwrap()
}

/// A sequence of short harmonic notes.
fn synth_music<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Waveform {
    let mut out = vec![0.0; len];
    let mut start = 0;
    while start < len {
        let dur = rng.random_range(3_000..10_000).min(len - start);
        let f0 = 110.0 * 2f64.powf(rng.random_range(0..36) as f64 / 12.0);
        for (i, o) in out[start..start + dur].iter_mut().enumerate() {
            let t = i as f64 / SAMPLE_RATE as f64;
            let env = (-3.0 * t).exp();
            let tone: f64 = (1..=4)
                .map(|h| (std::f64::consts::TAU * f0 * h as f64 * t).sin() / h as f64)
                .sum();
            *o = 0.2 * env * tone;
        }
        start += dur;
    }
    Waveform::at_16k(out).unwrap()
}

/// Direct path followed by an exponentially decaying noise tail.
fn synth_rir<R: Rng + ?Sized>(rng: &mut R) -> Vec<f64> {
    let rt60: f64 = rng.random_range(0.2..0.7);
    let drr_db: f64 = rng.random_range(0.0..8.0);
    let len = (0.4 * SAMPLE_RATE as f64) as usize;
    let predelay = rng.random_range(16..80);
    let decay = 6.9 / (rt60 * SAMPLE_RATE as f64);
    let mut h = vec![0.0; len];
    for (n, v) in h.iter_mut().enumerate().skip(predelay) {
        *v = gaussian(rng) * (-decay * n as f64).exp();
    }
    // Scale the tail to the drawn direct-to-reverberant ratio, keeping every
    // tail tap below the direct path so tap 0 stays the peak.
    let tail = h.iter().map(|v| v * v).sum::<f64>();
    let k = (10f64.powf(-drr_db / 10.0) / tail).sqrt();
    h.iter_mut().for_each(|v| *v = (*v * k).clamp(-0.9, 0.9));
    h[0] = 1.0;
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise_wave(rng: &mut ChaCha8Rng, n: usize, rms: f64) -> Waveform {
        let raw: Vec<f64> = (0..n).map(|_| gaussian(rng)).collect();
        let k = rms / power(&raw).sqrt();
        Waveform::at_16k(raw.into_iter().map(|v| v * k).collect()).unwrap()
    }

    #[test]
    fn unit_impulse_filter_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seg = noise_wave(&mut rng, 500, 0.1);
        let out = convolve_rir(&seg, &[1.0]).unwrap();
        assert_eq!(out, seg);
    }

    #[test]
    fn impulse_input_reproduces_filter() {
        let mut x = vec![0.0; 8];
        x[0] = 1.0;
        let seg = Waveform::at_16k(x).unwrap();
        let out = convolve_rir(&seg, &[0.5, 0.25]).unwrap();
        assert_eq!(out.samples(), &[1.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn filter_taps_before_the_peak_are_dropped() {
        let mut x = vec![0.0; 6];
        x[1] = 1.0;
        let seg = Waveform::at_16k(x).unwrap();
        let out = convolve_rir(&seg, &[0.1, -0.2, 1.0, 0.5]).unwrap();
        assert_eq!(out.samples(), &[0.0, 1.0, 0.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn fft_path_matches_direct_form_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seg = noise_wave(&mut rng, 28_800, 0.1);
        let rir = synth_rir(&mut rng);
        let out = convolve_rir(&seg, &rir).unwrap();
        // O(n·m) oracle over the first 3,000 output samples.
        let n = 3_000;
        let mut oracle = vec![0.0; n];
        for (i, o) in oracle.iter_mut().enumerate() {
            for k in 0..=i.min(rir.len() - 1) {
                *o += rir[k] * seg.samples()[i - k];
            }
        }
        let full: Vec<f64> = direct_convolve(seg.samples(), &rir, seg.len());
        let peak = full.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = seg.peak() / peak;
        assert_eq!(out.len(), seg.len());
        for i in 0..n {
            assert!((out.samples()[i] - oracle[i] * scale).abs() < 1e-9);
        }
        let oracle_rms = (power(&full) * scale * scale).sqrt();
        assert!((out.rms() - oracle_rms).abs() < 1e-9);
    }

    #[test]
    fn invalid_filters_are_rejected() {
        let seg = Waveform::at_16k(vec![0.1; 10]).unwrap();
        for bad in [vec![], vec![f64::NAN], vec![0.0, 0.0]] {
            assert!(matches!(convolve_rir(&seg, &bad), Err(AudioError::InvalidFilter(_))));
        }
    }

    #[test]
    fn zero_db_gives_equal_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seg = noise_wave(&mut rng, 4_000, 0.3);
        let noise = noise_wave(&mut rng, 4_000, 0.05);
        let mix = mix_noise_at_snr(&seg, &noise, 0.0).unwrap();
        let added: Vec<f64> = mix.samples().iter().zip(seg.samples()).map(|(m, s)| m - s).collect();
        assert!((power(&added).sqrt() - seg.rms()).abs() < 1e-12);
    }

    #[test]
    fn mixing_gain_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seg = noise_wave(&mut rng, 8_000, 0.1);
        let noise = noise_wave(&mut rng, 8_000, 0.2);
        let mix = mix_noise_at_snr(&seg, &noise, 10.0).unwrap();
        let alpha = (mix.samples()[17] - seg.samples()[17]) / noise.samples()[17];
        assert!((alpha - 0.1 / (0.2 * 10f64.sqrt())).abs() < 1e-9);
        assert!((alpha - 0.158_113_883).abs() < 1e-6);
        assert!((measured_snr_db(&seg, &mix) - 10.0).abs() < 0.1);
    }

    #[test]
    fn silent_inputs_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let zeros = Waveform::at_16k(vec![0.0; 100]).unwrap();
        let noise = noise_wave(&mut rng, 100, 0.1);
        assert!(matches!(
            mix_noise_at_snr(&zeros, &noise, 5.0),
            Err(AudioError::SilentInput("segment"))
        ));
        assert!(matches!(
            mix_noise_at_snr(&noise, &zeros, 5.0),
            Err(AudioError::SilentInput("noise"))
        ));
    }

    #[test]
    fn short_noise_is_tiled() {
        let seg = Waveform::at_16k(vec![1.0; 5]).unwrap();
        let noise = Waveform::at_16k(vec![1.0, -1.0]).unwrap();
        let mix = mix_noise_at_snr(&seg, &noise, 0.0).unwrap();
        assert_eq!(mix.samples(), &[2.0, 0.0, 2.0, 0.0, 2.0]);
    }

    #[test]
    fn spec_invariants_are_checked() {
        let mut spec = AugmentationSpec::none(true);
        assert!(spec.validate().is_ok());
        spec.rir = Some(vec![1.0]);
        assert!(spec.validate().is_err());
        spec.regime = AugmentRegime::NoiseAndRir;
        assert!(spec.validate().is_err());
        spec.regime = AugmentRegime::NoiseOrRir;
        assert!(spec.validate().is_ok());
        spec.snr_db = f64::INFINITY;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn regime_none_is_identity_and_lengths_are_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seg = noise_wave(&mut rng, 16_000, 0.1);
        let speech = vec![noise_wave(&mut rng, 20_000, 0.1)];
        let bank = AugmentationBank::synthetic(&mut rng, 2, speech);
        let none = AugmentationSpec::none(true);
        assert_eq!(augment(&seg, &none, &mut rng).unwrap(), seg);
        for regime in [AugmentRegime::NoiseOnly, AugmentRegime::NoiseOrRir, AugmentRegime::NoiseAndRir] {
            for _ in 0..10 {
                let spec = bank.draw(regime, true, seg.len(), &mut rng).unwrap();
                assert_eq!(augment(&seg, &spec, &mut rng).unwrap().len(), seg.len());
            }
        }
    }

    #[test]
    fn degenerate_reverb_and_negligible_noise_leave_input_nearly_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let seg = noise_wave(&mut rng, 8_000, 0.1);
        let spec = AugmentationSpec {
            rir: Some(vec![1.0]),
            noise: Some(noise_wave(&mut rng, 8_000, 0.1)),
            noise_category: Some(NoiseCategory::Ambient),
            snr_db: 80.0,
            regime: AugmentRegime::NoiseAndRir,
            augment_both_segments: true,
        };
        let out = augment(&seg, &spec, &mut rng).unwrap();
        let dev = out.samples().iter().zip(seg.samples()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-3);
    }

    #[test]
    fn drawn_specs_respect_category_snr_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let speech = vec![noise_wave(&mut rng, 20_000, 0.1)];
        let bank = AugmentationBank::synthetic(&mut rng, 2, speech);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..300 {
            let spec = bank.draw(AugmentRegime::NoiseOnly, true, 1_000, &mut rng).unwrap();
            let cat = spec.noise_category.unwrap();
            let (lo, hi) = cat.snr_range_db();
            assert!(spec.snr_db >= lo && spec.snr_db <= hi);
            assert_eq!(spec.noise.as_ref().unwrap().len(), 1_000);
            seen.insert(cat);
        }
        assert_eq!(seen.len(), 3);
        let spec = bank.draw(AugmentRegime::NoiseOrRir, true, 1_000, &mut rng).unwrap();
        assert!(spec.noise.is_some() ^ spec.rir.is_some());
    }

    #[test]
    fn empty_bank_reports_what_is_missing() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let bank = AugmentationBank::default();
        assert!(matches!(
            bank.draw(AugmentRegime::NoiseOnly, true, 10, &mut rng),
            Err(AudioError::EmptyBank("noise"))
        ));
    }

    #[test]
    fn measured_snr_tracks_requested_snr() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let seg = noise_wave(&mut rng, 28_800, 0.05);
        for snr in [0.0, 5.0, 13.0, 20.0] {
            let noise = noise_wave(&mut rng, 50_000, 0.3);
            let mixed = mix_noise_at_snr(&seg, &noise, snr).unwrap();
            assert!((measured_snr_db(&seg, &mixed) - snr).abs() <= 0.1, "{snr}");
        }
    }

    #[test]
    fn noise_or_rir_picks_each_branch_half_the_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let bank = AugmentationBank::synthetic(&mut rng, 1, vec![]);
        let noisy = (0..10_000)
            .filter(|_| bank.draw(AugmentRegime::NoiseOrRir, true, 400, &mut rng).unwrap().noise.is_some())
            .count();
        assert!((noisy as i64 - 5_000).abs() <= 150, "{noisy}");
    }

    #[test]
    fn draws_are_deterministic_under_a_seed() {
        let bank = AugmentationBank::synthetic(&mut ChaCha8Rng::seed_from_u64(42), 2, vec![]);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| bank.draw(AugmentRegime::NoiseAndRir, false, 800, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }
}
