use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{AudioError, Result, Waveform};

/// A `T x M` log-mel matrix, stored frame-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    values: Vec<f64>,
    n_frames: usize,
    n_mels: usize,
    pub frame_hop_s: f64,
    pub window_s: f64,
}

impl FeatureMap {
    /// Panics unless `values.len() == n_frames * n_mels` with both non-zero.
    pub fn new(values: Vec<f64>, n_frames: usize, n_mels: usize, frame_hop_s: f64, window_s: f64) -> Self {
        assert!(n_frames >= 1 && n_mels >= 1);
        assert_eq!(values.len(), n_frames * n_mels);
        FeatureMap {
            values,
            n_frames,
            n_mels,
            frame_hop_s,
            window_s,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn get(&self, t: usize, m: usize) -> f64 {
        self.values[t * self.n_mels + m]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogMelConfig {
    pub sample_rate: u32,
    pub window: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl Default for LogMelConfig {
    fn default() -> Self {
        LogMelConfig {
            sample_rate: 16_000,
            window: 400,
            hop: 160,
            n_fft: 512,
            n_mels: 40,
            f_min: 20.0,
            f_max: 7_600.0,
            log_floor: 1e-6,
        }
    }
}

pub(crate) fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub(crate) fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Log-mel spectrogram: Hamming window, power spectrum, triangular mel filters
/// on the HTK scale, natural log after adding the floor.
pub struct LogMelExtractor {
    config: LogMelConfig,
    window: Vec<f64>,
    /// Per mel band: first FFT bin and the weights that follow it.
    filters: Vec<(usize, Vec<f64>)>,
    fft: Arc<dyn Fft<f64>>,
}

impl LogMelExtractor {
    pub fn new(config: LogMelConfig) -> Self {
        assert!(config.window <= config.n_fft, "window longer than the FFT");
        let window = (0..config.window)
            .map(|n| 0.54 - 0.46 * (std::f64::consts::TAU * n as f64 / config.window as f64).cos())
            .collect();
        let filters = mel_filters(&config);
        let fft = FftPlanner::new().plan_fft_forward(config.n_fft);
        LogMelExtractor {
            config,
            window,
            filters,
            fft,
        }
    }

    pub fn config(&self) -> &LogMelConfig {
        &self.config
    }

    /// Frames produced for `len` samples, `None` when shorter than one window.
    pub fn frame_count(&self, len: usize) -> Option<usize> {
        (len >= self.config.window).then(|| 1 + (len - self.config.window) / self.config.hop)
    }

    pub fn extract(&self, seg: &Waveform) -> Result<FeatureMap> {
        if seg.sample_rate() != self.config.sample_rate {
            return Err(AudioError::UnsupportedSampleRate(seg.sample_rate()));
        }
        let n_frames = self.frame_count(seg.len()).ok_or(AudioError::SegmentTooShort {
            available: seg.len(),
            window: self.config.window,
        })?;
        let n_fft = self.config.n_fft;
        let n_mels = self.config.n_mels;
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; n_fft / 2 + 1];
        let mut values = Vec::with_capacity(n_frames * n_mels);
        let x = seg.samples();
        for t in 0..n_frames {
            let start = t * self.config.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = if i < self.config.window {
                    Complex::new(x[start + i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, b) in power.iter_mut().zip(&buf) {
                *p = b.norm_sqr();
            }
            for (first, weights) in &self.filters {
                let e: f64 = weights.iter().zip(&power[*first..]).map(|(w, p)| w * p).sum();
                values.push((e + self.config.log_floor).ln());
            }
        }
        Ok(FeatureMap::new(
            values,
            n_frames,
            n_mels,
            self.config.hop as f64 / self.config.sample_rate as f64,
            self.config.window as f64 / self.config.sample_rate as f64,
        ))
    }

    /// [`LogMelExtractor::extract`] followed by [`instance_normalize`].
    pub fn normalized(&self, seg: &Waveform) -> Result<FeatureMap> {
        Ok(instance_normalize(&self.extract(seg)?))
    }
}

impl Default for LogMelExtractor {
    fn default() -> Self {
        Self::new(LogMelConfig::default())
    }
}

fn mel_filters(config: &LogMelConfig) -> Vec<(usize, Vec<f64>)> {
    let (lo, hi) = (hz_to_mel(config.f_min), hz_to_mel(config.f_max));
    let edges: Vec<f64> = (0..config.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (config.n_mels + 1) as f64))
        .collect();
    let bin_hz = config.sample_rate as f64 / config.n_fft as f64;
    let n_bins = config.n_fft / 2 + 1;
    (0..config.n_mels)
        .map(|m| {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let weights: Vec<(usize, f64)> = (0..n_bins)
                .filter_map(|k| {
                    let f = k as f64 * bin_hz;
                    let w = ((f - left) / (center - left)).min((right - f) / (right - center));
                    (w > 0.0).then_some((k, w))
                })
                .collect();
            let first = weights.first().map_or(0, |(k, _)| *k);
            let mut dense = vec![0.0; weights.last().map_or(0, |(k, _)| k + 1 - first)];
            for (k, w) in weights {
                dense[k - first] = w;
            }
            (first, dense)
        })
        .collect()
}

/// Per-utterance standardization of every mel bin over time (population
/// variance). Bins with no variance become all zeros.
pub fn instance_normalize(fm: &FeatureMap) -> FeatureMap {
    let (t, m) = (fm.n_frames(), fm.n_mels());
    let mut out = fm.values().to_vec();
    for bin in 0..m {
        let mean = (0..t).map(|i| fm.get(i, bin)).sum::<f64>() / t as f64;
        let var = (0..t).map(|i| (fm.get(i, bin) - mean).powi(2)).sum::<f64>() / t as f64;
        let degenerate = var <= 1e-24 * (1.0 + mean * mean);
        let inv = if degenerate { 0.0 } else { 1.0 / var.sqrt() };
        for i in 0..t {
            out[i * m + bin] = (fm.get(i, bin) - mean) * inv;
        }
    }
    FeatureMap::new(out, t, m, fm.frame_hop_s, fm.window_s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tone(hz: f64, n: usize) -> Waveform {
        Waveform::at_16k((0..n).map(|i| 0.5 * (std::f64::consts::TAU * hz * i as f64 / 16_000.0).sin()).collect())
            .unwrap()
    }

    #[test]
    fn frame_count_follows_window_and_hop() {
        let ex = LogMelExtractor::default();
        let fm = ex.extract(&tone(440.0, 28_800)).unwrap();
        assert_eq!((fm.n_frames(), fm.n_mels()), (178, 40));
        // Reference short-time framing: count window starts that fit.
        let starts = (0..28_800).step_by(160).filter(|s| s + 400 <= 28_800).count();
        assert_eq!(starts, 178);
        assert!(fm.all_finite());
    }

    #[test]
    fn segment_shorter_than_window_is_rejected() {
        let ex = LogMelExtractor::default();
        assert!(matches!(
            ex.extract(&tone(440.0, 399)),
            Err(AudioError::SegmentTooShort { available: 399, window: 400 })
        ));
        assert_eq!(ex.extract(&tone(440.0, 400)).unwrap().n_frames(), 1);
    }

    #[test]
    fn other_sample_rates_are_rejected() {
        let ex = LogMelExtractor::default();
        let w = Waveform::new(vec![0.1; 1_000], 8_000).unwrap();
        assert!(matches!(ex.extract(&w), Err(AudioError::UnsupportedSampleRate(8_000))));
    }

    #[test]
    fn silence_maps_to_the_log_floor() {
        let ex = LogMelExtractor::default();
        let fm = ex.extract(&Waveform::at_16k(vec![0.0; 4_000]).unwrap()).unwrap();
        let floor = 1e-6f64.ln();
        assert!(fm.values().iter().all(|v| *v == floor));
    }

    #[test]
    fn tone_peaks_in_the_band_centred_nearest_its_frequency() {
        let ex = LogMelExtractor::default();
        let fm = ex.extract(&tone(1_000.0, 16_000)).unwrap();
        // Analytic oracle: triangular response of every band at exactly 1 kHz.
        let (lo, hi) = (hz_to_mel(20.0), hz_to_mel(7_600.0));
        let edge = |i: usize| mel_to_hz(lo + (hi - lo) * i as f64 / 41.0);
        let response = |m: usize| {
            let (l, c, r) = (edge(m), edge(m + 1), edge(m + 2));
            ((1_000.0 - l) / (c - l)).min((r - 1_000.0) / (r - c)).max(0.0)
        };
        let expected = (0..40).max_by(|&a, &b| response(a).total_cmp(&response(b))).unwrap();
        for t in 0..fm.n_frames() {
            let frame = fm.frame(t);
            let arg = (0..40).max_by(|&a, &b| frame[a].total_cmp(&frame[b])).unwrap();
            assert_eq!(arg, expected, "frame {t}");
        }
    }

    #[test]
    fn two_point_bin_standardizes_to_unit_values() {
        let fm = FeatureMap::new(vec![1.0, 5.0, 3.0, 5.0], 2, 2, 0.01, 0.025);
        let n = instance_normalize(&fm);
        assert_eq!(n.values(), &[-1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn constant_bin_maps_to_zeros() {
        let fm = FeatureMap::new(vec![5.0; 3], 3, 1, 0.01, 0.025);
        assert_eq!(instance_normalize(&fm).values(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn random_map_has_zero_mean_unit_variance_bins() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vals: Vec<f64> = (0..178 * 40).map(|_| rng.random_range(-20.0..5.0)).collect();
        let n = instance_normalize(&FeatureMap::new(vals, 178, 40, 0.01, 0.025));
        for bin in 0..40 {
            let col: Vec<f64> = (0..178).map(|t| n.get(t, bin)).collect();
            let mean = col.iter().sum::<f64>() / 178.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 178.0;
            assert!(mean.abs() < 1e-4 && (var - 1.0).abs() < 1e-4);
        }
    }
}
