//! Log-mel features with per-utterance instance normalization.

use aat_core::audio::{LogMelConfig, LogMelExtractor};
use aat_core::experiment::{make_synthetic_corpus, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = make_synthetic_corpus(&SynthConfig { n_speakers: 2, utts_per_speaker: 1, ..Default::default() }, 0);
    let wave = &corpus.utterances[0].wave;
    let ext = LogMelExtractor::new(LogMelConfig::default());
    let raw = ext.extract(wave)?;
    let norm = ext.normalized(wave)?;
    println!("{:.2} s -> {} frames x {} mel bins", wave.duration_s(), raw.n_frames(), raw.n_mels());
    println!("bin  raw mean  norm mean  norm var");
    for m in (0..raw.n_mels()).step_by(8) {
        let stats = |f: &aat_core::audio::FeatureMap| {
            let t = f.n_frames() as f64;
            let mean = (0..f.n_frames()).map(|i| f.get(i, m)).sum::<f64>() / t;
            let var = (0..f.n_frames()).map(|i| (f.get(i, m) - mean).powi(2)).sum::<f64>() / t;
            (mean, var)
        };
        let (rm, _) = stats(&raw);
        let (nm, nv) = stats(&norm);
        println!("{m:>3}  {rm:>8.3}  {nm:>9.1e}  {nv:>8.5}");
    }
    Ok(())
}
