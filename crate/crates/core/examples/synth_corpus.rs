//! Generates the synthetic speaker corpus and writes it as WAV files.
//!
//! ```bash
//! cargo run --release -p aat-core --example synth_corpus -- /tmp/synth 7
//! ```

use std::path::PathBuf;

use aat_core::experiment::{make_synthetic_corpus, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "synth_corpus".into()));
    let seed: u64 = args.next().map_or(Ok(0), |s| s.parse())?;

    let cfg = SynthConfig::default();
    let corpus = make_synthetic_corpus(&cfg, seed);
    let manifest = corpus.write(&dir)?;
    let total_s: f64 = corpus.utterances.iter().map(|u| u.wave.duration_s()).sum();
    println!(
        "{} speakers x {} utterances, {:.1} minutes of audio",
        cfg.n_speakers,
        cfg.utts_per_speaker,
        total_s / 60.0
    );
    println!("manifest: {}", manifest.display());
    Ok(())
}
