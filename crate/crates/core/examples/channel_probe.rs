//! How much channel information an encoder leaks: a small classifier is
//! trained to tell whether two embeddings of one utterance went through
//! the same simulated channel, and scored on held-out speakers.
//!
//! Pass a checkpoint to probe a trained encoder; without one a fresh
//! encoder is used.

use aat_core::audio::LogMelExtractor;
use aat_core::experiment::{prepare_data, CorpusSource};
use aat_core::probe::{channel_probe, ProbeConfig};
use aat_core::trainer::{stream, TrainConfig, TrainState, Utterance};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = TrainConfig::default();
    cfg.encoder.channel_widths = [4, 8, 16, 32];
    cfg.encoder.blocks_per_stage = [1, 1, 1, 1];
    cfg.encoder.embed_dim = 64;
    cfg.batch.segment_duration_s = 0.5;
    let state = match std::env::args().nth(1) {
        Some(p) => TrainState::load(p.as_ref())?,
        None => TrainState::new(&cfg, 0)?,
    };
    let data = prepare_data(&CorpusSource::default())?;
    let utts = data.eval_utterances();
    let refs: Vec<&Utterance> = utts.iter().collect();
    let ext = LogMelExtractor::new(cfg.features.clone());
    let r = channel_probe(&state.model.encoder, &refs, &cfg.batch, &data.bank, &ext, &ProbeConfig::default(), &mut stream(0, 22))?;
    println!(
        "probe accuracy: train {:.3} on {} pairs, test {:.3} on {} pairs (chance 0.5)",
        r.train_accuracy, r.n_train, r.test_accuracy, r.n_test
    );
    Ok(())
}
