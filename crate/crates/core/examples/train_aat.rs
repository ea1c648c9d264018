//! Trains a small encoder on the synthetic corpus with augmentation
//! adversarial training and reports held-out EER before and after.
//!
//! ```bash
//! cargo run --release -p aat-core --example train_aat -- 3.0 10
//! ```
//! Arguments are lambda and the number of epochs.

use aat_core::audio::LogMelExtractor;
use aat_core::encoder::EncoderConfig;
use aat_core::eval::{evaluate_with, EvalPolicy};
use aat_core::experiment::{prepare_data, CorpusSource};
use aat_core::trainer::{train, RunOutput, TrainConfig, TrainState};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let lambda: f64 = args.next().map_or(Ok(3.0), |s| s.parse())?;
    let epochs: usize = args.next().map_or(Ok(10), |s| s.parse())?;

    let data = prepare_data(&CorpusSource::default())?;
    let mut cfg = TrainConfig::default();
    cfg.encoder = EncoderConfig {
        embed_dim: 64,
        channel_widths: [4, 8, 16, 32],
        blocks_per_stage: [1, 1, 1, 1],
        attention_hidden: 32,
        n_mels: 40,
    };
    cfg.discriminator.hidden = 64;
    cfg.batch.batch_size = 32;
    cfg.batch.segment_duration_s = 0.5;
    cfg.schedule.epochs = epochs;
    cfg.loss.lambda = lambda;

    let ext = LogMelExtractor::new(cfg.features.clone());
    let eer = |enc: &aat_core::encoder::Encoder| evaluate_with(&data.trials, |k| data.load_eval(k), enc, &ext, EvalPolicy::default(), Default::default());
    let before = eer(&TrainState::new(&cfg, 0)?.model.encoder)?.eer;

    let out = RunOutput { dir: std::env::temp_dir().join("aat_train_example") };
    let report = train(&data.train, &data.bank, &cfg, 0, Some(&out))?;
    for m in report.metrics.iter().step_by((report.metrics.len() / 10).max(1)) {
        println!(
            "iter {:>5}  L_spk {:.3}  L_dis {:.3}  L_aat {:.3}",
            m.iter,
            m.l_spk,
            m.l_dis.unwrap_or(f64::NAN),
            m.l_aat.unwrap_or(f64::NAN)
        );
    }
    let after = eer(&report.state.model.encoder)?.eer;
    println!("held-out EER: {:.2}% untrained, {:.2}% trained", 100.0 * before, 100.0 * after);
    println!("checkpoints and metrics in {}", out.dir.display());
    Ok(())
}
