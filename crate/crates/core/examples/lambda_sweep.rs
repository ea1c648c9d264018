//! A small lambda sweep with repeats, aggregated into a report table.
//!
//! ```bash
//! cargo run --release -p aat-core --example lambda_sweep -- /tmp/sweep
//! ```
//! Finished runs are cached by config hash, so rerunning only reports.

use aat_core::experiment::{aggregate, render_text, run_experiment, ExperimentConfig};

const CONFIG: &str = r#"
name = "lambda-sweep"
repeats = 2

[corpus]
kind = "synthetic"
held_out_speakers = 4
trials_per_class = 100

[corpus.synth]
n_speakers = 12
utts_per_speaker = 8

[train.batch]
batch_size = 16
segment_duration_s = 0.5

[train.schedule]
epochs = 4

[train.encoder]
embed_dim = 32
channel_widths = [4, 8, 16, 32]
blocks_per_stage = [1, 1, 1, 1]
attention_hidden = 16

[train.discriminator]
hidden = 32

[grid]
lambda = [0.0, 1.0, 3.0, 10.0]
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "lambda_sweep".into());
    let cfg = ExperimentConfig::from_toml(CONFIG)?;
    let outcome = run_experiment(&cfg, out.as_ref())?;
    println!("{} runs ({} cached), {} failed", outcome.results.len(), outcome.cache_hits, outcome.failures.len());
    print!("{}", render_text(&aggregate(&outcome.results)));
    Ok(())
}
