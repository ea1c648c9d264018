//! Serves a listening benchmark built from held-out synthetic speakers.
//!
//! ```bash
//! cargo run --release -p aat-server --example serve_benchmark -- /tmp/bench 127.0.0.1:8080
//! curl 'http://127.0.0.1:8080/api/next?annotator=alice'
//! ```

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use aat_core::experiment::{make_synthetic_corpus, verification_trials, SynthConfig};
use aat_core::human::{BenchmarkService, BenchmarkSet};
use aat_core::trainer::stream;

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "benchmark".into()));
    let addr: SocketAddr = args.next().unwrap_or_else(|| "127.0.0.1:8080".into()).parse()?;

    let corpus = make_synthetic_corpus(&SynthConfig { n_speakers: 8, utts_per_speaker: 6, ..Default::default() }, 0);
    corpus.write(&dir.join("audio"))?;
    let mut trials = verification_trials(&corpus.utterances, 40, &mut stream(0, 1));
    for t in &mut trials {
        for p in [&mut t.a, &mut t.b] {
            let u = corpus.utterances.iter().find(|u| u.id == *p).expect("trial ids come from the corpus");
            *p = u.relative_path().display().to_string();
        }
    }
    let set = BenchmarkSet::from_trials(&trials, 4, &dir.join("audio"))?;
    let svc = BenchmarkService::open(set, &dir.join("records.log"))?;
    println!("{} pairs in 4 subsets on http://{addr}", trials.len());
    aat_server::serve(addr, Arc::new(svc)).await?;
    Ok(())
}
