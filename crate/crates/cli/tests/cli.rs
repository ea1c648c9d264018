use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
name = "tiny"
repeats = 1

[corpus]
kind = "synthetic"
held_out_speakers = 2
trials_per_class = 10
bank_per_category = 1

[corpus.synth]
n_speakers = 6
utts_per_speaker = 4
min_duration_s = 1.0
max_duration_s = 1.5

[train.batch]
batch_size = 4
segment_duration_s = 0.5

[train.schedule]
epochs = 1

[train.encoder]
embed_dim = 16
channel_widths = [2, 4, 4, 8]
blocks_per_stage = [1, 1, 1, 1]
attention_hidden = 8

[train.discriminator]
hidden = 8

[eval.policy]
n_segments = 1
segment_s = 1.0
"#;

fn aat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aat")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn train_caches_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("out");

    let first = aat(&["train", "--config", s(&cfg), "--seed", "4", "--out", s(&out)]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    assert!(stdout(&first).contains("seed 4"));
    assert!(!stdout(&first).contains("cached"));
    let again = aat(&["train", "--config", s(&cfg), "--seed", "4", "--out", s(&out)]);
    assert!(again.status.success());
    assert!(stdout(&again).contains("(cached)"), "{}", stdout(&again));

    let runs: Vec<_> = std::fs::read_dir(out.join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 1);
    let run = runs.into_iter().next().unwrap().unwrap().path();
    for f in ["config.toml", "metrics.jsonl", "final.ckpt", "scores.txt", "result.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }

    let rep = aat(&["report", "--out", s(&out)]);
    assert!(rep.status.success());
    assert!(std::fs::read_to_string(out.join("report.csv")).unwrap().starts_with("speaker_loss,"));
    assert!(stdout(&rep).contains("±—"), "{}", stdout(&rep));

    let eval_out = dir.path().join("eval");
    let ev = aat(&[
        "evaluate",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&run.join("final.ckpt")),
        "--out",
        s(&eval_out),
    ]);
    assert!(ev.status.success(), "{}", String::from_utf8_lossy(&ev.stderr));
    // Same encoder, same trials: the scores match the training run's.
    assert_eq!(
        std::fs::read(eval_out.join("scores.txt")).unwrap(),
        std::fs::read(run.join("scores.txt")).unwrap()
    );
}

#[test]
fn synthetic_corpus_round_trips_through_a_files_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let corpus = dir.path().join("corpus");
    let o = aat(&["synth-corpus", "--config", s(&cfg), "--out", s(&corpus)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("24 utterances"), "{}", stdout(&o));
    assert_eq!(std::fs::read_to_string(corpus.join("train.txt")).unwrap().lines().count(), 16);
    assert_eq!(std::fs::read_to_string(corpus.join("trials.txt")).unwrap().lines().count(), 20);

    let files = TINY.replace(
        "[corpus]\nkind = \"synthetic\"\nheld_out_speakers = 2\ntrials_per_class = 10\nbank_per_category = 1\n\n[corpus.synth]\nn_speakers = 6\nutts_per_speaker = 4\nmin_duration_s = 1.0\nmax_duration_s = 1.5\n",
        &format!(
            "[corpus]\nkind = \"files\"\nroot = \"{0}\"\ntrain_manifest = \"{0}/train.txt\"\ntrials = \"{0}/trials.txt\"\n",
            s(&corpus)
        ),
    );
    assert!(files.contains("kind = \"files\""));
    let fcfg = dir.path().join("files.toml");
    std::fs::write(&fcfg, files).unwrap();
    let o = aat(&["sweep", "--config", s(&fcfg), "--out", s(&dir.path().join("sweep"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("sweep/report.txt").is_file());
}

#[test]
fn failures_give_a_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.toml");
    std::fs::write(
        &missing,
        "[corpus]\nkind = \"files\"\nroot = \"/nope\"\ntrain_manifest = \"/nope/a.txt\"\ntrials = \"/nope/b.txt\"\n",
    )
    .unwrap();
    let o = aat(&["sweep", "--config", s(&missing), "--out", s(dir.path())]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("/nope/a.txt") && err.contains("/nope/b.txt"), "{err}");

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "repeats = 0\n").unwrap();
    assert!(!aat(&["train", "--config", s(&bad), "--out", s(dir.path())]).status.success());
    assert!(!aat(&["report", "--out", s(&dir.path().join("empty"))]).status.success());
    assert!(!aat(&["frobnicate"]).status.success());
}
