use aat_core::audio::{AugmentRegime, AugmentationBank, LogMelExtractor};
use aat_core::encoder::EncoderConfig;
use aat_core::experiment::{make_synthetic_corpus, SynthConfig};
use aat_core::losses::{Discriminator, SpeakerLoss};
use aat_core::optim::Adam;
use aat_core::trainer::*;

fn tiny_config(regime: AugmentRegime, batch_size: usize) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.encoder = EncoderConfig {
        embed_dim: 32,
        channel_widths: [4, 8, 16, 32],
        blocks_per_stage: [1, 1, 1, 1],
        attention_hidden: 16,
        n_mels: 40,
    };
    cfg.discriminator.hidden = 32;
    cfg.batch.batch_size = batch_size;
    cfg.batch.segment_duration_s = 0.5;
    cfg.batch.regime = regime;
    cfg.loss.speaker_loss = SpeakerLoss::AngularPrototypical;
    cfg.schedule.epochs = 1;
    cfg
}

fn corpus(n_speakers: usize) -> (Vec<Utterance>, AugmentationBank) {
    let synth = SynthConfig {
        n_speakers,
        utts_per_speaker: 2,
        min_duration_s: 1.0,
        max_duration_s: 1.5,
        channel_coloration: true,
    };
    let utts = make_synthetic_corpus(&synth, 3).training_set();
    let bank = AugmentationBank::synthetic(&mut stream(3, 50), 2, utts.iter().take(8).map(|u| u.wave.clone()).collect());
    (utts, bank)
}

fn batch(cfg: &TrainConfig, utts: &[Utterance], bank: &AugmentationBank, seed: u64) -> TrainingBatch {
    let refs: Vec<&Utterance> = utts.iter().take(cfg.batch.batch_size).collect();
    let ext = LogMelExtractor::new(cfg.features.clone());
    form_batch(&refs, &cfg.batch, bank, &ext, &mut stream(seed, 9)).unwrap()
}

#[test]
fn each_phase_only_moves_its_own_parameters() {
    let cfg = tiny_config(AugmentRegime::NoiseAndRir, 6);
    let (utts, bank) = corpus(6);
    let b = batch(&cfg, &utts, &bank, 0);
    let mut st = TrainState::new(&cfg, 0).unwrap();

    let fwd = forward_batch(&st.model, &b);
    let model_before = st.model.clone();
    let disc_before = st.discriminator.clone();
    discriminator_step(&fwd.embeddings(), &mut st.discriminator, &mut st.opt_g, 1e-2);
    assert_eq!(st.model, model_before, "the discriminator step changed the encoder");
    assert_ne!(st.discriminator.params(), disc_before.params());

    let disc_before = st.discriminator.clone();
    embedding_step(fwd, &mut st.model, &st.discriminator, &mut st.opt_f, &cfg.loss, 1e-2);
    assert_eq!(st.discriminator, disc_before, "the embedding step changed the discriminator");
    assert_ne!(st.model.encoder.params(), model_before.encoder.params());
}

#[test]
fn zero_lambda_trains_exactly_like_no_adversary() {
    let (utts, bank) = corpus(6);
    let mut with = tiny_config(AugmentRegime::NoiseAndRir, 6);
    with.loss.lambda = 0.0;
    with.loss.aat_enabled = true;
    let mut without = with.clone();
    without.loss.aat_enabled = false;
    let a = train(&utts, &bank, &with, 5, None).unwrap();
    let b = train(&utts, &bank, &without, 5, None).unwrap();
    assert_eq!(a.state.model, b.state.model);
    for (x, y) in a.metrics.iter().zip(&b.metrics) {
        assert_eq!(x.l_spk.to_bits(), y.l_spk.to_bits());
        assert!(x.l_aat.is_some() && y.l_aat.is_none());
    }
}

#[test]
fn discriminator_loss_starts_at_ln2_and_falls_on_fixed_embeddings() {
    let cfg = tiny_config(AugmentRegime::NoiseAndRir, 8);
    let (utts, bank) = corpus(8);
    let b = batch(&cfg, &utts, &bank, 1);
    let st = TrainState::new(&cfg, 1).unwrap();
    let emb = forward_batch(&st.model, &b).embeddings();

    let mut zero = Discriminator::zeroed(cfg.encoder.embed_dim, cfg.discriminator);
    let mut opt = Adam::new(zero.params(), cfg.optimizer);
    let first = discriminator_step(&emb, &mut zero, &mut opt, 1e-3);
    assert!((first - std::f64::consts::LN_2).abs() < 1e-12, "{first}");

    let mut disc = st.discriminator.clone();
    let mut opt = Adam::new(disc.params(), cfg.optimizer);
    let losses: Vec<f64> = (0..20).map(|_| discriminator_step(&emb, &mut disc, &mut opt, 1e-3)).collect();
    assert!(losses[19] < losses[0], "{losses:?}");
}

#[test]
fn speaker_loss_halves_on_a_small_task() {
    let mut cfg = tiny_config(AugmentRegime::None, 8);
    cfg.loss.aat_enabled = false;
    let (utts, bank) = corpus(8);
    let b = batch(&cfg, &utts, &bank, 2);
    let mut st = TrainState::new(&cfg, 2).unwrap();
    let (_, first) = st.iterate(&b, &cfg.loss, 1e-3);
    let mut best = first.l_spk;
    for _ in 1..200 {
        best = best.min(st.iterate(&b, &cfg.loss, 1e-3).1.l_spk);
        if best <= 0.5 * first.l_spk {
            break;
        }
    }
    assert!(best <= 0.5 * first.l_spk, "{} -> {best}", first.l_spk);
}

#[test]
fn runs_are_reproducible_and_checkpoints_round_trip() {
    let cfg = tiny_config(AugmentRegime::NoiseAndRir, 6);
    let (utts, bank) = corpus(6);
    let dir = tempfile::tempdir().unwrap();
    let out_a = RunOutput { dir: dir.path().join("a") };
    let out_b = RunOutput { dir: dir.path().join("b") };
    let a = train(&utts, &bank, &cfg, 11, Some(&out_a)).unwrap();
    train(&utts, &bank, &cfg, 11, Some(&out_b)).unwrap();
    let log_a = std::fs::read(out_a.metrics_path()).unwrap();
    assert_eq!(log_a, std::fs::read(out_b.metrics_path()).unwrap());
    assert_eq!(String::from_utf8(log_a).unwrap().lines().count(), a.metrics.len());

    let mut loaded = TrainState::load(&out_a.final_checkpoint_path()).unwrap();
    assert!(out_a.checkpoint_path(1).is_file());
    assert_eq!(loaded, a.state);
    // Training on from the checkpoint matches training on in memory.
    let mut live = a.state.clone();
    let b = batch(&cfg, &utts, &bank, 4);
    assert_eq!(live.iterate(&b, &cfg.loss, 1e-3), loaded.iterate(&b, &cfg.loss, 1e-3));
    assert_eq!(live, loaded);
}

#[test]
fn non_finite_losses_abort_with_a_dump() {
    let mut cfg = tiny_config(AugmentRegime::None, 4);
    cfg.schedule.epochs = 50;
    cfg.schedule.lr.initial_lr = 1e300;
    cfg.schedule.checkpoint_every = 0;
    let (utts, bank) = corpus(4);
    let dir = tempfile::tempdir().unwrap();
    let out = RunOutput { dir: dir.path().to_path_buf() };
    match train(&utts, &bank, &cfg, 0, Some(&out)) {
        Err(TrainError::NonFiniteLoss { dump: Some(p), iteration, .. }) => {
            assert!(p.is_file());
            let lines = std::fs::read_to_string(out.metrics_path()).unwrap().lines().count();
            assert_eq!(lines, iteration - 1);
        }
        Err(e) => panic!("{e}"),
        Ok(_) => panic!("training with an absurd learning rate stayed finite"),
    }
}

#[test]
fn too_small_corpus_is_rejected() {
    let cfg = tiny_config(AugmentRegime::None, 16);
    let (utts, bank) = corpus(4);
    assert!(matches!(
        train(&utts, &bank, &cfg, 0, None),
        Err(TrainError::ManifestTooSmall { available: 8, needed: 16 })
    ));
}
