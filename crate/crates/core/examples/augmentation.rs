//! Draws channel simulations from a generated bank and checks that the
//! mixtures land on the requested SNR.

use aat_core::audio::{augment, measured_snr_db, AugmentRegime, AugmentationBank, Waveform};
use aat_core::experiment::{make_synthetic_corpus, SynthConfig};
use aat_core::trainer::stream;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = make_synthetic_corpus(&SynthConfig { n_speakers: 4, utts_per_speaker: 2, ..Default::default() }, 1);
    let speech: Vec<Waveform> = corpus.utterances.iter().map(|u| u.wave.clone()).collect();
    let bank = AugmentationBank::synthetic(&mut stream(1, 2), 2, speech.clone());
    println!("bank: {} noises, {} babble sources, {} rirs", bank.noise_count(), bank.babble_count(), bank.rir_count());

    let mut rng = stream(1, 3);
    let seg = speech[0].crop(0..16_000);
    for regime in [AugmentRegime::NoiseOnly, AugmentRegime::NoiseOrRir, AugmentRegime::NoiseAndRir] {
        for _ in 0..3 {
            let spec = bank.draw(regime, true, seg.len(), &mut rng)?;
            let out = augment(&seg, &spec, &mut rng)?;
            let noise = match spec.noise_category {
                // Measured against the (possibly reverberant) signal the noise was mixed into.
                Some(c) if spec.rir.is_none() => format!("{c:?} at {:.2} dB, measured {:.2} dB", spec.snr_db, measured_snr_db(&seg, &out)),
                Some(c) => format!("{c:?} at {:.2} dB after reverb", spec.snr_db),
                None => "no noise".into(),
            };
            println!("{:<14} rir: {:<5} {noise}", regime.label(), spec.rir.is_some());
        }
    }
    Ok(())
}
