//! EER and minDCF of a score list, read from a file of `<label> <score>`
//! lines or drawn from two overlapping Gaussians.

use aat_core::eval::{compute_eer, compute_mindcf, DcfParams};
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scores: Vec<(f64, bool)> = match std::env::args().nth(1) {
        Some(path) => std::fs::read_to_string(path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let mut it = l.split_whitespace();
                let same = it.next() == Some("1");
                let s: f64 = it.next().ok_or("missing score")?.parse()?;
                Ok((s, same))
            })
            .collect::<Result<_, Box<dyn std::error::Error>>>()?,
        None => {
            let mut rng = aat_core::trainer::stream(0, 0);
            let (tar, non) = (Normal::new(1.5, 1.0)?, Normal::new(0.0, 1.0)?);
            (0..2000)
                .map(|_| {
                    let same = rng.random_bool(0.5);
                    (if same { tar.sample(&mut rng) } else { non.sample(&mut rng) }, same)
                })
                .collect()
        }
    };
    let eer = compute_eer(&scores)?;
    let dcf = compute_mindcf(&scores, DcfParams::default())?;
    println!("{} trials", scores.len());
    println!("EER    {:.2}% at threshold {:.3}", 100.0 * eer.eer, eer.threshold);
    println!("minDCF {:.3} at threshold {:.3} (P_target 0.05)", dcf.min_dcf, dcf.threshold);
    Ok(())
}
