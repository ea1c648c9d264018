//! Simulated listeners on the human benchmark: each annotator claims a
//! subset, answers on the 5-point scale with some noise, and the analytics
//! report EER, AUROC and accuracy per subset.

use std::path::Path;

use aat_core::eval::Trial;
use aat_core::human::{BenchmarkService, BenchmarkSet, HumanError, Submission};
use aat_core::trainer::stream;
use rand::Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let trials: Vec<Trial> = (0..400)
        .map(|i| Trial {
            same: i % 2 == 0,
            a: format!("a{i}.wav"),
            b: format!("b{i}.wav"),
        })
        .collect();
    let set = BenchmarkSet::from_trials(&trials, 4, Path::new("audio"))?;
    let labels: std::collections::HashMap<String, bool> = set.pairs.iter().map(|p| (p.pair_id.clone(), p.same)).collect();
    let dir = tempfile::tempdir()?;
    let svc = BenchmarkService::open(set, &dir.path().join("records.log"))?;

    let mut rng = stream(0, 0);
    // Listener skill: probability of leaning the right way.
    for (who, skill) in [("expert", 0.85), ("novice1", 0.7), ("novice2", 0.65), ("guesser", 0.5)] {
        loop {
            let task = match svc.next_task(who) {
                Ok(t) => t,
                Err(HumanError::SubsetExhausted(_)) => break,
                Err(e) => return Err(e.into()),
            };
            let right = rng.random_bool(skill);
            let lean_same = labels[&task.pair_id] == right;
            let confident = rng.random_bool(0.6);
            let score = match (lean_same, confident) {
                (true, true) => 5,
                (true, false) => rng.random_range(3..=4),
                (false, false) => rng.random_range(2..=3),
                (false, true) => 1,
            };
            svc.record_annotation(&Submission {
                pair_id: task.pair_id,
                annotator_id: who.into(),
                score,
                elapsed_s: rng.random_range(4.0..20.0),
            })?;
            if task.remaining_in_subset == 1 {
                break;
            }
        }
    }
    println!("subset  EER      AUROC  accuracy  n");
    for s in svc.set().subsets() {
        let m = svc.metrics(Some(&s))?;
        println!("{s:<6}  {:>6.2}%  {:.3}  {:.3}     {}", 100.0 * m.eer, m.auroc, m.accuracy, m.n);
    }
    let all = svc.metrics(None)?;
    println!("all     {:>6.2}%  {:.3}  {:.3}     {}", 100.0 * all.eer, all.auroc, all.accuracy, all.n);
    Ok(())
}

