//! Analytics for 5-point same/different judgments.

use super::HumanError;

/// Predict-same thresholds, strictest first.
const THRESHOLDS: [u8; 4] = [5, 4, 3, 2];

/// A scored, labelled judgment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Judgment {
    pub score: u8,
    pub same: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    /// Predict same when `score >= threshold`; `None` for the endpoints.
    pub threshold: Option<u8>,
    pub false_accepts: usize,
    pub true_accepts: usize,
    pub far: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub n_same: usize,
    pub n_diff: usize,
}

fn class_counts(judgments: &[Judgment]) -> Result<(usize, usize), HumanError> {
    if let Some(j) = judgments.iter().find(|j| !(1..=5).contains(&j.score)) {
        return Err(HumanError::InvalidScore(j.score as i64));
    }
    let n_same = judgments.iter().filter(|j| j.same).count();
    let n_diff = judgments.len() - n_same;
    if n_same == 0 || n_diff == 0 {
        return Err(HumanError::DegenerateLabels { n_same, n_diff });
    }
    Ok((n_same, n_diff))
}

/// Operating points at the four discrete thresholds plus (0,0) and (1,1).
pub fn interpolated_roc(judgments: &[Judgment]) -> Result<RocCurve, HumanError> {
    let (n_same, n_diff) = class_counts(judgments)?;
    let mut points = vec![RocPoint {
        threshold: None,
        false_accepts: 0,
        true_accepts: 0,
        far: 0.0,
        tpr: 0.0,
    }];
    for t in THRESHOLDS {
        let fa = judgments.iter().filter(|j| !j.same && j.score >= t).count();
        let ta = judgments.iter().filter(|j| j.same && j.score >= t).count();
        points.push(RocPoint {
            threshold: Some(t),
            false_accepts: fa,
            true_accepts: ta,
            far: fa as f64 / n_diff as f64,
            tpr: ta as f64 / n_same as f64,
        });
    }
    points.push(RocPoint {
        threshold: None,
        false_accepts: n_diff,
        true_accepts: n_same,
        far: 1.0,
        tpr: 1.0,
    });
    Ok(RocCurve { points, n_same, n_diff })
}

/// EER where the piecewise-linear curve meets `FAR = 1 - TPR`, and the
/// trapezoidal area under it.
pub fn eer_auroc_from_roc(curve: &RocCurve) -> (f64, f64) {
    let pts = &curve.points;
    let auroc = pts
        .windows(2)
        .map(|w| (w[1].far - w[0].far) * (w[0].tpr + w[1].tpr) / 2.0)
        .sum();
    // FAR - FRR rises from -1 at (0,0) to 1 at (1,1) along the curve.
    let gap = |p: &RocPoint| p.far - (1.0 - p.tpr);
    let mut eer = 0.5;
    for w in pts.windows(2) {
        let (g0, g1) = (gap(&w[0]), gap(&w[1]));
        if g0 <= 0.0 && g1 >= 0.0 {
            eer = if g1 == g0 {
                w[0].far
            } else {
                let a = -g0 / (g1 - g0);
                w[0].far + a * (w[1].far - w[0].far)
            };
            break;
        }
    }
    (eer, auroc)
}

/// Fraction correct when predicting same for `score >= 3`, or `score >= 4`
/// when borderline answers count as different.
pub fn binary_accuracy(judgments: &[Judgment], borderline_to_positive: bool) -> Result<f64, HumanError> {
    class_counts(judgments)?;
    let cut = if borderline_to_positive { 3 } else { 4 };
    let correct = judgments.iter().filter(|j| (j.score >= cut) == j.same).count();
    Ok(correct as f64 / judgments.len() as f64)
}

/// Threshold maximizing accuracy of `score >= t` on labelled validation
/// scores. Accuracy is constant between adjacent distinct scores; among the
/// best intervals the widest bounded one wins and its midpoint is returned.
/// If only an unbounded interval is best, the nearest score is returned
/// (below all scores) or one unit above the highest score.
pub fn model_accuracy_threshold(scores: &[(f64, bool)]) -> Result<f64, HumanError> {
    let n_same = scores.iter().filter(|s| s.1).count();
    let n_diff = scores.len() - n_same;
    if n_same == 0 || n_diff == 0 {
        return Err(HumanError::DegenerateLabels { n_same, n_diff });
    }
    if scores.iter().any(|s| !s.0.is_finite()) {
        return Err(HumanError::NonFiniteScore);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Threshold at or below sorted[0]: everything predicted same.
    let mut correct = n_same;
    let mut best = (correct, f64::NEG_INFINITY, sorted[0].0);
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == v {
            if sorted[i].1 {
                correct -= 1;
            } else {
                correct += 1;
            }
            i += 1;
        }
        // Thresholds in (v, next] predict same only above v.
        let hi = sorted.get(i).map_or(f64::INFINITY, |s| s.0);
        let width = |lo: f64, hi: f64| if lo.is_finite() && hi.is_finite() { hi - lo } else { -1.0 };
        if correct > best.0 || (correct == best.0 && width(v, hi) > width(best.1, best.2)) {
            best = (correct, v, hi);
        }
    }
    let (_, lo, hi) = best;
    Ok(match (lo.is_finite(), hi.is_finite()) {
        (true, true) => (lo + hi) / 2.0,
        (false, _) => hi,
        (true, false) => lo + 1.0,
    })
}

/// Accuracy of `score >= threshold` against labels.
pub fn model_accuracy(scores: &[(f64, bool)], threshold: f64) -> f64 {
    let correct = scores.iter().filter(|(s, same)| (*s >= threshold) == *same).count();
    correct as f64 / scores.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn judgments(same: &[(u8, usize)], diff: &[(u8, usize)]) -> Vec<Judgment> {
        let mut v = Vec::new();
        for &(score, n) in same {
            v.extend(std::iter::repeat(Judgment { score, same: true }).take(n));
        }
        for &(score, n) in diff {
            v.extend(std::iter::repeat(Judgment { score, same: false }).take(n));
        }
        v
    }

    #[test]
    fn crafted_histogram_matches_hand_counts() {
        // same: 10x5, 5x4, 5x2; diff: 10x1, 5x2, 5x4
        let j = judgments(&[(5, 10), (4, 5), (2, 5)], &[(1, 10), (2, 5), (4, 5)]);
        let roc = interpolated_roc(&j).unwrap();
        let counts: Vec<(usize, usize)> = roc.points.iter().map(|p| (p.false_accepts, p.true_accepts)).collect();
        // >=5: fa 0 ta 10; >=4: fa 5 ta 15; >=3: fa 5 ta 15; >=2: fa 10 ta 20.
        assert_eq!(counts, vec![(0, 0), (0, 10), (5, 15), (5, 15), (10, 20), (20, 20)]);
        assert_eq!(roc.points[2].far, 0.25);
        assert_eq!(roc.points[2].tpr, 0.75);
        // Accuracy at >=3: 15 true accepts + 15 true rejects of 40.
        assert_eq!(binary_accuracy(&j, true).unwrap(), 30.0 / 40.0);
        // Crossing lies on the (0.25, 0.75) point exactly.
        let (eer, auroc) = eer_auroc_from_roc(&roc);
        assert!((eer - 0.25).abs() < 1e-15);
        let area = 0.25 * 0.5 * (0.5 + 0.75) + 0.25 * 0.5 * (0.75 + 1.0) + 0.5 * 1.0;
        assert!((auroc - area).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_uninformative_annotators() {
        let perfect = judgments(&[(5, 7)], &[(1, 9)]);
        let (eer, auroc) = eer_auroc_from_roc(&interpolated_roc(&perfect).unwrap());
        assert_eq!((eer, auroc), (0.0, 1.0));
        assert_eq!(binary_accuracy(&perfect, true).unwrap(), 1.0);

        let threes = judgments(&[(3, 10)], &[(3, 10)]);
        let (eer, auroc) = eer_auroc_from_roc(&interpolated_roc(&threes).unwrap());
        assert_eq!((eer, auroc), (0.5, 0.5));
        assert_eq!(binary_accuracy(&threes, true).unwrap(), 0.5);
    }

    #[test]
    fn label_swap_mirrors_auroc() {
        let j = judgments(&[(5, 3), (3, 4), (2, 1)], &[(1, 2), (4, 3), (2, 5)]);
        let swapped: Vec<Judgment> = j.iter().map(|x| Judgment { same: !x.same, ..*x }).collect();
        let (_, a) = eer_auroc_from_roc(&interpolated_roc(&j).unwrap());
        let (_, b) = eer_auroc_from_roc(&interpolated_roc(&swapped).unwrap());
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(matches!(
            interpolated_roc(&judgments(&[(5, 2)], &[])),
            Err(HumanError::DegenerateLabels { .. })
        ));
        assert!(matches!(
            binary_accuracy(&judgments(&[(6, 1)], &[(1, 1)]), true),
            Err(HumanError::InvalidScore(6))
        ));
    }

    #[test]
    fn threshold_is_the_midpoint_of_the_gap() {
        assert_eq!(model_accuracy_threshold(&[(0.9, true), (0.1, false)]).unwrap(), 0.5);
        let sep = [(0.2, false), (0.3, false), (0.7, true), (0.8, true)];
        assert_eq!(model_accuracy_threshold(&sep).unwrap(), 0.5);
    }

    #[test]
    fn threshold_matches_an_exhaustive_sweep() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let scores: Vec<(f64, bool)> = (0..100)
                .map(|_| {
                    let same = rng.random_bool(0.5);
                    let s: f64 = rng.random_range(0.0..1.0) + if same { 0.3 } else { 0.0 };
                    ((s * 20.0).round() / 20.0, same)
                })
                .collect();
            let mut cands: Vec<f64> = scores.iter().map(|s| s.0).collect();
            cands.push(f64::INFINITY);
            let oracle = cands.iter().map(|&t| model_accuracy(&scores, t)).fold(0.0, f64::max);
            let t = model_accuracy_threshold(&scores).unwrap();
            assert_eq!(model_accuracy(&scores, t), oracle);
        }
    }
}
