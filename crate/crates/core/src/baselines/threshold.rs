//! Validation-set threshold selection for soft attribution methods.

use crate::error::{Error, Result};
use crate::eval::faithfulness;

use super::SoftAttribution;

/// The nine-point grid {0.1, .., 0.9} every soft method selects over.
pub fn threshold_grid() -> impl Iterator<Item = f64> {
    (1..=9).map(|i| f64::from(i) / 10.0)
}

/// The grid threshold maximizing micro-F1 of `score > t` against the flat
/// per-gate gold masks; ties resolve to the smallest threshold.
pub fn select_threshold(scores: &[SoftAttribution], golds: &[Vec<bool>]) -> Result<f64> {
    let grid: Vec<f64> = threshold_grid().collect();
    select_threshold_over(&grid, scores, golds)
}

/// [`select_threshold`] over a caller-supplied grid. Ties keep the earliest
/// grid entry, so an ascending grid resolves ties to the smallest threshold.
pub fn select_threshold_over(
    grid: &[f64],
    scores: &[SoftAttribution],
    golds: &[Vec<bool>],
) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::InvalidArg("threshold grid is empty".into()));
    }
    if let Some(&t) = grid.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::InvalidArg(format!("threshold {t} outside [0, 1]")));
    }
    if scores.len() != golds.len() || scores.is_empty() {
        return Err(Error::InvalidArg(format!(
            "threshold selection needs matched, non-empty score and gold lists \
             (got {} and {})",
            scores.len(),
            golds.len()
        )));
    }
    let mut best: Option<(f64, f64)> = None;
    for &t in grid {
        let preds: Vec<Vec<bool>> = scores.iter().map(|s| s.binarize_flat(t)).collect();
        let (_, _, f1) = faithfulness(&preds, golds)?;
        if best.map_or(true, |(_, bf)| f1 > bf) {
            best = Some((t, f1));
        }
    }
    Ok(best.expect("grid is non-empty").0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn soft(scores: Vec<Vec<f64>>) -> SoftAttribution {
        SoftAttribution { method: "test".into(), scores }
    }

    #[test]
    fn saturated_scores_fall_back_to_the_smallest_threshold() {
        // Every threshold keeps everything, so F1 ties across the grid.
        let scores = vec![soft(vec![vec![1.0, 1.0], vec![1.0, 1.0]])];
        let golds = vec![vec![true, true, true, true]];
        assert_eq!(select_threshold(&scores, &golds).unwrap(), 0.1);
    }

    #[test]
    fn exact_binary_scores_tie_everywhere_and_pick_the_smallest() {
        let scores = vec![soft(vec![vec![1.0, 0.0], vec![0.0, 1.0]])];
        let golds = vec![vec![true, false, false, true]];
        assert_eq!(select_threshold(&scores, &golds).unwrap(), 0.1);
    }

    #[test]
    fn a_constructed_unique_maximum_is_found() {
        // Gold marks the first two of five gates. Scores: gold gates at 0.85
        // and 0.45, distractors at 0.35, 0.25, 0.15. The full grid scan:
        //   t=0.1..0.3 keep too much (precision loss),
        //   t=0.4      keeps exactly the gold pair -> F1 = 100,
        //   t>=0.5     drops the 0.45 gate (recall loss).
        let scores = vec![soft(vec![vec![0.85, 0.45, 0.35, 0.25, 0.15]])];
        let golds = vec![vec![true, true, false, false, false]];
        assert_eq!(select_threshold(&scores, &golds).unwrap(), 0.4);
    }

    #[test]
    fn grid_scan_matches_a_longhand_scan() {
        // Independent check of the argmax on a messier case.
        let scores = vec![
            soft(vec![vec![0.9, 0.6, 0.2], vec![0.7, 0.1, 0.55]]),
            soft(vec![vec![0.8, 0.3, 0.35], vec![0.05, 0.45, 0.65]]),
        ];
        let golds = vec![
            vec![true, true, false, true, false, false],
            vec![true, false, false, false, true, true],
        ];
        let mut best_t = 0.0;
        let mut best_f1 = -1.0;
        for i in 1..=9 {
            let t = f64::from(i) / 10.0;
            let preds: Vec<Vec<bool>> =
                scores.iter().map(|s| s.binarize_flat(t)).collect();
            let (_, _, f1) = faithfulness(&preds, &golds).unwrap();
            if f1 > best_f1 {
                best_f1 = f1;
                best_t = t;
            }
        }
        assert_eq!(select_threshold(&scores, &golds).unwrap(), best_t);
    }

    #[test]
    fn mismatched_or_empty_inputs_are_refused() {
        assert!(select_threshold(&[], &[]).is_err());
        let scores = vec![soft(vec![vec![1.0]])];
        assert!(select_threshold(&scores, &[]).is_err());
    }

    #[test]
    fn custom_grids_are_validated_and_respected() {
        let scores = vec![soft(vec![vec![0.85, 0.45, 0.35, 0.25, 0.15]])];
        let golds = vec![vec![true, true, false, false, false]];
        assert!(select_threshold_over(&[], &scores, &golds).is_err());
        assert!(select_threshold_over(&[0.5, 1.5], &scores, &golds).is_err());
        // A grid that skips the best bucket settles for its own optimum.
        let t = select_threshold_over(&[0.2, 0.6], &scores, &golds).unwrap();
        assert_eq!(t, 0.2);
        let t = select_threshold_over(&[0.38, 0.44], &scores, &golds).unwrap();
        assert_eq!(t, 0.38);
    }

    #[test]
    fn empty_gold_propagates_the_faithfulness_error() {
        let scores = vec![soft(vec![vec![0.9, 0.1]])];
        let golds = vec![vec![false, false]];
        assert!(select_threshold(&scores, &golds).is_err());
    }
}
