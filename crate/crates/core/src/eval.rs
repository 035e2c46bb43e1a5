//! Evaluation harness: faithfulness against the benchmark's analytic gold
//! masks, cross-seed stability (Fleiss' Kappa), degradation under random
//! additional dropping, and per-layer attribution mass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{AttributionFile, AttributionResult};
use crate::error::{Error, Result};
use crate::gnn::RgcnModel;
use crate::graphmask::GateClassifier;
use crate::graphs::StarGraphExample;
use crate::scalar::Real;

/// Micro-averaged precision/recall/F1 in percent over aligned binary
/// masks. Precision is 100 by convention when nothing is predicted; an
/// entirely empty gold side is an error because recall would be undefined.
pub fn faithfulness(preds: &[Vec<bool>], golds: &[Vec<bool>]) -> Result<(f64, f64, f64)> {
    if preds.len() != golds.len() {
        return Err(Error::InvalidArg(format!(
            "{} predicted masks vs {} gold masks",
            preds.len(),
            golds.len()
        )));
    }
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fne = 0u64;
    for (p, g) in preds.iter().zip(golds) {
        if p.len() != g.len() {
            return Err(Error::InvalidArg(format!(
                "mask length mismatch: {} vs {}",
                p.len(),
                g.len()
            )));
        }
        for (&pi, &gi) in p.iter().zip(g) {
            match (pi, gi) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fne += 1,
                (false, false) => {}
            }
        }
    }
    if tp + fne == 0 {
        return Err(Error::InvalidArg("gold masks contain no positive edges".into()));
    }
    Ok(prf(tp, fp, fne))
}

fn prf(tp: u64, fp: u64, fne: u64) -> (f64, f64, f64) {
    let p = if tp + fp == 0 {
        100.0
    } else {
        100.0 * tp as f64 / (tp + fp) as f64
    };
    let r = 100.0 * tp as f64 / (tp + fne) as f64;
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// Per-example (macro) mean F1; examples whose gold mask is empty are
/// skipped because their recall is undefined.
pub fn faithfulness_macro(preds: &[Vec<bool>], golds: &[Vec<bool>]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::InvalidArg(format!(
            "{} predicted masks vs {} gold masks",
            preds.len(),
            golds.len()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, g) in preds.iter().zip(golds) {
        if !g.iter().any(|&x| x) {
            continue;
        }
        let tp = p.iter().zip(g).filter(|(&a, &b)| a && b).count() as u64;
        let fp = p.iter().zip(g).filter(|(&a, &b)| a && !b).count() as u64;
        let fne = p.iter().zip(g).filter(|(&a, &b)| !a && b).count() as u64;
        sum += prf(tp, fp, fne).2;
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArg("gold masks contain no positive edges".into()));
    }
    Ok(sum / n as f64)
}

/// The gold mask repeated once per model layer, flattened layer-major to
/// align with [`AttributionResult::hard_flat`].
pub fn gold_gates(ex: &StarGraphExample, num_layers: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(num_layers * ex.gold_mask.len());
    for _ in 0..num_layers {
        out.extend_from_slice(&ex.gold_mask);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FleissKappa {
    pub kappa: f64,
    /// True when every rating landed in one category, which makes expected
    /// agreement 1 and the statistic undefined; reported as perfect
    /// agreement.
    pub degenerate: bool,
}

/// Fleiss' Kappa for binary decisions, `decisions[s][g]` = rater s on item
/// g. Needs at least two raters and one item.
pub fn fleiss_kappa(decisions: &[Vec<bool>]) -> Result<FleissKappa> {
    let s = decisions.len();
    if s < 2 {
        return Err(Error::InvalidArg(format!("Fleiss' Kappa needs >= 2 raters, got {s}")));
    }
    let g = decisions[0].len();
    if g == 0 {
        return Err(Error::InvalidArg("Fleiss' Kappa needs at least one item".into()));
    }
    if decisions.iter().any(|row| row.len() != g) {
        return Err(Error::InvalidArg("raters scored different numbers of items".into()));
    }

    let sf = s as f64;
    let mut p_bar = 0.0;
    let mut total_true = 0u64;
    for item in 0..g {
        let yes = decisions.iter().filter(|row| row[item]).count() as f64;
        let no = sf - yes;
        p_bar += (yes * (yes - 1.0) + no * (no - 1.0)) / (sf * (sf - 1.0));
        total_true += yes as u64;
    }
    p_bar /= g as f64;
    let p_yes = total_true as f64 / (sf * g as f64);
    let p_e = p_yes * p_yes + (1.0 - p_yes) * (1.0 - p_yes);

    if (1.0 - p_e).abs() < 1e-15 {
        return Ok(FleissKappa { kappa: 1.0, degenerate: true });
    }
    Ok(FleissKappa {
        kappa: (p_bar - p_e) / (1.0 - p_e),
        degenerate: false,
    })
}

/// Faithfulness summary for one method over one test set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    pub method: String,
    pub threshold: Option<f64>,
    /// Micro-averaged over every gate of every example, in percent.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Per-example mean F1, for comparison with the micro numbers.
    pub macro_f1: f64,
    pub averaging: String,
    pub original_accuracy: f64,
    pub masked_accuracy: f64,
    /// Masked minus original, percentage points.
    pub accuracy_delta: f64,
    pub mean_divergence: f64,
    pub retained_fraction_per_layer: Vec<f64>,
}

/// Score an attribution file against the examples it was computed on
/// (aligned by position).
pub fn faithfulness_report(
    attrs: &AttributionFile,
    examples: &[StarGraphExample],
) -> Result<FaithfulnessReport> {
    if attrs.examples.len() != examples.len() {
        return Err(Error::InvalidArg(format!(
            "{} attributions for {} examples",
            attrs.examples.len(),
            examples.len()
        )));
    }
    if attrs.examples.is_empty() {
        return Err(Error::InvalidArg("empty attribution file".into()));
    }
    let num_layers = attrs.examples[0].layers.len();

    let preds: Vec<Vec<bool>> = attrs.examples.iter().map(|a| a.hard_flat()).collect();
    let golds: Vec<Vec<bool>> = examples.iter().map(|ex| gold_gates(ex, num_layers)).collect();
    let (precision, recall, f1) = faithfulness(&preds, &golds)?;
    let macro_f1 = faithfulness_macro(&preds, &golds)?;

    let n = examples.len() as f64;
    let orig_correct = attrs
        .examples
        .iter()
        .zip(examples)
        .filter(|(a, ex)| a.original_prediction == usize::from(ex.label))
        .count() as f64;
    let masked_correct = attrs
        .examples
        .iter()
        .zip(examples)
        .filter(|(a, ex)| a.masked_prediction == usize::from(ex.label))
        .count() as f64;
    let mean_divergence =
        attrs.examples.iter().map(|a| a.divergence).sum::<f64>() / n;

    let retained_fraction_per_layer = (0..num_layers)
        .map(|k| {
            attrs
                .examples
                .iter()
                .map(|a| {
                    let layer = &a.layers[k];
                    layer.iter().filter(|e| e.hard).count() as f64 / layer.len() as f64
                })
                .sum::<f64>()
                / n
        })
        .collect();

    Ok(FaithfulnessReport {
        method: attrs.method.clone(),
        threshold: attrs.threshold,
        precision,
        recall,
        f1,
        macro_f1,
        averaging: "micro (primary); macro_f1 for comparison".into(),
        original_accuracy: 100.0 * orig_correct / n,
        masked_accuracy: 100.0 * masked_correct / n,
        accuracy_delta: 100.0 * (masked_correct - orig_correct) / n,
        mean_divergence,
        retained_fraction_per_layer,
    })
}

/// Cross-seed agreement of hard gate decisions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityReport {
    pub seeds: Vec<u64>,
    pub kappa: f64,
    pub degenerate: bool,
    pub num_gates: usize,
    /// `decisions[s]` flattens every gate of every example for seed s.
    pub decisions: Vec<Vec<bool>>,
}

pub fn stability_report(seeds: &[u64], decisions: Vec<Vec<bool>>) -> Result<StabilityReport> {
    if seeds.len() != decisions.len() {
        return Err(Error::InvalidArg(format!(
            "{} seeds for {} decision rows",
            seeds.len(),
            decisions.len()
        )));
    }
    let fk = fleiss_kappa(&decisions)?;
    Ok(StabilityReport {
        seeds: seeds.to_vec(),
        kappa: fk.kappa,
        degenerate: fk.degenerate,
        num_gates: decisions[0].len(),
        decisions,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DegradationPoint {
    pub fraction: f64,
    pub mean_accuracy: f64,
    pub stdev_accuracy: f64,
}

/// Accuracy after keeping only a random share of each example's retained
/// gates. Superfluous gates always stay closed (baseline substitution);
/// at fraction 1 nothing extra is dropped, so the point equals the
/// masked-model accuracy exactly.
pub fn degradation_curve<S: Real>(
    model: &RgcnModel<S>,
    cls: &GateClassifier<S>,
    examples: &[StarGraphExample],
    attrs: &[AttributionResult],
    fractions: &[f64],
    resamples: usize,
    seed: u64,
) -> Result<Vec<DegradationPoint>> {
    if examples.len() != attrs.len() || examples.is_empty() {
        return Err(Error::InvalidArg(format!(
            "{} attributions for {} examples",
            attrs.len(),
            examples.len()
        )));
    }
    if resamples == 0 {
        return Err(Error::InvalidArg("need at least one resample".into()));
    }
    if let Some(&f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Error::InvalidArg(format!("fraction {f} outside [0, 1]")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let mut accs = Vec::with_capacity(resamples);
        for _ in 0..resamples {
            let mut correct = 0usize;
            for (ex, attr) in examples.iter().zip(attrs) {
                let pred = degraded_prediction(model, cls, ex, attr, f, &mut rng)?;
                if pred == usize::from(ex.label) {
                    correct += 1;
                }
            }
            accs.push(100.0 * correct as f64 / examples.len() as f64);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / accs.len() as f64;
        out.push(DegradationPoint {
            fraction: f,
            mean_accuracy: mean,
            stdev_accuracy: var.sqrt(),
        });
    }
    Ok(out)
}

fn degraded_prediction<S: Real, R: Rng>(
    model: &RgcnModel<S>,
    cls: &GateClassifier<S>,
    ex: &StarGraphExample,
    attr: &AttributionResult,
    fraction: f64,
    rng: &mut R,
) -> Result<usize> {
    // Uniform sample of retained gates to drop, across all layers.
    let mut retained: Vec<(usize, usize)> = Vec::new();
    for (k, layer) in attr.layers.iter().enumerate() {
        for a in layer {
            if a.hard {
                retained.push((k, a.edge));
            }
        }
    }
    let n_drop = ((1.0 - fraction) * retained.len() as f64).round() as usize;
    crate::gnn::shuffle(&mut retained, rng);
    let dropped: std::collections::HashSet<(usize, usize)> =
        retained.iter().take(n_drop).copied().collect();

    let mut icept = |layer: usize, e: usize, m: &mut Vec<S>| {
        let keep = attr.layers[layer][e].hard && !dropped.contains(&(layer, e));
        let z = if keep { S::one() } else { S::zero() };
        let b = cls.params.data(cls.baseline_param(layer));
        let omz = S::of(-1.0) * z + S::one();
        for (mv, &bv) in m.iter_mut().zip(b) {
            *mv = z * *mv + omz * bv;
        }
    };
    let (logits, _) = model.run_example_values(ex, Some(&mut icept))?;
    Ok(crate::gnn::argmax(&logits))
}

/// Mean share of total attribution score per layer, in percent.
///
/// Examples whose attribution carries zero total score contribute nothing to
/// the mean — search-style methods legitimately return empty selections when
/// no edge subset changes the prediction. Errors only when *every* example is
/// empty, since a per-layer share is undefined then.
pub fn layer_attribution_mass(attrs: &[AttributionResult]) -> Result<Vec<f64>> {
    if attrs.is_empty() {
        return Err(Error::InvalidArg("no attributions".into()));
    }
    let num_layers = attrs[0].layers.len();
    let mut mass = vec![0.0; num_layers];
    let mut contributing = 0usize;
    for a in attrs {
        if a.layers.len() != num_layers {
            return Err(Error::InvalidArg("inconsistent layer counts across attributions".into()));
        }
        let total: f64 = a.layers.iter().flatten().map(|e| e.prob).sum();
        if total <= 0.0 {
            continue;
        }
        contributing += 1;
        for (k, layer) in a.layers.iter().enumerate() {
            mass[k] += layer.iter().map(|e| e.prob).sum::<f64>() / total;
        }
    }
    if contributing == 0 {
        return Err(Error::Data("every example has zero total attribution score".into()));
    }
    let n = contributing as f64;
    mass.iter_mut().for_each(|m| *m = 100.0 * *m / n);
    Ok(mass)
}

/// One row per (method, metric) for every report, with a header.
pub fn reports_to_csv(reports: &[FaithfulnessReport]) -> String {
    let mut out = String::from("method,metric,value\n");
    for r in reports {
        let mut push = |metric: &str, value: f64| {
            out.push_str(&format!("{},{},{:.4}\n", r.method, metric, value));
        };
        push("precision", r.precision);
        push("recall", r.recall);
        push("f1", r.f1);
        push("macro_f1", r.macro_f1);
        if let Some(t) = r.threshold {
            push("threshold", t);
        }
        push("original_accuracy", r.original_accuracy);
        push("masked_accuracy", r.masked_accuracy);
        push("accuracy_delta", r.accuracy_delta);
        push("mean_divergence", r.mean_divergence);
        for (k, f) in r.retained_fraction_per_layer.iter().enumerate() {
            push(&format!("retained_fraction_layer_{k}"), *f);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::EdgeAttribution;

    #[test]
    fn faithfulness_counts_by_hand() {
        // Predict {e1}, gold {e1, e2}: P = 100, R = 50, F1 = 2/3.
        let preds = vec![vec![true, false, false]];
        let golds = vec![vec![true, true, false]];
        let (p, r, f1) = faithfulness(&preds, &golds).unwrap();
        assert_eq!(p, 100.0);
        assert_eq!(r, 50.0);
        assert!((f1 - 200.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn faithfulness_identity_is_perfect() {
        let m = vec![vec![true, false, true], vec![false, false, true]];
        let (p, r, f1) = faithfulness(&m, &m).unwrap();
        assert_eq!((p, r, f1), (100.0, 100.0, 100.0));
    }

    #[test]
    fn faithfulness_empty_prediction_convention() {
        let preds = vec![vec![false, false]];
        let golds = vec![vec![true, false]];
        let (p, r, f1) = faithfulness(&preds, &golds).unwrap();
        assert_eq!(p, 100.0);
        assert_eq!(r, 0.0);
        assert_eq!(f1, 0.0);
    }

    #[test]
    fn faithfulness_rejects_empty_gold() {
        let preds = vec![vec![true]];
        let golds = vec![vec![false]];
        assert!(faithfulness(&preds, &golds).is_err());
    }

    #[test]
    fn macro_f1_skips_empty_gold_examples() {
        let preds = vec![vec![true], vec![true]];
        let golds = vec![vec![true], vec![false]];
        // Second example has no gold positives and is skipped.
        assert_eq!(faithfulness_macro(&preds, &golds).unwrap(), 100.0);
    }

    #[test]
    fn kappa_perfect_agreement_mixed_categories() {
        let rows = vec![vec![true, false, true], vec![true, false, true]];
        let fk = fleiss_kappa(&rows).unwrap();
        assert!(!fk.degenerate);
        assert!((fk.kappa - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kappa_single_category_is_degenerate() {
        let rows = vec![vec![true, true], vec![true, true], vec![true, true]];
        let fk = fleiss_kappa(&rows).unwrap();
        assert!(fk.degenerate);
        assert_eq!(fk.kappa, 1.0);
    }

    #[test]
    fn kappa_matches_longhand_three_raters_four_items() {
        // Items rated yes by 3, 2, 1, 0 of 3 raters.
        // P_i per item: 1, 1/3, 1/3, 1. P-bar = 2/3.
        // p_yes = 6/12 = 1/2, P_e = 1/2. kappa = (2/3 - 1/2)/(1 - 1/2) = 1/3.
        let rows = vec![
            vec![true, true, true, false],
            vec![true, true, false, false],
            vec![true, false, false, false],
        ];
        let fk = fleiss_kappa(&rows).unwrap();
        assert!((fk.kappa - 1.0 / 3.0).abs() < 1e-12, "kappa = {}", fk.kappa);
    }

    #[test]
    fn kappa_near_zero_under_random_rating() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<bool>> = (0..5)
            .map(|_| (0..10_000).map(|_| rng.gen::<bool>()).collect())
            .collect();
        let fk = fleiss_kappa(&rows).unwrap();
        assert!(fk.kappa.abs() < 0.05, "kappa = {}", fk.kappa);
    }

    #[test]
    fn kappa_invariant_under_relabeling_and_permutation() {
        let rows = vec![
            vec![true, false, true, true, false],
            vec![true, true, false, true, false],
            vec![false, false, true, true, true],
        ];
        let base = fleiss_kappa(&rows).unwrap().kappa;

        let flipped: Vec<Vec<bool>> = rows
            .iter()
            .map(|r| r.iter().map(|&b| !b).collect())
            .collect();
        assert!((fleiss_kappa(&flipped).unwrap().kappa - base).abs() < 1e-12);

        let mut permuted = rows.clone();
        permuted.swap(0, 2);
        assert!((fleiss_kappa(&permuted).unwrap().kappa - base).abs() < 1e-12);

        let cols: Vec<Vec<bool>> = rows
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.swap(1, 3);
                r.rotate_left(2);
                r
            })
            .collect();
        assert!((fleiss_kappa(&cols).unwrap().kappa - base).abs() < 1e-12);
    }

    #[test]
    fn kappa_rejects_degenerate_shapes() {
        assert!(fleiss_kappa(&[vec![true, false]]).is_err());
        assert!(fleiss_kappa(&[vec![], vec![]]).is_err());
        assert!(fleiss_kappa(&[vec![true], vec![true, false]]).is_err());
    }

    fn attr(probs: Vec<Vec<f64>>) -> AttributionResult {
        AttributionResult {
            original_prediction: 0,
            masked_prediction: 0,
            divergence: 0.0,
            layers: probs
                .into_iter()
                .map(|layer| {
                    layer
                        .into_iter()
                        .enumerate()
                        .map(|(e, prob)| EdgeAttribution { edge: e, prob, hard: prob > 0.5 })
                        .collect()
                })
                .collect(),
        }
    }

    #[test]
    fn mass_single_layer_is_all_of_it() {
        let attrs = vec![attr(vec![vec![0.5, 0.25]])];
        assert_eq!(layer_attribution_mass(&attrs).unwrap(), vec![100.0]);
    }

    #[test]
    fn mass_uniform_two_layers_splits_evenly() {
        let attrs = vec![attr(vec![vec![0.3, 0.3], vec![0.3, 0.3]])];
        let mass = layer_attribution_mass(&attrs).unwrap();
        assert!((mass[0] - 50.0).abs() < 1e-12);
        assert!((mass[1] - 50.0).abs() < 1e-12);
    }

    #[test]
    fn mass_closed_layer_contributes_nothing() {
        let attrs = vec![attr(vec![vec![0.8, 0.2], vec![0.0, 0.0], vec![0.5, 0.5]])];
        let mass = layer_attribution_mass(&attrs).unwrap();
        assert_eq!(mass[1], 0.0);
        assert!((mass.iter().sum::<f64>() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn mass_rejects_zero_total() {
        let attrs = vec![attr(vec![vec![0.0, 0.0]])];
        assert!(layer_attribution_mass(&attrs).is_err());
    }

    #[test]
    fn mass_skips_empty_examples() {
        // An empty selection (legal for search-style methods) must not drag
        // the mean; only the example with mass contributes.
        let attrs = vec![attr(vec![vec![0.0, 0.0]]), attr(vec![vec![0.4, 0.1]])];
        assert_eq!(layer_attribution_mass(&attrs).unwrap(), vec![100.0]);
    }

    #[test]
    fn csv_has_one_row_per_metric() {
        let report = FaithfulnessReport {
            method: "gate-classifier".into(),
            threshold: Some(0.5),
            precision: 98.8,
            recall: 100.0,
            f1: 99.4,
            macro_f1: 99.0,
            averaging: "micro".into(),
            original_accuracy: 100.0,
            masked_accuracy: 99.8,
            accuracy_delta: -0.2,
            mean_divergence: 0.01,
            retained_fraction_per_layer: vec![0.3],
        };
        let csv = reports_to_csv(&[report]);
        assert!(csv.starts_with("method,metric,value\n"));
        assert_eq!(csv.lines().count(), 11);
        assert!(csv.contains("gate-classifier,f1,99.4000"));
        assert!(csv.contains("gate-classifier,retained_fraction_layer_0,0.3000"));
    }
}
