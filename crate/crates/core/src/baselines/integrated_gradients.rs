//! Integrated gradients over per-message scale variables.
//!
//! Every message at every layer is multiplied by a scalar ẑ; attributions
//! integrate the gradient of the originally-predicted class's logit with
//! respect to each ẑ along the straight path from the all-zero baseline to
//! the all-ones point. The integral is approximated by the Riemann midpoint
//! rule over α ∈ (0, 1], which is exact for integrands linear in α and
//! satisfies the usual completeness identity in the limit.

use crate::error::{Error, Result};
use crate::gnn::{argmax, RgcnModel};
use crate::graphs::StarGraphExample;
use crate::params::Binding;
use crate::scalar::Real;
use crate::tensor::Tape;

use super::SoftAttribution;

pub const METHOD: &str = "ig";
pub const DEFAULT_STEPS: usize = 50;

/// Midpoint-rule approximation of `∫₀¹ g(α) dα` for a vector-valued `g`:
/// the mean of `g((j + 0.5) / steps)` over `j = 0..steps`.
pub(crate) fn midpoint_path_integral<F>(steps: usize, mut grad_at: F) -> Result<Vec<f64>>
where
    F: FnMut(f64) -> Result<Vec<f64>>,
{
    if steps == 0 {
        return Err(Error::InvalidArg("the midpoint rule needs at least one step".into()));
    }
    let mut acc: Vec<f64> = Vec::new();
    for j in 0..steps {
        let alpha = (j as f64 + 0.5) / steps as f64;
        let g = grad_at(alpha)?;
        if acc.is_empty() {
            acc = vec![0.0; g.len()];
        } else if acc.len() != g.len() {
            return Err(Error::InvalidArg("gradient length changed between steps".into()));
        }
        for (a, v) in acc.iter_mut().zip(g) {
            *a += v / steps as f64;
        }
    }
    Ok(acc)
}

/// Gradient of the target logit with respect to each per-layer-edge scale,
/// with every scale held at `alpha`. Flat layer-major layout.
fn scale_gradients<S: Real>(
    model: &RgcnModel<S>,
    ex: &StarGraphExample,
    target: usize,
    alpha: f64,
) -> Result<Vec<f64>> {
    let num_layers = model.config.num_layers;
    let num_edges = ex.graph.edges.len();
    let n = num_layers * num_edges;

    let mut tape = Tape::new();
    let mut bind = Binding::frozen(&model.params);
    let z = tape.leaf(vec![S::of(alpha); n], &[n])?;
    let mut icept = |t: &mut Tape<S>, k: usize, e: usize, m| {
        let ze = t.pick(z, k * num_edges + e)?;
        t.scalar_mul(ze, m)
    };
    let (logits, _) = model.run_example_tape(&mut tape, &mut bind, ex, Some(&mut icept))?;
    let f = tape.pick(logits, target)?;
    tape.backward(f)?;
    let grad = tape
        .grad(z)
        .ok_or_else(|| Error::Training("scale variables received no gradient".into()))?;
    Ok(grad.iter().map(|g| g.as_f64()).collect())
}

/// Unnormalized (signed) integrated gradients, `raw[layer][edge]`.
pub fn ig_raw<S: Real>(
    model: &RgcnModel<S>,
    ex: &StarGraphExample,
    steps: usize,
) -> Result<Vec<Vec<f64>>> {
    let (orig_logits, _) = model.run_example_values(ex, None)?;
    let target = argmax(&orig_logits);
    let flat = midpoint_path_integral(steps, |alpha| scale_gradients(model, ex, target, alpha))?;
    let num_edges = ex.graph.edges.len();
    Ok(flat.chunks(num_edges).map(<[f64]>::to_vec).collect())
}

/// Integrated-gradients scores: the raw attributions normalized into
/// [−1, 1] by the example's largest magnitude, then folded to absolute
/// values. An all-zero attribution map normalizes to all zeros.
pub fn integrated_gradients<S: Real>(
    model: &RgcnModel<S>,
    ex: &StarGraphExample,
    steps: usize,
) -> Result<SoftAttribution> {
    let raw = ig_raw(model, ex, steps)?;
    let max_abs = raw
        .iter()
        .flatten()
        .map(|a| a.abs())
        .fold(0.0_f64, f64::max);
    let scores = raw
        .iter()
        .map(|layer| {
            layer
                .iter()
                .map(|&a| if max_abs > 0.0 { (a / max_abs).abs() } else { 0.0 })
                .collect()
        })
        .collect();
    Ok(SoftAttribution { method: METHOD.into(), scores })
}

/// Completeness diagnostic: the sum of unnormalized attributions, paired
/// with the exact difference `f(ẑ≡1) − f(ẑ≡0)` of the target logit. The two
/// converge as the step count grows.
pub fn completeness<S: Real>(
    model: &RgcnModel<S>,
    ex: &StarGraphExample,
    steps: usize,
) -> Result<(f64, f64)> {
    let (orig_logits, _) = model.run_example_values(ex, None)?;
    let target = argmax(&orig_logits);
    let raw = ig_raw(model, ex, steps)?;
    let total: f64 = raw.iter().flatten().sum();

    let mut silence = |_k: usize, _e: usize, m: &mut Vec<S>| {
        m.iter_mut().for_each(|v| *v = S::zero());
    };
    let (zero_logits, _) = model.run_example_values(ex, Some(&mut silence))?;
    let delta = orig_logits[target].as_f64() - zero_logits[target].as_f64();
    Ok((total, delta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model(seed: u64) -> RgcnModel<f64> {
        super::super::test_support::model(seed)
    }

    fn example() -> StarGraphExample {
        StarGraphExample::new(vec![0, 0, 1, 2, 3], (0, 1)).unwrap()
    }

    #[test]
    fn midpoint_rule_is_exact_for_linear_integrands() {
        // g(α) = w constant (f linear in ẑ): one step already recovers w.
        let w = vec![0.25, -3.0, 7.5];
        let got = midpoint_path_integral(1, |_| Ok(w.clone())).unwrap();
        assert_eq!(got, w);
        // g(α) = 2α (f quadratic): the midpoint rule is exact for this too,
        // since the integrand is linear in α. ∫₀¹ 2α dα = 1.
        let got = midpoint_path_integral(1, |a| Ok(vec![2.0 * a])).unwrap();
        assert_eq!(got, vec![1.0]);
        let got = midpoint_path_integral(7, |a| Ok(vec![2.0 * a])).unwrap();
        assert!((got[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn midpoint_rule_converges_quadratically_on_a_cubic() {
        // ∫₀¹ 4α³ dα = 1; midpoint error shrinks ~N².
        let coarse = (midpoint_path_integral(10, |a| Ok(vec![4.0 * a * a * a])).unwrap()[0]
            - 1.0)
            .abs();
        let fine =
            (midpoint_path_integral(100, |a| Ok(vec![4.0 * a * a * a])).unwrap()[0] - 1.0).abs();
        assert!(fine < coarse / 50.0, "coarse {coarse:.2e} fine {fine:.2e}");
    }

    #[test]
    fn zero_steps_is_an_error() {
        assert!(midpoint_path_integral(0, |_| Ok(vec![1.0])).is_err());
    }

    #[test]
    fn raw_attributions_stabilize_as_steps_grow() {
        let model = tiny_model(2);
        let ex = example();
        let coarse = ig_raw(&model, &ex, 50).unwrap();
        let fine = ig_raw(&model, &ex, 1000).unwrap();
        for (c, f) in coarse.iter().flatten().zip(fine.iter().flatten()) {
            assert!((c - f).abs() < 1e-2, "coarse {c} fine {f}");
        }
    }

    #[test]
    fn completeness_holds_at_high_step_counts() {
        let model = tiny_model(4);
        let ex = example();
        let (total, delta) = completeness(&model, &ex, 500).unwrap();
        let tol = 0.01 * delta.abs().max(1e-3);
        assert!(
            (total - delta).abs() <= tol,
            "sum {total} vs f(1)-f(0) {delta}"
        );
    }

    #[test]
    fn scores_are_normalized_absolute_values() {
        let model = tiny_model(6);
        let ex = example();
        let soft = integrated_gradients(&model, &ex, DEFAULT_STEPS).unwrap();
        assert_eq!(soft.scores.len(), 2);
        let mut max = 0.0_f64;
        for &s in soft.scores.iter().flatten() {
            assert!((0.0..=1.0).contains(&s));
            max = max.max(s);
        }
        assert!((max - 1.0).abs() < 1e-12, "per-example max normalizes to 1");
    }

    #[test]
    fn attributions_are_deterministic() {
        let model = tiny_model(9);
        let ex = example();
        let a = integrated_gradients(&model, &ex, 25).unwrap();
        let b = integrated_gradients(&model, &ex, 25).unwrap();
        assert_eq!(a, b);
    }
}
