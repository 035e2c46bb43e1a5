//! Exhaustive subset-erasure search.
//!
//! Finds the smallest set of edges whose messages alone sustain the model's
//! prediction; every other edge's message is removed outright (zeroed at
//! every layer), not replaced by a learned baseline — this is the classic
//! erasure formulation the masking methods are measured against. The search
//! enumerates retained sets by increasing size, so the first preserving set
//! is both minimum-cardinality and lexicographically smallest.

use crate::attribution::AttributionResult;
use crate::error::{Error, Result};
use crate::gnn::{argmax, RgcnModel};
use crate::graphs::StarGraphExample;
use crate::scalar::Real;

use super::masked_attribution;

/// Hard ceiling on the exhaustive 2^E enumeration.
pub const MAX_ERASURE_EDGES: usize = 20;

/// Lexicographic k-combinations of `{0, .., n-1}`.
struct Combinations {
    n: usize,
    k: usize,
    cur: Vec<usize>,
    started: bool,
}

impl Combinations {
    fn new(n: usize, k: usize) -> Self {
        Combinations { n, k, cur: (0..k).collect(), started: false }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if !self.started {
            self.started = true;
            if self.k > self.n {
                return None;
            }
            return Some(self.cur.clone());
        }
        // Advance the rightmost index that still has room, then pack the
        // tail tightly behind it.
        let mut i = self.k;
        while i > 0 {
            i -= 1;
            if self.cur[i] < self.n - self.k + i {
                self.cur[i] += 1;
                for j in i + 1..self.k {
                    self.cur[j] = self.cur[j - 1] + 1;
                }
                return Some(self.cur.clone());
            }
        }
        None
    }
}

/// Model prediction with every edge outside `retained` silenced (zero
/// message at every layer).
fn retained_prediction<S: Real>(
    model: &RgcnModel<S>,
    ex: &StarGraphExample,
    retained: &[usize],
) -> Result<usize> {
    let mut keep = vec![false; ex.graph.edges.len()];
    for &e in retained {
        keep[e] = true;
    }
    let mut icept = |_k: usize, e: usize, m: &mut Vec<S>| {
        if !keep[e] {
            m.iter_mut().for_each(|v| *v = S::zero());
        }
    };
    let (logits, _) = model.run_example_values(ex, Some(&mut icept))?;
    Ok(argmax(&logits))
}

/// The smallest retained edge set that preserves the original argmax
/// prediction, ties broken by the lexicographically smallest index set.
/// Refuses graphs with more than [`MAX_ERASURE_EDGES`] edges.
pub fn erasure_search<S: Real>(
    model: &RgcnModel<S>,
    ex: &StarGraphExample,
) -> Result<Vec<usize>> {
    let num_edges = ex.graph.edges.len();
    if num_edges > MAX_ERASURE_EDGES {
        return Err(Error::InvalidArg(format!(
            "erasure search over {num_edges} edges would enumerate 2^{num_edges} subsets; \
             the exhaustive search refuses more than {MAX_ERASURE_EDGES}"
        )));
    }
    let original = model.predict(ex)?;
    for k in 0..=num_edges {
        for retained in Combinations::new(num_edges, k) {
            if retained_prediction(model, ex, &retained)? == original {
                return Ok(retained);
            }
        }
    }
    unreachable!("retaining every edge reproduces the original prediction")
}

/// [`erasure_search`] packaged in the shared attribution format: the
/// per-edge decision is repeated at every layer, with 0/1 soft scores.
pub fn erasure_attribution<S: Real>(
    model: &RgcnModel<S>,
    ex: &StarGraphExample,
) -> Result<AttributionResult> {
    let retained = erasure_search(model, ex)?;
    let num_layers = model.config.num_layers;
    let mut keep_edge = vec![false; ex.graph.edges.len()];
    for &e in &retained {
        keep_edge[e] = true;
    }
    let score_row: Vec<f64> = keep_edge.iter().map(|&b| f64::from(u8::from(b))).collect();
    let scores = vec![score_row; num_layers];
    let keep = vec![keep_edge; num_layers];
    masked_attribution(model, ex, &scores, &keep, None)
}

/// Post-hoc check of the two erasure guarantees: dropping everything outside
/// `retained` preserves the argmax, and no strict subset of `retained` does
/// (equivalently, every strict superset of the dropped set changes the
/// prediction).
pub fn verify_erasure_maximality<S: Real>(
    model: &RgcnModel<S>,
    ex: &StarGraphExample,
    retained: &[usize],
) -> Result<bool> {
    if retained.len() > MAX_ERASURE_EDGES {
        return Err(Error::InvalidArg(format!(
            "verifying a {}-edge retained set is not tractable",
            retained.len()
        )));
    }
    let original = model.predict(ex)?;
    if retained_prediction(model, ex, retained)? != original {
        return Ok(false);
    }
    for k in 0..retained.len() {
        for picks in Combinations::new(retained.len(), k) {
            let subset: Vec<usize> = picks.iter().map(|&i| retained[i]).collect();
            if retained_prediction(model, ex, &subset)? == original {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model(seed: u64) -> RgcnModel<f64> {
        super::super::test_support::model(seed)
    }

    #[test]
    fn combinations_enumerate_in_lexicographic_order() {
        let got: Vec<Vec<usize>> = Combinations::new(4, 2).collect();
        assert_eq!(
            got,
            vec![
                vec![0, 1],
                vec![0, 2],
                vec![0, 3],
                vec![1, 2],
                vec![1, 3],
                vec![2, 3]
            ]
        );
        assert_eq!(Combinations::new(5, 0).collect::<Vec<_>>(), vec![Vec::<usize>::new()]);
        assert_eq!(Combinations::new(3, 3).count(), 1);
        assert_eq!(Combinations::new(6, 3).count(), 20);
        assert_eq!(Combinations::new(2, 3).count(), 0);
    }

    #[test]
    fn search_result_is_minimal_and_preserving_for_any_model() {
        // The contract (smallest preserving retained set) binds whatever the
        // model happens to compute, so an untrained one exercises it fine.
        for seed in [3, 11] {
            let model = tiny_model(seed);
            let ex = StarGraphExample::new(vec![0, 0, 1, 2, 1, 3], (0, 1)).unwrap();
            let retained = erasure_search(&model, &ex).unwrap();
            assert!(verify_erasure_maximality(&model, &ex, &retained).unwrap());
        }
    }

    #[test]
    fn attribution_repeats_the_edge_decision_per_layer() {
        let model = tiny_model(5);
        let ex = StarGraphExample::new(vec![0, 1, 2], (0, 1)).unwrap();
        let attr = erasure_attribution(&model, &ex).unwrap();
        assert_eq!(attr.layers.len(), 2);
        for e in 0..3 {
            assert_eq!(attr.layers[0][e].hard, attr.layers[1][e].hard);
            assert_eq!(attr.layers[0][e].prob, attr.layers[1][e].prob);
        }
        assert_eq!(attr.masked_prediction, attr.original_prediction);
    }

    #[test]
    fn oversized_graphs_are_refused() {
        let model = tiny_model(0);
        let ex = StarGraphExample::new(vec![0; 21], (0, 1)).unwrap();
        assert!(matches!(erasure_search(&model, &ex), Err(Error::InvalidArg(_))));
    }

    #[test]
    fn verification_rejects_non_minimal_sets() {
        let model = tiny_model(3);
        let ex = StarGraphExample::new(vec![0, 0, 1, 2, 1, 3], (0, 1)).unwrap();
        let retained = erasure_search(&model, &ex).unwrap();
        // Padding the minimal set with one more edge breaks minimality.
        let extra = (0..6).find(|e| !retained.contains(e)).unwrap();
        let mut padded = retained.clone();
        padded.push(extra);
        padded.sort_unstable();
        assert!(!verify_erasure_maximality(&model, &ex, &padded).unwrap());
    }
}
