//! Finite-difference gradient checking for the tape ops.
//!
//! Used by the test suites to hold the analytic gradients to account; exposed
//! publicly so downstream property tests can run the same verification.

use crate::tensor::{Tape, TensorId};

/// Compare the analytic gradient of a scalar-valued graph against central
/// finite differences, returning the worst relative error over all input
/// coordinates.
///
/// `build` must construct the same graph every call: it receives a fresh tape
/// and the input tensor (1-D) and returns a scalar output. `h` is the
/// finite-difference step; `1e-5` is a good default for f64.
pub fn gradient_rel_error<F>(build: F, input: &[f64], h: f64) -> f64
where
    F: Fn(&mut Tape<f64>, TensorId) -> TensorId,
{
    let eval = |vals: &[f64]| -> f64 {
        let mut t = Tape::new();
        let x = t.leaf(vals.to_vec(), &[vals.len()]).expect("gradcheck input");
        let y = build(&mut t, x);
        assert_eq!(t.shape(y), &[1], "gradcheck target must be scalar");
        t.value(y)[0]
    };

    let mut t = Tape::new();
    let x = t.leaf(input.to_vec(), &[input.len()]).expect("gradcheck input");
    let y = build(&mut t, x);
    assert_eq!(t.shape(y), &[1], "gradcheck target must be scalar");
    t.backward(y).expect("gradcheck backward");
    let analytic = t
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; input.len()]);

    let mut worst = 0.0f64;
    for i in 0..input.len() {
        let mut plus = input.to_vec();
        plus[i] += h;
        let mut minus = input.to_vec();
        minus[i] -= h;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic[i] - numeric).abs() / denom;
        worst = worst.max(rel);
    }
    worst
}

/// Assert the analytic gradient matches finite differences within `tol`
/// (relative error, coordinate-wise).
pub fn assert_gradients<F>(build: F, input: &[f64], tol: f64)
where
    F: Fn(&mut Tape<f64>, TensorId) -> TensorId,
{
    let worst = gradient_rel_error(build, input, 1e-5);
    assert!(
        worst <= tol,
        "gradient check failed: max relative error {worst:.3e} > {tol:.3e}"
    );
}
