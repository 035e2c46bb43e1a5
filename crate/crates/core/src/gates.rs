//! Hard Concrete gates: a stretched, rectified binary Concrete distribution
//! whose samples are differentiable in the location parameter and land
//! exactly on 0 or 1 with positive probability.
//!
//! A gate with location γ (plus a global location bias c) is sampled as
//!
//! ```text
//! s = sigmoid((logit(u) + γ + c) / τ),  u ~ U(0,1)
//! z = clamp(s·(r − l) + l, 0, 1)
//! ```
//!
//! with temperature τ and stretch bounds l < 0 < 1 < r. Because the stretch
//! pushes mass outside [0,1] before rectification, `P(z = 0)` and `P(z = 1)`
//! are both positive, and `P(z ≠ 0)` has the closed form used for the
//! expected-L0 penalty and for attribution scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{Tape, TensorId};

/// Global Hard Concrete hyperparameters (per-gate state is just γ).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardConcrete {
    /// Temperature τ.
    pub temperature: f64,
    /// Stretch lower bound l ≤ 0.
    pub stretch_low: f64,
    /// Stretch upper bound r ≥ 1.
    pub stretch_high: f64,
    /// Location bias c added to every γ, opening all gates initially when
    /// the gate predictor starts at zero output.
    pub location_bias: f64,
}

impl Default for HardConcrete {
    fn default() -> Self {
        HardConcrete {
            temperature: 1.0 / 3.0,
            stretch_low: -0.1,
            stretch_high: 1.1,
            location_bias: 2.0,
        }
    }
}

/// Noise-free evaluation modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    /// u fixed at 1/2: the distribution's median pre-rectification value.
    Expectation,
    /// 1 if P(z ≠ 0) > 1/2 else 0; used for all binary retained/dropped
    /// reporting.
    Hard,
}

const U_CLIP: f64 = 1e-6;

impl HardConcrete {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.stretch_low > 0.0 || self.stretch_high < 1.0 {
            return Err(Error::Config(format!(
                "stretch bounds must satisfy l <= 0 <= 1 <= r, got ({}, {})",
                self.stretch_low, self.stretch_high
            )));
        }
        Ok(())
    }

    fn check_u(u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::InvalidArg(format!(
                "uniform draw must lie strictly inside (0,1), got {u}"
            )));
        }
        Ok(u.clamp(U_CLIP, 1.0 - U_CLIP))
    }

    /// Sample a gate on the tape; differentiable w.r.t. the `[1]`-shaped γ.
    pub fn sample_tape<S: Real>(
        &self,
        tape: &mut Tape<S>,
        gamma: TensorId,
        u: f64,
    ) -> Result<TensorId> {
        let u = Self::check_u(u)?;
        let tau = self.temperature;
        let shift = ((u / (1.0 - u)).ln() + self.location_bias) / tau;
        // s = sigmoid((gamma + c + logit(u)) / tau)
        let pre = tape.affine(gamma, S::of(1.0 / tau), S::of(shift));
        let s = tape.sigmoid(pre);
        let stretched = tape.affine(
            s,
            S::of(self.stretch_high - self.stretch_low),
            S::of(self.stretch_low),
        );
        tape.clamp(stretched, S::zero(), S::one())
    }

    /// Value-route twin of [`HardConcrete::sample_tape`] (same operation
    /// order, so the two agree bitwise).
    pub fn sample_value(&self, gamma: f64, u: f64) -> Result<f64> {
        let u = Self::check_u(u)?;
        let tau = self.temperature;
        let shift = ((u / (1.0 - u)).ln() + self.location_bias) / tau;
        let s = crate::tensor::kernels::sigmoid(gamma * (1.0 / tau) + shift);
        Ok((s * (self.stretch_high - self.stretch_low) + self.stretch_low).clamp(0.0, 1.0))
    }

    /// Closed-form P(z ≠ 0) = sigmoid((γ + c) − τ·log(−l / r)): the per-gate
    /// term of the expected-L0 penalty and the reported attribution score.
    pub fn prob_nonzero_tape<S: Real>(&self, tape: &mut Tape<S>, gamma: TensorId) -> TensorId {
        let shift = self.location_bias - self.temperature * (-self.stretch_low / self.stretch_high).ln();
        let pre = tape.affine(gamma, S::one(), S::of(shift));
        tape.sigmoid(pre)
    }

    /// Value-route twin of [`HardConcrete::prob_nonzero_tape`].
    pub fn prob_nonzero(&self, gamma: f64) -> f64 {
        let shift = self.location_bias - self.temperature * (-self.stretch_low / self.stretch_high).ln();
        crate::tensor::kernels::sigmoid(gamma + shift)
    }

    /// Noise-free gate value for evaluation.
    pub fn deterministic_gate(&self, gamma: f64, mode: GateMode) -> f64 {
        match mode {
            GateMode::Expectation => self
                .sample_value(gamma, 0.5)
                .expect("0.5 is a valid uniform draw"),
            GateMode::Hard => {
                if self.prob_nonzero(gamma) > 0.5 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// γ that makes the effective location γ + c equal `loc`.
    fn gamma_for(hc: &HardConcrete, loc: f64) -> f64 {
        loc - hc.location_bias
    }

    #[test]
    fn midpoint_sample() {
        let hc = HardConcrete::default();
        // u = 0.5 and effective location 0: s = 1/2, z = 0.5*1.2 - 0.1 = 0.5
        let z = hc.sample_value(gamma_for(&hc, 0.0), 0.5).unwrap();
        assert!((z - 0.5).abs() < 1e-12);
    }

    #[test]
    fn saturated_locations_pin_the_gate() {
        let hc = HardConcrete::default();
        for u in [0.02, 0.5, 0.98] {
            assert_eq!(hc.sample_value(gamma_for(&hc, 20.0), u).unwrap(), 1.0);
            assert_eq!(hc.sample_value(gamma_for(&hc, -20.0), u).unwrap(), 0.0);
        }
    }

    #[test]
    fn invalid_uniform_draws_are_rejected() {
        let hc = HardConcrete::default();
        for u in [0.0, 1.0, -0.5, 1.5, f64::NAN] {
            assert!(hc.sample_value(0.0, u).is_err(), "u = {u}");
        }
    }

    #[test]
    fn samples_stay_in_unit_interval_and_hit_both_ends() {
        let hc = HardConcrete::default();
        let gamma = gamma_for(&hc, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut zeros, mut ones) = (0usize, 0usize);
        for _ in 0..20_000 {
            let u: f64 = rng.gen_range(1e-12..1.0 - 1e-12);
            let z = hc.sample_value(gamma, u).unwrap();
            assert!((0.0..=1.0).contains(&z));
            if z == 0.0 {
                zeros += 1;
            }
            if z == 1.0 {
                ones += 1;
            }
        }
        assert!(zeros > 0, "stretch below 0 must produce exact zeros");
        assert!(ones > 0, "stretch above 1 must produce exact ones");
    }

    #[test]
    fn prob_nonzero_closed_form_matches_monte_carlo() {
        let hc = HardConcrete::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for loc in [-4.0, -2.0, 0.0, 2.0, 4.0] {
            let gamma = gamma_for(&hc, loc);
            let analytic = hc.prob_nonzero(gamma);
            let n = 200_000;
            let hits = (0..n)
                .filter(|_| {
                    let u: f64 = rng.gen_range(1e-9..1.0 - 1e-9);
                    hc.sample_value(gamma, u).unwrap() != 0.0
                })
                .count();
            let empirical = hits as f64 / n as f64;
            assert!(
                (analytic - empirical).abs() < 1e-2,
                "location {loc}: analytic {analytic:.4} vs empirical {empirical:.4}"
            );
        }
    }

    #[test]
    fn prob_nonzero_reference_point() {
        // Effective location 0 with the default stretch/temperature:
        // sigmoid(-(1/3)·ln(0.1/1.1)) = sigmoid(0.7993...) ≈ 0.690.
        let hc = HardConcrete::default();
        let p = hc.prob_nonzero(gamma_for(&hc, 0.0));
        assert!((p - 0.690).abs() < 1e-3, "got {p}");
    }

    #[test]
    fn prob_nonzero_is_strictly_monotone() {
        let hc = HardConcrete::default();
        let mut last = 0.0;
        for i in 0..100 {
            let gamma = -10.0 + 0.2 * i as f64;
            let p = hc.prob_nonzero(gamma);
            assert!(p > last, "not monotone at gamma {gamma}");
            last = p;
        }
    }

    #[test]
    fn deterministic_modes() {
        let hc = HardConcrete::default();
        let g0 = gamma_for(&hc, 0.0);
        assert!((hc.deterministic_gate(g0, GateMode::Expectation) - 0.5).abs() < 1e-12);
        // prob_nonzero ≈ 0.69 > 0.5 at effective location 0
        assert_eq!(hc.deterministic_gate(g0, GateMode::Hard), 1.0);
        for (loc, want) in [(20.0, 1.0), (-20.0, 0.0)] {
            let g = gamma_for(&hc, loc);
            assert_eq!(hc.deterministic_gate(g, GateMode::Expectation), want);
            assert_eq!(hc.deterministic_gate(g, GateMode::Hard), want);
        }
    }

    #[test]
    fn tape_sample_matches_value_route_and_differentiates() {
        let hc = HardConcrete::default();
        for (gamma, u) in [(-2.0, 0.5), (0.3, 0.25), (-4.0, 0.9), (1.0, 0.5)] {
            let mut tape = Tape::<f64>::new();
            let g = tape.leaf(vec![gamma], &[1]).unwrap();
            let z = hc.sample_tape(&mut tape, g, u).unwrap();
            let zv = hc.sample_value(gamma, u).unwrap();
            assert_eq!(tape.value(z)[0], zv);
        }

        // dz/dgamma against finite differences on an interior point.
        crate::check::assert_gradients(
            |t, g| {
                let g0 = t.pick(g, 0).unwrap();
                hc.sample_tape(t, g0, 0.5).unwrap()
            },
            &[gamma_for(&hc, 0.0)],
            1e-6,
        );
        // prob_nonzero gradient too.
        crate::check::assert_gradients(
            |t, g| {
                let g0 = t.pick(g, 0).unwrap();
                hc.prob_nonzero_tape(t, g0)
            },
            &[0.7],
            1e-6,
        );
    }

    #[test]
    fn config_validation() {
        let bad_tau = HardConcrete {
            temperature: 0.0,
            ..HardConcrete::default()
        };
        assert!(bad_tau.validate().is_err());
        let bad_stretch = HardConcrete {
            stretch_low: 0.1,
            ..HardConcrete::default()
        };
        assert!(bad_stretch.validate().is_err());
        assert!(HardConcrete::default().validate().is_ok());
    }
}
