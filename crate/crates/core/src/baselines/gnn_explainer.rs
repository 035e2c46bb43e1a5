//! Per-example soft edge masks in the GNNExplainer style.
//!
//! A free logit w is fitted for every layer-edge slot of a single example;
//! messages are scaled by σ(w) and the mask is trained to keep the model's
//! original predicted label cheap to reproduce while a sparsity term pushes
//! gates shut and an entropy term pushes them away from the undecided
//! middle. The mutual-information objective of the original method is
//! replaced by its usual cross-entropy surrogate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::RgcnModel;
use crate::graphs::StarGraphExample;
use crate::optim::Adam;
use crate::params::{Binding, ParamSet};
use crate::scalar::Real;
use crate::tensor::{kernels, Tape, TensorId};

use super::SoftAttribution;

pub const METHOD: &str = "gnnexplainer";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GnnExplainerConfig {
    pub steps: usize,
    pub lr: f64,
    /// Weight of Σ σ(w).
    pub sparsity_weight: f64,
    /// Weight of Σ H(σ(w)).
    pub entropy_weight: f64,
    /// Initial mask logit; 0 starts every gate at σ = 0.5 and keeps the
    /// method deterministic without a seed.
    pub init_logit: f64,
}

impl Default for GnnExplainerConfig {
    fn default() -> Self {
        GnnExplainerConfig {
            steps: 200,
            lr: 1e-2,
            sparsity_weight: 0.05,
            entropy_weight: 0.1,
            init_logit: 0.0,
        }
    }
}

impl GnnExplainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("mask fitting needs at least one step".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.sparsity_weight >= 0.0) || !(self.entropy_weight >= 0.0) {
            return Err(Error::Config("regularizer weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Elementwise binary entropy of σ(w), built from log-sigmoids so saturated
/// logits stay finite: H = −σ(w)·logσ(w) − σ(−w)·logσ(−w).
fn mask_entropy<S: Real>(tape: &mut Tape<S>, w: TensorId) -> Result<TensorId> {
    let p = tape.sigmoid(w);
    let lp = tape.log_sigmoid(w);
    let neg_w = tape.affine(w, S::of(-1.0), S::zero());
    let lq = tape.log_sigmoid(neg_w);
    let q = tape.affine(p, S::of(-1.0), S::one());
    let plp = tape.mul(p, lp)?;
    let qlq = tape.mul(q, lq)?;
    let sum = tape.add(plp, qlq)?;
    Ok(tape.affine(sum, S::of(-1.0), S::zero()))
}

/// Fit a soft mask for one example and return the final σ(w) scores.
pub fn gnn_explainer<S: Real>(
    model: &RgcnModel<S>,
    ex: &StarGraphExample,
    cfg: &GnnExplainerConfig,
) -> Result<SoftAttribution> {
    cfg.validate()?;
    let num_layers = model.config.num_layers;
    let num_edges = ex.graph.edges.len();
    let target = model.predict(ex)?;

    let mut mask = ParamSet::<S>::new();
    let ids: Vec<_> = (0..num_layers)
        .map(|k| mask.add_full(&format!("mask.l{k}"), &[num_edges], S::of(cfg.init_logit)))
        .collect::<Result<_>>()?;
    let mut opt = Adam::new(S::of(cfg.lr), &mask);

    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let mut bind_mask = Binding::trainable(&mask);
        let mut bind_model = Binding::frozen(&model.params);

        let ws: Vec<TensorId> = ids
            .iter()
            .map(|&id| bind_mask.get(&mut tape, &mask, id))
            .collect::<Result<_>>()?;
        let ps: Vec<TensorId> = ws.iter().map(|&w| tape.sigmoid(w)).collect();

        let mut icept = |t: &mut Tape<S>, k: usize, e: usize, m| {
            let pe = t.pick(ps[k], e)?;
            t.scalar_mul(pe, m)
        };
        let (logits, _) = model.run_example_tape(&mut tape, &mut bind_model, ex, Some(&mut icept))?;
        let lsm = tape.log_softmax(logits)?;
        let picked = tape.pick(lsm, target)?;
        let mut loss = tape.affine(picked, S::of(-1.0), S::zero());

        if cfg.sparsity_weight > 0.0 {
            let all_p = tape.concat(&ps)?;
            let total = tape.sum(all_p);
            let weighted = tape.affine(total, S::of(cfg.sparsity_weight), S::zero());
            loss = tape.add(loss, weighted)?;
        }
        if cfg.entropy_weight > 0.0 {
            let hs: Vec<TensorId> = ws
                .iter()
                .map(|&w| mask_entropy(&mut tape, w))
                .collect::<Result<_>>()?;
            let all_h = tape.concat(&hs)?;
            let total = tape.sum(all_h);
            let weighted = tape.affine(total, S::of(cfg.entropy_weight), S::zero());
            loss = tape.add(loss, weighted)?;
        }

        tape.backward(loss)?;
        mask.zero_grads();
        bind_mask.harvest(&tape, &mut mask);
        opt.step(&mut mask)?;
    }

    let scores = ids
        .iter()
        .map(|&id| mask.data(id).iter().map(|&w| kernels::sigmoid(w).as_f64()).collect())
        .collect();
    Ok(SoftAttribution { method: METHOD.into(), scores })
}
