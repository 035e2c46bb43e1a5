//! Per-message information bottleneck.
//!
//! An amortized readout with the gate classifier's input signature
//! (source state, target state, message) emits a sigmoidal ξ per message;
//! during training the masked message is the noisy mix ξ·m + (1−ξ)·ε with
//! ε ~ N(μ, σ²) drawn from per-layer message statistics, and the loss is
//! the output divergence plus a closed-form Gaussian KL that charges each
//! gate for the information it lets through. Attribution scores are the
//! noise-free ξ; hard evaluation substitutes the layer mean for dropped
//! messages.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attribution::AttributionResult;
use crate::error::{Error, Result};
use crate::gates::HardConcrete;
use crate::gnn::{shuffle, RgcnModel};
use crate::graphmask::{divergence_tape, gate_input, mix_message, GateArch, GateClassifier};
use crate::graphs::StarGraphExample;
use crate::optim::Adam;
use crate::params::{Binding, Checkpoint};
use crate::scalar::Real;
use crate::tensor::{kernels, Tape, TensorId};

use super::{masked_attribution, SoftAttribution};

pub const METHOD: &str = "ib";
pub const IB_CHECKPOINT_KIND: &str = "ib-readout";

/// Smallest admitted variance; dimensions below it are clamped up.
pub const VARIANCE_FLOOR: f64 = 1e-6;
/// ξ stays strictly below 1 so the KL's log(1/(1−ξ)) term stays finite.
pub const XI_MAX: f64 = 1.0 - 1e-6;

/// Per-layer, per-dimension mean and (floored) variance of the messages the
/// frozen model produces over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageStats {
    pub mean: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
    /// How many (layer, dimension) slots hit the variance floor; callers
    /// should warn when this is non-zero.
    pub floored_dims: usize,
}

/// Clamp variances up to [`VARIANCE_FLOOR`], returning how many dims moved.
fn floor_variances(vars: &mut [Vec<f64>]) -> usize {
    let mut floored = 0;
    for layer in vars.iter_mut() {
        for v in layer.iter_mut() {
            if *v < VARIANCE_FLOOR {
                *v = VARIANCE_FLOOR;
                floored += 1;
            }
        }
    }
    floored
}

/// Population mean and variance of every message the model produces on
/// `examples`, separately per layer and dimension.
pub fn compute_message_stats<S: Real>(
    model: &RgcnModel<S>,
    examples: &[StarGraphExample],
) -> Result<MessageStats> {
    if examples.is_empty() {
        return Err(Error::InvalidArg("message statistics over an empty dataset".into()));
    }
    let num_layers = model.config.num_layers;
    let dim = model.config.state_dim;
    let mut sum = vec![vec![0.0_f64; dim]; num_layers];
    let mut sumsq = vec![vec![0.0_f64; dim]; num_layers];
    let mut count = vec![0_u64; num_layers];
    for ex in examples {
        let (_, traces) = model.run_example_values(ex, None)?;
        for (k, trace) in traces.iter().enumerate() {
            for msg in &trace.messages {
                for (i, v) in msg.iter().enumerate() {
                    let v = v.as_f64();
                    sum[k][i] += v;
                    sumsq[k][i] += v * v;
                }
                count[k] += 1;
            }
        }
    }
    let mut mean = vec![vec![0.0_f64; dim]; num_layers];
    let mut var = vec![vec![0.0_f64; dim]; num_layers];
    for k in 0..num_layers {
        if count[k] == 0 {
            return Err(Error::Data(format!("layer {k} produced no messages")));
        }
        let n = count[k] as f64;
        for i in 0..dim {
            mean[k][i] = sum[k][i] / n;
            var[k][i] = (sumsq[k][i] / n - mean[k][i] * mean[k][i]).max(0.0);
        }
    }
    let floored_dims = floor_variances(&mut var);
    Ok(MessageStats { mean, var, floored_dims })
}

/// KL[N(ξm + (1−ξ)μ, (1−ξ)²σ²) ∥ N(μ, σ²)] summed over dimensions, on the
/// tape. Expanded per dimension this is
/// −log(1−ξ) + (1−ξ)²/2 + ξ²(m−μ)²/(2σ²) − 1/2,
/// so only the squared-distance term touches the message. `mu` and
/// `inv_two_var` are constants shaped like `m`; `xi` is a `[1]` tensor.
fn kl_tape<S: Real>(
    tape: &mut Tape<S>,
    xi: TensorId,
    m: TensorId,
    mu: TensorId,
    inv_two_var: TensorId,
    dim: usize,
) -> Result<TensorId> {
    let d = dim as f64;
    let diff = tape.sub(m, mu)?;
    let sq = tape.mul(diff, diff)?;
    let scaled = tape.mul(sq, inv_two_var)?;
    let dist = tape.sum(scaled);
    let xi_sq = tape.mul(xi, xi)?;
    let info = tape.mul(xi_sq, dist)?;
    let one_minus = tape.affine(xi, S::of(-1.0), S::one());
    let log_term = tape.log(one_minus);
    let log_term = tape.affine(log_term, S::of(-d), S::zero());
    let shrink = tape.mul(one_minus, one_minus)?;
    let shrink = tape.affine(shrink, S::of(d / 2.0), S::of(-d / 2.0));
    let partial = tape.add(log_term, shrink)?;
    tape.add(partial, info)
}

/// ξ for one readout logit: σ(γ) clamped away from 1.
fn xi_tape<S: Real>(
    cls: &GateClassifier<S>,
    tape: &mut Tape<S>,
    bind: &mut Binding,
    layer: usize,
    q: TensorId,
) -> Result<TensorId> {
    let gamma = cls.gate_logit_tape(tape, bind, layer, q)?;
    let s = tape.sigmoid(gamma);
    tape.clamp(s, S::zero(), S::of(XI_MAX))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IbConfig {
    pub seed: u64,
    pub lr: f64,
    /// Weight of the KL term.
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Readout hidden width; defaults to the model's state dimension.
    pub hidden_dim: Option<usize>,
}

impl Default for IbConfig {
    fn default() -> Self {
        IbConfig { seed: 0, lr: 1e-4, beta: 0.1, epochs: 3, batch_size: 32, hidden_dim: None }
    }
}

impl IbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Trained bottleneck: the readout plus the message statistics it was
/// conditioned on.
#[derive(Debug, Clone)]
pub struct IbExplainer<S: Real> {
    pub readout: GateClassifier<S>,
    pub stats: MessageStats,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IbEpochStats {
    pub epoch: usize,
    pub mean_divergence: f64,
    pub mean_kl: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IbTrainReport {
    pub epochs: Vec<IbEpochStats>,
    pub floored_dims: usize,
}

impl<S: Real> IbExplainer<S> {
    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::json!({
            "arch": self.readout.arch,
            "stats": self.stats,
        });
        Checkpoint::new(IB_CHECKPOINT_KIND, meta, &self.readout.params).save(path)
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<Self> {
        let ckpt = Checkpoint::load_kind(path, IB_CHECKPOINT_KIND)?;
        let arch: GateArch = serde_json::from_value(ckpt.meta["arch"].clone())
            .map_err(|e| Error::Data(format!("bad bottleneck metadata: {e}")))?;
        let stats: MessageStats = serde_json::from_value(ckpt.meta["stats"].clone())
            .map_err(|e| Error::Data(format!("bad bottleneck metadata: {e}")))?;
        let readout = GateClassifier::from_params(
            arch,
            HardConcrete::default(),
            vec![true; arch.num_layers],
            ckpt.to_params()?,
        )?;
        Ok(IbExplainer { readout, stats })
    }

    /// Noise-free ξ scores for one example.
    pub fn scores(&self, model: &RgcnModel<S>, ex: &StarGraphExample) -> Result<SoftAttribution> {
        let (_, traces) = model.run_example_values(ex, None)?;
        let mut scores = Vec::with_capacity(traces.len());
        for (k, trace) in traces.iter().enumerate() {
            let mut layer = Vec::with_capacity(ex.graph.edges.len());
            for (e, edge) in ex.graph.edges.iter().enumerate() {
                let q = gate_input(trace, edge, &trace.messages[e]);
                let gamma = self.readout.gate_logit(k, &q)?;
                layer.push(kernels::sigmoid(gamma).as_f64().min(XI_MAX));
            }
            scores.push(layer);
        }
        Ok(SoftAttribution { method: METHOD.into(), scores })
    }

    /// Hard attribution at threshold `t`: dropped messages are replaced by
    /// their layer mean (the noise distribution's center), keeping the
    /// evaluation deterministic.
    pub fn attribution(
        &self,
        model: &RgcnModel<S>,
        ex: &StarGraphExample,
        t: f64,
    ) -> Result<AttributionResult> {
        let soft = self.scores(model, ex)?;
        let keep = soft.binarize(t);
        let fill: Vec<Vec<S>> = self
            .stats
            .mean
            .iter()
            .map(|layer| layer.iter().map(|&v| S::of(v)).collect())
            .collect();
        masked_attribution(model, ex, &soft.scores, &keep, Some(&fill))
    }
}

/// Train the bottleneck readout on the frozen model.
pub fn train_ib<S: Real>(
    model: &RgcnModel<S>,
    train: &[StarGraphExample],
    cfg: &IbConfig,
) -> Result<(IbExplainer<S>, IbTrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArg("bottleneck training needs a non-empty train set".into()));
    }
    let stats = compute_message_stats(model, train)?;
    let num_layers = model.config.num_layers;
    let dim = model.config.state_dim;

    let mu_s: Vec<Vec<S>> = stats.mean.iter().map(|l| l.iter().map(|&v| S::of(v)).collect()).collect();
    let sigma: Vec<Vec<f64>> = stats.var.iter().map(|l| l.iter().map(|&v| v.sqrt()).collect()).collect();
    let inv_two_var: Vec<Vec<S>> =
        stats.var.iter().map(|l| l.iter().map(|&v| S::of(1.0 / (2.0 * v))).collect()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let arch = GateArch::for_model(model, cfg.hidden_dim);
    let cls = GateClassifier::init_with(arch, HardConcrete::default(), &mut rng)?;
    let mut explainer = IbExplainer { readout: cls, stats };
    let mut adam = Adam::new(S::of(cfg.lr), &explainer.readout.params);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        let mut div_sum = 0.0;
        let mut kl_sum_all = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let mut bind_cls = Binding::trainable(&explainer.readout.params);
            let mut bind_model = Binding::frozen(&model.params);
            let mut losses = Vec::with_capacity(chunk.len());
            let mut diag = Vec::with_capacity(chunk.len());

            for &i in chunk {
                let ex = &train[i];
                let num_edges = ex.graph.edges.len();
                let (orig_logits, traces) = model.run_example_values(ex, None)?;

                let mut mu_ids = Vec::with_capacity(num_layers);
                let mut itv_ids = Vec::with_capacity(num_layers);
                for k in 0..num_layers {
                    mu_ids.push(tape.constant(mu_s[k].clone(), &[dim])?);
                    itv_ids.push(tape.constant(inv_two_var[k].clone(), &[dim])?);
                }

                // ξ from the unmasked traces, noise drawn in (layer, edge,
                // dim) order so runs are reproducible.
                let mut xis = vec![Vec::with_capacity(num_edges); num_layers];
                let mut eps_ids = vec![Vec::with_capacity(num_edges); num_layers];
                for k in 0..num_layers {
                    for (e, edge) in ex.graph.edges.iter().enumerate() {
                        let q = gate_input(&traces[k], edge, &traces[k].messages[e]);
                        let qid = tape.constant(q, &[arch.input_dim()])?;
                        xis[k].push(xi_tape(&explainer.readout, &mut tape, &mut bind_cls, k, qid)?);
                        let eps: Vec<S> = (0..dim)
                            .map(|i| {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                S::of(explainer.stats.mean[k][i] + sigma[k][i] * z)
                            })
                            .collect();
                        eps_ids[k].push(tape.constant(eps, &[dim])?);
                    }
                }

                let mut kl_ids = Vec::with_capacity(num_layers * num_edges);
                let mut icept = |t: &mut Tape<S>, k: usize, e: usize, m: TensorId| {
                    let kl = kl_tape(t, xis[k][e], m, mu_ids[k], itv_ids[k], dim)?;
                    kl_ids.push(kl);
                    mix_message(t, xis[k][e], m, eps_ids[k][e])
                };
                let (masked_logits, _) =
                    model.run_example_tape(&mut tape, &mut bind_model, ex, Some(&mut icept))?;
                let div = divergence_tape(&mut tape, &orig_logits, masked_logits)?;
                let all_kl = tape.concat(&kl_ids)?;
                let kl_total = tape.sum(all_kl);
                let weighted = tape.affine(kl_total, S::of(cfg.beta), S::zero());
                losses.push(tape.add(div, weighted)?);
                diag.push((div, kl_total));
            }

            let all = tape.concat(&losses)?;
            let loss = tape.mean(all)?;
            tape.backward(loss)?;
            explainer.readout.params.zero_grads();
            bind_cls.harvest(&tape, &mut explainer.readout.params);
            adam.step(&mut explainer.readout.params)?;

            for (div, kl) in diag {
                div_sum += tape.value(div)[0].as_f64();
                kl_sum_all += tape.value(kl)[0].as_f64();
            }
            seen += chunk.len();
        }
        epochs.push(IbEpochStats {
            epoch,
            mean_divergence: div_sum / seen as f64,
            mean_kl: kl_sum_all / seen as f64,
        });
    }

    let floored = explainer.stats.floored_dims;
    Ok((explainer, IbTrainReport { epochs, floored_dims: floored }))
}
