//! Amortized differentiable edge masking.
//!
//! A small classifier is trained — once per model — to predict, for every
//! message in every layer, whether that message can be dropped without
//! changing the model's output distribution. Dropped messages are replaced
//! by a learned per-layer baseline vector, gates are relaxed binary
//! variables with a Hard Concrete distribution, and the amount of change
//! allowed in the output is held below a tolerance by a Lagrangian
//! multiplier while the expected number of open gates is minimized.
//!
//! Gate inputs always come from a trace of the *unmasked* run, so every
//! gate decision is a function of what the model originally computed, never
//! of the sparsified re-execution it produces.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{AttributionResult, EdgeAttribution};
use crate::error::{Error, Result};
use crate::gates::{GateMode, HardConcrete};
use crate::gnn::{argmax, shuffle, RgcnModel, ValueTrace};
use crate::graphs::{Edge, StarGraphExample};
use crate::optim::{Adam, RmsProp};
use crate::params::{Binding, Checkpoint, ParamId, ParamSet};
use crate::scalar::Real;
use crate::tensor::{kernels, Tape, TensorId};

pub const CLASSIFIER_CHECKPOINT_KIND: &str = "gate-classifier";

const LN_EPS: f64 = 1e-5;
/// Uniform draws for gate sampling stay strictly inside (0, 1).
const U_MARGIN: f64 = 1e-9;

/// Shape of the gate classifier. One instance per model layer; each takes
/// the concatenation `[h_src; h_dst; message]` (3 × `state_dim`) and emits
/// a single gate location γ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateArch {
    pub num_layers: usize,
    pub state_dim: usize,
    pub hidden_dim: usize,
}

impl GateArch {
    /// Hidden width defaults to the message dimension.
    pub fn for_model<S: Real>(model: &RgcnModel<S>, hidden_dim: Option<usize>) -> Self {
        GateArch {
            num_layers: model.config.num_layers,
            state_dim: model.config.state_dim,
            hidden_dim: hidden_dim.unwrap_or(model.config.state_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        3 * self.state_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.state_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(format!("degenerate gate arch {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerIds {
    w1: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
    w2: ParamId,
    baseline: ParamId,
}

/// The amortized gate predictor: per layer, a bias-free two-layer MLP with
/// layer normalization after the first projection
/// (γ = W₂ · relu(LN(W₁ · [h_src; h_dst; m]))) plus a learned baseline
/// vector that stands in for dropped messages.
#[derive(Debug, Clone)]
pub struct GateClassifier<S: Real> {
    pub arch: GateArch,
    pub hc: HardConcrete,
    /// Which layers are currently gated; ungated layers pass messages
    /// through untouched. Training enables layers one stage at a time,
    /// starting from the layer nearest the output.
    pub enabled: Vec<bool>,
    pub params: ParamSet<S>,
    ids: Vec<LayerIds>,
}

fn layer_param_names(k: usize) -> (String, String, String, String, String) {
    (
        format!("gate.l{k}.w1"),
        format!("gate.l{k}.ln_gain"),
        format!("gate.l{k}.ln_bias"),
        format!("gate.l{k}.w2"),
        format!("gate.l{k}.baseline"),
    )
}

impl<S: Real> GateClassifier<S> {
    pub fn init(arch: GateArch, hc: HardConcrete, seed: u64) -> Result<Self> {
        Self::init_with(arch, hc, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn init_with<R: Rng>(arch: GateArch, hc: HardConcrete, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        hc.validate()?;
        let mut params = ParamSet::new();
        let mut ids = Vec::with_capacity(arch.num_layers);
        for k in 0..arch.num_layers {
            let (w1, gain, bias, w2, baseline) = layer_param_names(k);
            ids.push(LayerIds {
                w1: params.add_glorot(&w1, arch.hidden_dim, arch.input_dim(), rng)?,
                ln_gain: params.add_full(&gain, &[arch.hidden_dim], S::one())?,
                ln_bias: params.add_zeros(&bias, &[arch.hidden_dim])?,
                w2: params.add_glorot(&w2, 1, arch.hidden_dim, rng)?,
                baseline: params.add_zeros(&baseline, &[arch.state_dim])?,
            });
        }
        Ok(GateClassifier {
            arch,
            hc,
            enabled: vec![true; arch.num_layers],
            params,
            ids,
        })
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.arch.num_layers {
            return Err(Error::InvalidArg(format!(
                "gate layer {layer} out of range (classifier has {})",
                self.arch.num_layers
            )));
        }
        Ok(())
    }

    /// The learned baseline vector substituted for layer `layer`'s dropped
    /// messages.
    pub fn baseline_param(&self, layer: usize) -> ParamId {
        self.ids[layer].baseline
    }

    /// Gate location for one `[3·state_dim]` input, on the tape.
    pub fn gate_logit_tape(
        &self,
        tape: &mut Tape<S>,
        bind: &mut Binding,
        layer: usize,
        q: TensorId,
    ) -> Result<TensorId> {
        self.check_layer(layer)?;
        let ids = &self.ids[layer];
        let w1 = bind.get(tape, &self.params, ids.w1)?;
        let a = tape.matmul(w1, q)?;
        let gain = bind.get(tape, &self.params, ids.ln_gain)?;
        let lbias = bind.get(tape, &self.params, ids.ln_bias)?;
        let n = tape.layer_norm(a, gain, lbias, S::of(LN_EPS))?;
        let r = tape.relu(n);
        let w2 = bind.get(tape, &self.params, ids.w2)?;
        tape.matmul(w2, r)
    }

    /// Value-route twin of [`GateClassifier::gate_logit_tape`]; the two
    /// agree bitwise.
    pub fn gate_logit(&self, layer: usize, q: &[S]) -> Result<S> {
        self.check_layer(layer)?;
        if q.len() != self.arch.input_dim() {
            return Err(Error::InvalidArg(format!(
                "gate input has {} values, want {}",
                q.len(),
                self.arch.input_dim()
            )));
        }
        let ids = &self.ids[layer];
        let h = self.arch.hidden_dim;
        let a = kernels::matvec(self.params.data(ids.w1), q, h, self.arch.input_dim());
        let n = kernels::layer_norm(
            &a,
            self.params.data(ids.ln_gain),
            self.params.data(ids.ln_bias),
            S::of(LN_EPS),
        );
        let r: Vec<S> = n.into_iter().map(kernels::relu).collect();
        Ok(kernels::matvec(self.params.data(ids.w2), &r, 1, h)[0])
    }

    /// Gate locations for every (layer, edge) of one traced run. Traces
    /// must come from an *unmasked* forward; this is what keeps gates a
    /// function of the original computation.
    pub fn gate_logits(&self, traces: &[ValueTrace<S>], edges: &[Edge]) -> Result<Vec<Vec<S>>> {
        if traces.len() != self.arch.num_layers {
            return Err(Error::InvalidArg(format!(
                "{} traces for a {}-layer classifier",
                traces.len(),
                self.arch.num_layers
            )));
        }
        traces
            .iter()
            .enumerate()
            .map(|(k, trace)| {
                if trace.messages.len() != edges.len() {
                    return Err(Error::InvalidArg(format!(
                        "layer {k} trace has {} messages for {} edges",
                        trace.messages.len(),
                        edges.len()
                    )));
                }
                edges
                    .iter()
                    .zip(&trace.messages)
                    .map(|(edge, m)| self.gate_logit(k, &gate_input(trace, edge, m)))
                    .collect()
            })
            .collect()
    }

    /// Per-example expected number of open gates: Σ P(z ≠ 0) over enabled
    /// layers and edges, the quantity the training objective minimizes.
    pub fn expected_l0(&self, model: &RgcnModel<S>, ex: &StarGraphExample) -> Result<f64> {
        let (_, traces) = model.run_example_values(ex, None)?;
        let gammas = self.gate_logits(&traces, &ex.graph.edges)?;
        Ok(gammas
            .iter()
            .enumerate()
            .filter(|(k, _)| self.enabled[*k])
            .flat_map(|(_, layer)| layer.iter())
            .map(|&g| self.hc.prob_nonzero(g.as_f64()))
            .sum())
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::json!({
            "arch": self.arch,
            "hard_concrete": self.hc,
            "enabled": self.enabled,
        });
        Checkpoint::new(CLASSIFIER_CHECKPOINT_KIND, meta, &self.params).save(path)
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<Self> {
        let ckpt = Checkpoint::load_kind(path, CLASSIFIER_CHECKPOINT_KIND)?;
        let arch: GateArch = serde_json::from_value(ckpt.meta["arch"].clone())
            .map_err(|e| Error::Data(format!("bad gate arch in checkpoint: {e}")))?;
        let hc: HardConcrete = serde_json::from_value(ckpt.meta["hard_concrete"].clone())
            .map_err(|e| Error::Data(format!("bad gate distribution in checkpoint: {e}")))?;
        let enabled: Vec<bool> = serde_json::from_value(ckpt.meta["enabled"].clone())
            .map_err(|e| Error::Data(format!("bad enabled set in checkpoint: {e}")))?;
        let params: ParamSet<S> = ckpt.to_params()?;
        Self::from_params(arch, hc, enabled, params)
    }

    pub fn from_params(
        arch: GateArch,
        hc: HardConcrete,
        enabled: Vec<bool>,
        params: ParamSet<S>,
    ) -> Result<Self> {
        arch.validate()?;
        hc.validate()?;
        if enabled.len() != arch.num_layers {
            return Err(Error::Data(format!(
                "{} enabled flags for {} layers",
                enabled.len(),
                arch.num_layers
            )));
        }
        let mut ids = Vec::with_capacity(arch.num_layers);
        for k in 0..arch.num_layers {
            let (w1, gain, bias, w2, baseline) = layer_param_names(k);
            let resolve = |name: &str, shape: &[usize]| -> Result<ParamId> {
                let id = params.id(name)?;
                if params.shape(id) != shape {
                    return Err(Error::Data(format!(
                        "parameter '{name}' has shape {:?}, want {shape:?}",
                        params.shape(id)
                    )));
                }
                Ok(id)
            };
            ids.push(LayerIds {
                w1: resolve(&w1, &[arch.hidden_dim, arch.input_dim()])?,
                ln_gain: resolve(&gain, &[arch.hidden_dim])?,
                ln_bias: resolve(&bias, &[arch.hidden_dim])?,
                w2: resolve(&w2, &[1, arch.hidden_dim])?,
                baseline: resolve(&baseline, &[arch.state_dim])?,
            });
        }
        Ok(GateClassifier {
            arch,
            hc,
            enabled,
            params,
            ids,
        })
    }
}

/// `[h_src; h_dst; m]` for one edge of one traced layer.
pub(crate) fn gate_input<S: Real>(trace: &ValueTrace<S>, edge: &Edge, message: &[S]) -> Vec<S> {
    let mut q = Vec::with_capacity(2 * trace.h_prev[edge.src].len() + message.len());
    q.extend_from_slice(&trace.h_prev[edge.src]);
    q.extend_from_slice(&trace.h_prev[edge.dst]);
    q.extend_from_slice(message);
    q
}

/// Gated convex combination `z·m + (1−z)·b` on the tape. `z` is a `[1]`
/// tensor; `m` and `b` share a shape.
pub(crate) fn mix_message<S: Real>(
    tape: &mut Tape<S>,
    z: TensorId,
    m: TensorId,
    b: TensorId,
) -> Result<TensorId> {
    let zm = tape.scalar_mul(z, m)?;
    let omz = tape.affine(z, S::of(-1.0), S::one());
    let zb = tape.scalar_mul(omz, b)?;
    tape.add(zm, zb)
}

/// Value twin of [`mix_message`], applied in place.
fn mix_message_values<S: Real>(z: S, m: &mut [S], b: &[S]) {
    let omz = S::of(-1.0) * z + S::one();
    for (mv, &bv) in m.iter_mut().zip(b) {
        *mv = z * *mv + omz * bv;
    }
}

/// KL(softmax(original) ‖ softmax(masked)): the output-divergence the
/// training constraint bounds and every report cites.
pub fn divergence<S: Real>(original: &[S], masked: &[S]) -> Result<S> {
    if original.is_empty() || original.len() != masked.len() {
        return Err(Error::InvalidArg(format!(
            "divergence of logit vectors with lengths {} and {}",
            original.len(),
            masked.len()
        )));
    }
    let p = kernels::softmax(original);
    let lp = kernels::log_softmax(original);
    let lq = kernels::log_softmax(masked);
    Ok(p
        .iter()
        .zip(lp.iter().zip(&lq))
        .map(|(&pi, (&lpi, &lqi))| pi * (lpi - lqi))
        .sum())
}

/// Tape version of [`divergence`] with the original logits held constant;
/// gradients flow into `masked` only. Bitwise equal to the value route.
pub fn divergence_tape<S: Real>(
    tape: &mut Tape<S>,
    original: &[S],
    masked: TensorId,
) -> Result<TensorId> {
    let n = original.len();
    let p = tape.constant(kernels::softmax(original), &[n])?;
    let lp = tape.constant(kernels::log_softmax(original), &[n])?;
    let lq = tape.log_softmax(masked)?;
    let diff = tape.sub(lp, lq)?;
    let w = tape.mul(p, diff)?;
    Ok(tape.sum(w))
}

/// One masked re-execution of the model under deterministic gates.
#[derive(Debug, Clone)]
pub struct MaskedRun {
    pub original_logits: Vec<f64>,
    pub masked_logits: Vec<f64>,
    pub original_prediction: usize,
    pub masked_prediction: usize,
    pub divergence: f64,
    /// `probs[k][e]` = P(z ≠ 0); 1 for layers without gates.
    pub probs: Vec<Vec<f64>>,
    /// Gate value actually applied during re-execution.
    pub gates: Vec<Vec<f64>>,
    pub hard: Vec<Vec<bool>>,
    /// Gates with `hard == true`, pass-through layers included.
    pub retained_edges: usize,
}

impl MaskedRun {
    pub fn num_gates(&self) -> usize {
        self.hard.iter().map(Vec::len).sum()
    }

    pub fn into_attribution(self) -> AttributionResult {
        let layers = self
            .probs
            .iter()
            .zip(&self.hard)
            .map(|(ps, hs)| {
                ps.iter()
                    .zip(hs)
                    .enumerate()
                    .map(|(e, (&prob, &hard))| EdgeAttribution { edge: e, prob, hard })
                    .collect()
            })
            .collect();
        AttributionResult {
            original_prediction: self.original_prediction,
            masked_prediction: self.masked_prediction,
            divergence: self.divergence,
            layers,
        }
    }
}

/// Run the model once unmasked, gate every message from that trace, and
/// re-execute with the gates applied. `mode` picks the noise-free gate
/// value; hard retained/dropped decisions are reported either way.
pub fn masked_run<S: Real>(
    model: &RgcnModel<S>,
    cls: &GateClassifier<S>,
    ex: &StarGraphExample,
    mode: GateMode,
) -> Result<MaskedRun> {
    let (orig_logits, traces) = model.run_example_values(ex, None)?;
    let gammas = cls.gate_logits(&traces, &ex.graph.edges)?;

    let num_edges = ex.graph.edges.len();
    let mut probs = Vec::with_capacity(gammas.len());
    let mut gates = Vec::with_capacity(gammas.len());
    let mut hard = Vec::with_capacity(gammas.len());
    for (k, layer) in gammas.iter().enumerate() {
        if !cls.enabled[k] {
            probs.push(vec![1.0; num_edges]);
            gates.push(vec![1.0; num_edges]);
            hard.push(vec![true; num_edges]);
            continue;
        }
        let mut p = Vec::with_capacity(num_edges);
        let mut g = Vec::with_capacity(num_edges);
        let mut h = Vec::with_capacity(num_edges);
        for &gamma in layer {
            let gamma = gamma.as_f64();
            p.push(cls.hc.prob_nonzero(gamma));
            g.push(cls.hc.deterministic_gate(gamma, mode));
            h.push(cls.hc.prob_nonzero(gamma) > 0.5);
        }
        probs.push(p);
        gates.push(g);
        hard.push(h);
    }

    let mut icept = |layer: usize, e: usize, m: &mut Vec<S>| {
        if cls.enabled[layer] {
            let b = cls.params.data(cls.baseline_param(layer));
            mix_message_values(S::of(gates[layer][e]), m, b);
        }
    };
    let (masked_logits, _) = model.run_example_values(ex, Some(&mut icept))?;
    let div = divergence(&orig_logits, &masked_logits)?.as_f64();

    let retained = hard.iter().flatten().filter(|&&h| h).count();
    Ok(MaskedRun {
        original_prediction: argmax(&orig_logits),
        masked_prediction: argmax(&masked_logits),
        original_logits: orig_logits.iter().map(|v| v.as_f64()).collect(),
        masked_logits: masked_logits.iter().map(|v| v.as_f64()).collect(),
        divergence: div,
        probs,
        gates,
        hard,
        retained_edges: retained,
    })
}

/// Hard-gate attribution for one example.
pub fn explain<S: Real>(
    model: &RgcnModel<S>,
    cls: &GateClassifier<S>,
    ex: &StarGraphExample,
) -> Result<AttributionResult> {
    Ok(masked_run(model, cls, ex, GateMode::Hard)?.into_attribution())
}

/// Multiplier for the divergence constraint, ascended by RMSProp and
/// projected back onto λ ≥ 0 after every step.
pub struct Lagrangian {
    params: ParamSet<f64>,
    opt: RmsProp<f64>,
    id: ParamId,
}

impl Lagrangian {
    pub fn new(init: f64, lr: f64) -> Result<Self> {
        if init < 0.0 {
            return Err(Error::Config(format!("multiplier must start >= 0, got {init}")));
        }
        let mut params = ParamSet::new();
        let id = params.add("lambda", &[1], vec![init])?;
        let opt = RmsProp::new(lr, &params);
        Ok(Lagrangian { params, opt, id })
    }

    pub fn value(&self) -> f64 {
        self.params.data(self.id)[0]
    }

    /// One ascent step on λ·gap, where `gap` = divergence − tolerance. The
    /// optimizer descends, so it is fed the negated gradient.
    pub fn update(&mut self, gap: f64) -> Result<()> {
        self.params.grad_mut(self.id)[0] = -gap;
        self.opt.step(&mut self.params)?;
        let v = &mut self.params.data_mut(self.id)[0];
        if *v < 0.0 {
            *v = 0.0;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphMaskConfig {
    pub seed: u64,
    /// Divergence tolerance β.
    pub beta: f64,
    /// Learning rate for gate classifier parameters and baselines.
    pub lr: f64,
    /// Learning rate for the multiplier.
    pub lambda_lr: f64,
    pub lambda_init: f64,
    /// Coefficient on the expected-L0 term. The sparsity penalty must not
    /// outrace the multiplier early in training: gates start open, the
    /// divergence gradient is near zero there, and a full-strength penalty
    /// drives every gate into the clamped (zero-gradient) region before λ
    /// grows enough to push back — at which point no gradient can reopen
    /// them. Scaling the penalty down leaves sparsity pressure in place
    /// (sign-based optimizer steps still close genuinely unused gates)
    /// while the constraint keeps load-bearing gates open.
    pub penalty_scaling: f64,
    /// Small batches give the multiplier more updates per epoch, so the
    /// constraint tracks the sparsity pressure closely instead of
    /// overshooting in either direction.
    pub batch_size: usize,
    /// Epochs spent per enablement stage before the next layer's gates
    /// switch on.
    pub delta_epochs: usize,
    /// Epoch budget after every layer is enabled.
    pub max_epochs_after_full: usize,
    /// Gate MLP hidden width; defaults to the message dimension.
    pub hidden_dim: Option<usize>,
    pub hard_concrete: HardConcrete,
}

impl Default for GraphMaskConfig {
    fn default() -> Self {
        GraphMaskConfig {
            seed: 0,
            beta: 0.03,
            lr: 1e-4,
            lambda_lr: 1e-2,
            lambda_init: 0.0,
            penalty_scaling: 0.2,
            batch_size: 8,
            delta_epochs: 1,
            max_epochs_after_full: 50,
            hidden_dim: None,
            hard_concrete: HardConcrete::default(),
        }
    }
}

impl GraphMaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("tolerance must be positive, got {}", self.beta)));
        }
        if !(self.lr > 0.0) || !(self.lambda_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.lambda_init < 0.0 {
            return Err(Error::Config(format!(
                "multiplier must start >= 0, got {}",
                self.lambda_init
            )));
        }
        if !(self.penalty_scaling > 0.0) {
            return Err(Error::Config(format!(
                "penalty scaling must be positive, got {}",
                self.penalty_scaling
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.delta_epochs == 0 {
            return Err(Error::Config("each enablement stage needs at least one epoch".into()));
        }
        self.hard_concrete.validate()
    }
}

/// Validation statistics for one training epoch, under hard gates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub enabled_layers: usize,
    pub mean_divergence: f64,
    /// Mean fraction of gates kept open (pass-through layers count as
    /// open).
    pub retained_fraction: f64,
    /// Fraction of validation examples the masked run labels correctly.
    pub masked_accuracy: f64,
    pub lambda: f64,
    pub mean_train_divergence: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphMaskTrainReport {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose parameters were kept: sparsest among those meeting the
    /// divergence tolerance on validation, latest on ties.
    pub chosen_epoch: usize,
}

struct ValStats {
    mean_divergence: f64,
    retained_fraction: f64,
    masked_accuracy: f64,
}

fn validate_classifier<S: Real>(
    model: &RgcnModel<S>,
    cls: &GateClassifier<S>,
    val: &[StarGraphExample],
) -> Result<ValStats> {
    let mut div_sum = 0.0;
    let mut frac_sum = 0.0;
    let mut correct = 0usize;
    for ex in val {
        let run = masked_run(model, cls, ex, GateMode::Hard)?;
        div_sum += run.divergence;
        frac_sum += run.retained_edges as f64 / run.num_gates() as f64;
        if run.masked_prediction == usize::from(ex.label) {
            correct += 1;
        }
    }
    let n = val.len() as f64;
    Ok(ValStats {
        mean_divergence: div_sum / n,
        retained_fraction: frac_sum / n,
        masked_accuracy: correct as f64 / n,
    })
}

/// Train the amortized gate classifier against a frozen model.
///
/// Layers are brought under gating one stage at a time starting nearest
/// the output; after the last stage the loop runs for at most
/// `max_epochs_after_full` further epochs. Every epoch ends with a
/// hard-gate validation pass, and the returned classifier carries the
/// parameters of the sparsest epoch whose validation divergence met the
/// tolerance — if no epoch did, training fails with the best divergence
/// seen.
pub fn train_graphmask<S: Real>(
    model: &RgcnModel<S>,
    train: &[StarGraphExample],
    val: &[StarGraphExample],
    cfg: &GraphMaskConfig,
) -> Result<(GateClassifier<S>, GraphMaskTrainReport)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArg("training needs non-empty train and validation sets".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let arch = GateArch::for_model(model, cfg.hidden_dim);
    let mut cls = GateClassifier::init_with(arch, cfg.hard_concrete, &mut rng)?;
    let num_layers = arch.num_layers;
    cls.enabled = vec![false; num_layers];

    let mut adam = Adam::new(S::of(cfg.lr), &cls.params);
    let mut lambda = Lagrangian::new(cfg.lambda_init, cfg.lambda_lr)?;

    let total_epochs = num_layers * cfg.delta_epochs + cfg.max_epochs_after_full;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(total_epochs);

    let mut best: Option<(usize, f64, ParamSet<S>, Vec<bool>)> = None;
    let mut best_div_seen = f64::INFINITY;

    for epoch in 0..total_epochs {
        // Stage schedule: one more layer gains gates every `delta_epochs`,
        // from the last layer backwards.
        let stages_done = (epoch / cfg.delta_epochs + 1).min(num_layers);
        for k in 0..num_layers {
            cls.enabled[k] = k >= num_layers - stages_done;
        }

        shuffle(&mut order, &mut rng);
        let mut train_div_sum = 0.0;
        let mut train_div_count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let mut bind_cls = Binding::trainable(&cls.params);
            let mut bind_model = Binding::frozen(&model.params);
            let mut losses = Vec::with_capacity(chunk.len());
            let mut div_ids = Vec::with_capacity(chunk.len());

            for &i in chunk {
                let ex = &train[i];
                let (orig_logits, traces) = model.run_example_values(ex, None)?;

                // Sampled gates, from the unmasked trace.
                let num_edges = ex.graph.edges.len();
                let mut zs: Vec<Vec<Option<TensorId>>> = vec![vec![None; num_edges]; num_layers];
                let mut bases: Vec<Option<TensorId>> = vec![None; num_layers];
                let mut prob_ids = Vec::new();
                for k in 0..num_layers {
                    if !cls.enabled[k] {
                        continue;
                    }
                    bases[k] = Some(bind_cls.get(&mut tape, &cls.params, cls.baseline_param(k))?);
                    for (e, edge) in ex.graph.edges.iter().enumerate() {
                        let q = gate_input(&traces[k], edge, &traces[k].messages[e]);
                        let qid = tape.constant(q, &[arch.input_dim()])?;
                        let gamma = cls.gate_logit_tape(&mut tape, &mut bind_cls, k, qid)?;
                        let u = rng.gen_range(U_MARGIN..1.0 - U_MARGIN);
                        zs[k][e] = Some(cls.hc.sample_tape(&mut tape, gamma, u)?);
                        prob_ids.push(cls.hc.prob_nonzero_tape(&mut tape, gamma));
                    }
                }
                let all_probs = tape.concat(&prob_ids)?;
                let penalty = tape.sum(all_probs);
                let penalty = tape.affine(penalty, S::of(cfg.penalty_scaling), S::zero());

                let mut icept = |t: &mut Tape<S>, layer: usize, e: usize, m: TensorId| {
                    match zs[layer][e] {
                        None => Ok(m),
                        Some(z) => mix_message(t, z, m, bases[layer].expect("enabled layer has baseline")),
                    }
                };
                let (masked_logits, _) =
                    model.run_example_tape(&mut tape, &mut bind_model, ex, Some(&mut icept))?;
                let div = divergence_tape(&mut tape, &orig_logits, masked_logits)?;
                let weighted = tape.affine(div, S::of(lambda.value()), S::zero());
                losses.push(tape.add(penalty, weighted)?);
                div_ids.push(div);
            }

            let loss = tape.concat(&losses)?;
            let loss = tape.mean(loss)?;
            tape.backward(loss)?;
            cls.params.zero_grads();
            bind_cls.harvest(&tape, &mut cls.params);
            adam.step(&mut cls.params)?;

            let batch_div: f64 = div_ids
                .iter()
                .map(|&d| tape.value(d)[0].as_f64())
                .sum::<f64>()
                / div_ids.len() as f64;
            lambda.update(batch_div - cfg.beta)?;
            train_div_sum += batch_div * div_ids.len() as f64;
            train_div_count += div_ids.len();
        }

        let stats = validate_classifier(model, &cls, val)?;
        best_div_seen = best_div_seen.min(stats.mean_divergence);
        if stats.mean_divergence <= cfg.beta {
            let better = match &best {
                None => true,
                Some((_, frac, _, _)) => stats.retained_fraction <= *frac,
            };
            if better {
                best = Some((
                    epoch,
                    stats.retained_fraction,
                    cls.params.clone(),
                    cls.enabled.clone(),
                ));
            }
        }
        epochs.push(EpochStats {
            epoch,
            enabled_layers: stages_done,
            mean_divergence: stats.mean_divergence,
            retained_fraction: stats.retained_fraction,
            masked_accuracy: stats.masked_accuracy,
            lambda: lambda.value(),
            mean_train_divergence: train_div_sum / train_div_count.max(1) as f64,
        });
        if std::env::var("GRAPHMASK_TRACE").is_ok() {
            eprintln!(
                "epoch {epoch:3} stages {stages_done} val_div {:.4} retained {:.4} acc {:.4} lambda {:.4} train_div {:.4}",
                stats.mean_divergence,
                stats.retained_fraction,
                stats.masked_accuracy,
                lambda.value(),
                train_div_sum / train_div_count.max(1) as f64,
            );
        }
    }

    match best {
        Some((epoch, _, params, enabled)) => {
            let cls = GateClassifier::from_params(arch, cfg.hard_concrete, enabled, params)?;
            Ok((cls, GraphMaskTrainReport { epochs, chosen_epoch: epoch }))
        }
        None => Err(Error::ConstraintUnmet {
            best: best_div_seen,
            allowed: cfg.beta,
        }),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NonAmortizedConfig {
    pub seed: u64,
    pub beta: f64,
    /// Gate locations are optimized directly, so they move only as far as
    /// the learning rate allows; the default is large enough to swing a
    /// location across its useful range within the step budget.
    pub lr: f64,
    pub lambda_lr: f64,
    pub lambda_init: f64,
    /// Same role as [`GraphMaskConfig::penalty_scaling`]; the ablation
    /// keeps the amortized objective, restricted to one example.
    pub penalty_scaling: f64,
    pub steps: usize,
    pub hard_concrete: HardConcrete,
}

impl Default for NonAmortizedConfig {
    fn default() -> Self {
        NonAmortizedConfig {
            seed: 0,
            beta: 0.03,
            lr: 1e-2,
            lambda_lr: 1e-2,
            lambda_init: 0.0,
            penalty_scaling: 1e-3,
            steps: 300,
            hard_concrete: HardConcrete::default(),
        }
    }
}

impl NonAmortizedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("tolerance must be positive, got {}", self.beta)));
        }
        if !(self.lr > 0.0) || !(self.lambda_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.lambda_init < 0.0 {
            return Err(Error::Config(format!(
                "multiplier must start >= 0, got {}",
                self.lambda_init
            )));
        }
        if !(self.penalty_scaling > 0.0) {
            return Err(Error::Config(format!(
                "penalty scaling must be positive, got {}",
                self.penalty_scaling
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("need at least one optimization step".into()));
        }
        self.hard_concrete.validate()
    }
}

/// Per-example ablation of amortization: free gate locations (one per
/// layer and edge) and per-layer baselines are optimized for this example
/// alone, under the same objective as the amortized trainer. Returns the
/// sparsest hard-gate solution that met the tolerance, latest on ties.
pub fn explain_nonamortized<S: Real>(
    model: &RgcnModel<S>,
    ex: &StarGraphExample,
    cfg: &NonAmortizedConfig,
) -> Result<AttributionResult> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let num_layers = model.config.num_layers;
    let num_edges = ex.graph.edges.len();
    let d = model.config.state_dim;
    let hc = cfg.hard_concrete;

    let mut params: ParamSet<S> = ParamSet::new();
    let mut gamma_ids = Vec::with_capacity(num_layers);
    let mut base_ids = Vec::with_capacity(num_layers);
    for k in 0..num_layers {
        gamma_ids.push(params.add_zeros(&format!("gamma.l{k}"), &[num_edges])?);
        base_ids.push(params.add_zeros(&format!("baseline.l{k}"), &[d])?);
    }

    let mut adam = Adam::new(S::of(cfg.lr), &params);
    let mut lambda = Lagrangian::new(cfg.lambda_init, cfg.lambda_lr)?;
    let (orig_logits, _) = model.run_example_values(ex, None)?;

    let mut best: Option<(usize, Vec<Vec<f64>>)> = None;
    let mut best_div_seen = f64::INFINITY;

    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let mut bind = Binding::trainable(&params);
        let mut bind_model = Binding::frozen(&model.params);

        let mut zs: Vec<Vec<Option<TensorId>>> = vec![vec![None; num_edges]; num_layers];
        let mut bases: Vec<Option<TensorId>> = vec![None; num_layers];
        let mut prob_ids = Vec::new();
        for k in 0..num_layers {
            let gammas = bind.get(&mut tape, &params, gamma_ids[k])?;
            bases[k] = Some(bind.get(&mut tape, &params, base_ids[k])?);
            for e in 0..num_edges {
                let gamma = tape.pick(gammas, e)?;
                let u = rng.gen_range(U_MARGIN..1.0 - U_MARGIN);
                zs[k][e] = Some(hc.sample_tape(&mut tape, gamma, u)?);
                prob_ids.push(hc.prob_nonzero_tape(&mut tape, gamma));
            }
        }
        let all_probs = tape.concat(&prob_ids)?;
        let penalty = tape.sum(all_probs);
        let penalty = tape.affine(penalty, S::of(cfg.penalty_scaling), S::zero());

        let mut icept = |t: &mut Tape<S>, layer: usize, e: usize, m: TensorId| {
            match zs[layer][e] {
                None => Ok(m),
                Some(z) => mix_message(t, z, m, bases[layer].expect("baseline bound")),
            }
        };
        let (masked_logits, _) =
            model.run_example_tape(&mut tape, &mut bind_model, ex, Some(&mut icept))?;
        let div = divergence_tape(&mut tape, &orig_logits, masked_logits)?;
        let weighted = tape.affine(div, S::of(lambda.value()), S::zero());
        let loss = tape.add(penalty, weighted)?;
        tape.backward(loss)?;
        params.zero_grads();
        bind.harvest(&tape, &mut params);
        adam.step(&mut params)?;
        lambda.update(tape.value(div)[0].as_f64() - cfg.beta)?;

        // Hard-gate check of the current locations.
        let gamma_now: Vec<Vec<f64>> = gamma_ids
            .iter()
            .map(|&id| params.data(id).iter().map(|g| g.as_f64()).collect())
            .collect();
        let (div_hard, retained) = hard_eval(model, ex, &gamma_now, &base_ids, &params, hc)?;
        best_div_seen = best_div_seen.min(div_hard);
        if div_hard <= cfg.beta {
            let better = match &best {
                None => true,
                Some((r, _)) => retained <= *r,
            };
            if better {
                best = Some((retained, gamma_now));
            }
        }
    }

    let (_, gammas) = best.ok_or(Error::ConstraintUnmet {
        best: best_div_seen,
        allowed: cfg.beta,
    })?;

    // Rebuild the winning run for reporting.
    let probs: Vec<Vec<f64>> = gammas
        .iter()
        .map(|layer| layer.iter().map(|&g| hc.prob_nonzero(g)).collect())
        .collect();
    let hard: Vec<Vec<bool>> = probs
        .iter()
        .map(|layer| layer.iter().map(|&p| p > 0.5).collect())
        .collect();
    let gates: Vec<Vec<f64>> = gammas
        .iter()
        .map(|layer| layer.iter().map(|&g| hc.deterministic_gate(g, GateMode::Hard)).collect())
        .collect();
    let mut icept = |layer: usize, e: usize, m: &mut Vec<S>| {
        let b = params.data(base_ids[layer]);
        mix_message_values(S::of(gates[layer][e]), m, b);
    };
    let (masked_logits, _) = model.run_example_values(ex, Some(&mut icept))?;
    let div = divergence(&orig_logits, &masked_logits)?.as_f64();
    let layers = probs
        .iter()
        .zip(&hard)
        .map(|(ps, hs)| {
            ps.iter()
                .zip(hs)
                .enumerate()
                .map(|(e, (&prob, &hard))| EdgeAttribution { edge: e, prob, hard })
                .collect()
        })
        .collect();
    Ok(AttributionResult {
        original_prediction: argmax(&orig_logits),
        masked_prediction: argmax(&masked_logits),
        divergence: div,
        layers,
    })
}

fn hard_eval<S: Real>(
    model: &RgcnModel<S>,
    ex: &StarGraphExample,
    gammas: &[Vec<f64>],
    base_ids: &[ParamId],
    params: &ParamSet<S>,
    hc: HardConcrete,
) -> Result<(f64, usize)> {
    let gates: Vec<Vec<f64>> = gammas
        .iter()
        .map(|layer| layer.iter().map(|&g| hc.deterministic_gate(g, GateMode::Hard)).collect())
        .collect();
    let retained = gates.iter().flatten().filter(|&&g| g > 0.5).count();
    let (orig_logits, _) = model.run_example_values(ex, None)?;
    let mut icept = |layer: usize, e: usize, m: &mut Vec<S>| {
        let b = params.data(base_ids[layer]);
        mix_message_values(S::of(gates[layer][e]), m, b);
    };
    let (masked_logits, _) = model.run_example_values(ex, Some(&mut icept))?;
    Ok((divergence(&orig_logits, &masked_logits)?.as_f64(), retained))
}
