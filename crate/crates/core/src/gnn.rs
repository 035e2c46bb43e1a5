//! Relational GNN with interceptable message passing, plus the star-graph
//! toy model and its trainer.
//!
//! Message passing is implemented twice over the same numeric kernels: once
//! on the autodiff tape (for training and any gradient-based attribution)
//! and once on plain vectors (for cheap evaluation). A unit test pins the
//! two routes to bit-identical outputs.
//!
//! The *interceptor* hook is the single extension point every attribution
//! method in this crate builds on: it sees each freshly computed message
//! `(layer, edge, m)` right before aggregation and may replace it — with a
//! gated convex combination, a zero vector, a noised version, and so on.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphs::{Graph, StarGraphExample};
use crate::optim::Adam;
use crate::params::{Binding, Checkpoint, ParamId, ParamSet};
use crate::scalar::Real;
use crate::tensor::{kernels, Tape, TensorId};

pub const MODEL_CHECKPOINT_KIND: &str = "model";

/// Architecture of the relational GNN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RgcnConfig {
    /// Number of edge relation types (= colors on the star benchmark).
    pub num_relations: usize,
    /// Dimension of vertex states and messages.
    pub state_dim: usize,
    /// Hidden width of the input and readout MLPs.
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_classes: usize,
    /// Share relation weights across layers (otherwise one set per layer).
    pub shared_weights: bool,
}

impl Default for RgcnConfig {
    fn default() -> Self {
        RgcnConfig {
            num_relations: 6,
            state_dim: 50,
            hidden_dim: 100,
            num_layers: 1,
            num_classes: 2,
            shared_weights: true,
        }
    }
}

impl RgcnConfig {
    pub fn query_dim(&self) -> usize {
        2 * self.num_relations
    }

    fn validate(&self) -> Result<()> {
        if self.num_relations == 0
            || self.state_dim == 0
            || self.hidden_dim == 0
            || self.num_layers == 0
            || self.num_classes < 2
        {
            return Err(Error::Config(format!("degenerate model config {self:?}")));
        }
        Ok(())
    }
}

/// Resolved parameter handles so the hot loops never do name lookups.
#[derive(Debug, Clone)]
struct ModelIds {
    input: [ParamId; 4],
    /// `[layer][relation] -> (weight, bias)`; single row when shared.
    msg: Vec<Vec<(ParamId, ParamId)>>,
    readout: [ParamId; 4],
}

/// Relational GNN: input MLP (query -> initial state), per-relation message
/// weights, sum aggregation, readout MLP over one vertex's final state.
#[derive(Debug, Clone)]
pub struct RgcnModel<S: Real> {
    pub config: RgcnConfig,
    pub params: ParamSet<S>,
    ids: ModelIds,
}

/// Per-layer snapshot of a tape forward: the incoming vertex states and the
/// messages that were actually aggregated (post-interception), as tape
/// tensors.
pub struct TapeTrace {
    pub h_prev: Vec<TensorId>,
    pub messages: Vec<TensorId>,
}

/// Same snapshot for the value-only route.
#[derive(Debug, Clone)]
pub struct ValueTrace<S> {
    pub h_prev: Vec<Vec<S>>,
    pub messages: Vec<Vec<S>>,
}

/// Message hook for tape forwards: `(tape, layer, edge, message) -> message`.
pub type TapeInterceptor<'a, S> =
    &'a mut dyn FnMut(&mut Tape<S>, usize, usize, TensorId) -> Result<TensorId>;

/// Message hook for value forwards: mutates the message in place.
pub type ValueInterceptor<'a, S> = &'a mut dyn FnMut(usize, usize, &mut Vec<S>);

fn msg_param_names(layer: usize, relation: usize, shared: bool) -> (String, String) {
    if shared {
        (format!("msg.r{relation}.w"), format!("msg.r{relation}.b"))
    } else {
        (
            format!("msg.l{layer}.r{relation}.w"),
            format!("msg.l{layer}.r{relation}.b"),
        )
    }
}

impl<S: Real> RgcnModel<S> {
    /// Fresh model with Glorot-uniform weights and zero biases.
    pub fn init(config: RgcnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        p.add_glorot("input.w1", config.hidden_dim, config.query_dim(), &mut rng)?;
        p.add_zeros("input.b1", &[config.hidden_dim])?;
        p.add_glorot("input.w2", config.state_dim, config.hidden_dim, &mut rng)?;
        p.add_zeros("input.b2", &[config.state_dim])?;
        let weight_layers = if config.shared_weights { 1 } else { config.num_layers };
        for k in 0..weight_layers {
            for r in 0..config.num_relations {
                let (wn, bn) = msg_param_names(k, r, config.shared_weights);
                p.add_glorot(&wn, config.state_dim, config.state_dim, &mut rng)?;
                p.add_zeros(&bn, &[config.state_dim])?;
            }
        }
        p.add_glorot("readout.w1", config.hidden_dim, config.state_dim, &mut rng)?;
        p.add_zeros("readout.b1", &[config.hidden_dim])?;
        p.add_glorot("readout.w2", config.num_classes, config.hidden_dim, &mut rng)?;
        p.add_zeros("readout.b2", &[config.num_classes])?;
        Self::from_params(config, p)
    }

    /// Wrap an existing parameter set, validating names and shapes.
    pub fn from_params(config: RgcnConfig, params: ParamSet<S>) -> Result<Self> {
        config.validate()?;
        let expect = |id: ParamId, shape: &[usize]| -> Result<ParamId> {
            if params.shape(id) != shape {
                return Err(Error::Data(format!(
                    "parameter '{}' has shape {:?}, expected {shape:?}",
                    params.name(id),
                    params.shape(id)
                )));
            }
            Ok(id)
        };
        let (d, h, q, c) = (
            config.state_dim,
            config.hidden_dim,
            config.query_dim(),
            config.num_classes,
        );
        let input = [
            expect(params.id("input.w1")?, &[h, q])?,
            expect(params.id("input.b1")?, &[h])?,
            expect(params.id("input.w2")?, &[d, h])?,
            expect(params.id("input.b2")?, &[d])?,
        ];
        let weight_layers = if config.shared_weights { 1 } else { config.num_layers };
        let mut msg = Vec::with_capacity(weight_layers);
        for k in 0..weight_layers {
            let mut row = Vec::with_capacity(config.num_relations);
            for r in 0..config.num_relations {
                let (wn, bn) = msg_param_names(k, r, config.shared_weights);
                row.push((
                    expect(params.id(&wn)?, &[d, d])?,
                    expect(params.id(&bn)?, &[d])?,
                ));
            }
            msg.push(row);
        }
        let readout = [
            expect(params.id("readout.w1")?, &[h, d])?,
            expect(params.id("readout.b1")?, &[h])?,
            expect(params.id("readout.w2")?, &[c, h])?,
            expect(params.id("readout.b2")?, &[c])?,
        ];
        Ok(RgcnModel {
            config,
            params,
            ids: ModelIds { input, msg, readout },
        })
    }

    fn msg_ids(&self, layer: usize, relation: usize) -> Result<(ParamId, ParamId)> {
        let row = if self.config.shared_weights { 0 } else { layer };
        self.ids
            .msg
            .get(row)
            .and_then(|r| r.get(relation))
            .copied()
            .ok_or_else(|| {
                Error::Data(format!(
                    "edge relation {relation} out of range for {} relations",
                    self.config.num_relations
                ))
            })
    }

    /// One-hot encoding of the ordered query pair.
    pub fn encode_query(&self, query: (usize, usize)) -> Result<Vec<S>> {
        let c = self.config.num_relations;
        if query.0 >= c || query.1 >= c {
            return Err(Error::Data(format!(
                "query {query:?} out of range for {c} relations"
            )));
        }
        let mut v = vec![S::zero(); 2 * c];
        v[query.0] = S::one();
        v[c + query.1] = S::one();
        Ok(v)
    }

    fn mlp2_tape(
        &self,
        tape: &mut Tape<S>,
        bind: &mut Binding,
        ids: &[ParamId; 4],
        x: TensorId,
    ) -> Result<TensorId> {
        let w1 = bind.get(tape, &self.params, ids[0])?;
        let b1 = bind.get(tape, &self.params, ids[1])?;
        let w2 = bind.get(tape, &self.params, ids[2])?;
        let b2 = bind.get(tape, &self.params, ids[3])?;
        let a = tape.matmul(w1, x)?;
        let a = tape.add(a, b1)?;
        let a = tape.relu(a);
        let y = tape.matmul(w2, a)?;
        tape.add(y, b2)
    }

    fn mlp2_values(&self, ids: &[ParamId; 4], x: &[S]) -> Vec<S> {
        let w1 = self.params.data(ids[0]);
        let b1 = self.params.data(ids[1]);
        let w2 = self.params.data(ids[2]);
        let b2 = self.params.data(ids[3]);
        let (h, i) = (self.params.shape(ids[0])[0], self.params.shape(ids[0])[1]);
        let o = self.params.shape(ids[2])[0];
        let mut a = kernels::matvec(w1, x, h, i);
        for (v, &b) in a.iter_mut().zip(b1) {
            *v = kernels::relu(*v + b);
        }
        let mut y = kernels::matvec(w2, &a, o, h);
        for (v, &b) in y.iter_mut().zip(b2) {
            *v += b;
        }
        y
    }

    /// Full forward on the tape. `h0` seeds every vertex (the toy task's
    /// initial state is query-only, so one tensor serves all vertices);
    /// `readout_vertex` selects whose final state feeds the readout MLP.
    /// Returns class logits and one trace per layer.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<S>,
        bind: &mut Binding,
        graph: &Graph,
        h0: TensorId,
        readout_vertex: usize,
        mut interceptor: Option<TapeInterceptor<'_, S>>,
    ) -> Result<(TensorId, Vec<TapeTrace>)> {
        graph.validate()?;
        if readout_vertex >= graph.num_vertices {
            return Err(Error::Data(format!(
                "readout vertex {readout_vertex} out of range"
            )));
        }
        let d = self.config.state_dim;
        let mut states: Vec<TensorId> = vec![h0; graph.num_vertices];
        let mut traces = Vec::with_capacity(self.config.num_layers);

        for layer in 0..self.config.num_layers {
            let h_prev = states.clone();
            let mut messages = Vec::with_capacity(graph.num_edges());
            for (e, edge) in graph.edges.iter().enumerate() {
                let (wid, bid) = self.msg_ids(layer, edge.relation)?;
                let w = bind.get(tape, &self.params, wid)?;
                let b = bind.get(tape, &self.params, bid)?;
                let a = tape.matmul(w, states[edge.src])?;
                let a = tape.add(a, b)?;
                let mut m = tape.relu(a);
                if let Some(f) = interceptor.as_mut() {
                    m = f(tape, layer, e, m)?;
                }
                messages.push(m);
            }
            let pooled = if messages.is_empty() {
                tape.constant(vec![S::zero(); graph.num_vertices * d], &[graph.num_vertices, d])?
            } else {
                let stacked = tape.stack_rows(&messages)?;
                let dsts: Vec<usize> = graph.edges.iter().map(|e| e.dst).collect();
                tape.sum_pool(stacked, &dsts, graph.num_vertices)?
            };
            states = (0..graph.num_vertices)
                .map(|v| tape.row(pooled, v))
                .collect::<Result<Vec<_>>>()?;
            traces.push(TapeTrace { h_prev, messages });
        }

        let logits = self.mlp2_tape(tape, bind, &self.ids.readout, states[readout_vertex])?;
        Ok((logits, traces))
    }

    /// Value-only forward, numerically identical to the tape route.
    pub fn forward_values(
        &self,
        graph: &Graph,
        h0: &[S],
        readout_vertex: usize,
        mut interceptor: Option<ValueInterceptor<'_, S>>,
    ) -> Result<(Vec<S>, Vec<ValueTrace<S>>)> {
        graph.validate()?;
        if readout_vertex >= graph.num_vertices {
            return Err(Error::Data(format!(
                "readout vertex {readout_vertex} out of range"
            )));
        }
        let d = self.config.state_dim;
        let mut states: Vec<Vec<S>> = vec![h0.to_vec(); graph.num_vertices];
        let mut traces = Vec::with_capacity(self.config.num_layers);

        for layer in 0..self.config.num_layers {
            let h_prev = states.clone();
            let mut messages: Vec<Vec<S>> = Vec::with_capacity(graph.num_edges());
            for (e, edge) in graph.edges.iter().enumerate() {
                let (wid, bid) = self.msg_ids(layer, edge.relation)?;
                let w = self.params.data(wid);
                let b = self.params.data(bid);
                let mut m = kernels::matvec(w, &states[edge.src], d, d);
                for (v, &bv) in m.iter_mut().zip(b) {
                    *v = kernels::relu(*v + bv);
                }
                if let Some(f) = interceptor.as_mut() {
                    f(layer, e, &mut m);
                }
                messages.push(m);
            }
            let mut pooled = vec![vec![S::zero(); d]; graph.num_vertices];
            for (m, edge) in messages.iter().zip(&graph.edges) {
                let dst = &mut pooled[edge.dst];
                for (p, &v) in dst.iter_mut().zip(m) {
                    *p += v;
                }
            }
            states = pooled;
            traces.push(ValueTrace { h_prev, messages });
        }

        let logits = self.mlp2_values(&self.ids.readout, &states[readout_vertex]);
        Ok((logits, traces))
    }

    /// Tape forward for one benchmark example (query encoding + star graph,
    /// readout at the centroid).
    pub fn run_example_tape(
        &self,
        tape: &mut Tape<S>,
        bind: &mut Binding,
        ex: &StarGraphExample,
        interceptor: Option<TapeInterceptor<'_, S>>,
    ) -> Result<(TensorId, Vec<TapeTrace>)> {
        let q = self.encode_query(ex.query)?;
        let qt = tape.constant(q, &[self.config.query_dim()])?;
        let h0 = self.mlp2_tape(tape, bind, &self.ids.input, qt)?;
        self.forward_tape(tape, bind, &ex.graph, h0, 0, interceptor)
    }

    /// Value forward for one benchmark example.
    pub fn run_example_values(
        &self,
        ex: &StarGraphExample,
        interceptor: Option<ValueInterceptor<'_, S>>,
    ) -> Result<(Vec<S>, Vec<ValueTrace<S>>)> {
        let q = self.encode_query(ex.query)?;
        let h0 = self.mlp2_values(&self.ids.input, &q);
        self.forward_values(&ex.graph, &h0, 0, interceptor)
    }

    /// Predicted class for one example (no interception).
    pub fn predict(&self, ex: &StarGraphExample) -> Result<usize> {
        let (logits, _) = self.run_example_values(ex, None)?;
        Ok(argmax(&logits))
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::to_value(&self.config)?;
        Checkpoint::new(MODEL_CHECKPOINT_KIND, meta, &self.params).save(path)
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<Self> {
        let ckpt = Checkpoint::load_kind(path, MODEL_CHECKPOINT_KIND)?;
        let config: RgcnConfig = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| Error::Data(format!("bad model metadata: {e}")))?;
        Self::from_params(config, ckpt.to_params()?)
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<S: Real>(xs: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Fraction of examples whose predicted class matches the label.
pub fn accuracy<S: Real>(model: &RgcnModel<S>, examples: &[StarGraphExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidArg("accuracy of an empty set".into()));
    }
    let mut correct = 0usize;
    for ex in examples {
        if model.predict(ex)? == usize::from(ex.label) {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Training settings for the toy model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyTrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Minimum validation accuracy the returned model must reach.
    pub target_accuracy: f64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        ToyTrainConfig {
            seed: 0,
            lr: 1e-4,
            batch_size: 32,
            max_epochs: 200,
            target_accuracy: 0.995,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyTrainReport {
    pub epochs_run: usize,
    pub best_val_accuracy: f64,
    pub val_accuracy_history: Vec<f64>,
}

/// Train the toy model with Adam on cross-entropy until validation accuracy
/// hits 100% (early stop) or the epoch cap. Returns the best-validation
/// snapshot; errors if that snapshot misses `target_accuracy`.
pub fn train_toy_model<S: Real>(
    model_config: RgcnConfig,
    train: &[StarGraphExample],
    validation: &[StarGraphExample],
    cfg: &ToyTrainConfig,
) -> Result<(RgcnModel<S>, ToyTrainReport)> {
    if train.is_empty() || validation.is_empty() {
        return Err(Error::InvalidArg(
            "training needs non-empty train and validation sets".into(),
        ));
    }
    if cfg.batch_size == 0 || cfg.max_epochs == 0 {
        return Err(Error::Config("batch size and epoch cap must be positive".into()));
    }
    let mut model = RgcnModel::<S>::init(model_config, cfg.seed)?;
    let mut opt = Adam::new(S::of(cfg.lr), &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut best: Option<(f64, ParamSet<S>)> = None;
    let mut history = Vec::new();
    let mut epochs_run = 0;

    for _epoch in 0..cfg.max_epochs {
        epochs_run += 1;
        shuffle(&mut order, &mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let mut bind = Binding::trainable(&model.params);
            let mut losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let ex = &train[i];
                let (logits, _) = model.run_example_tape(&mut tape, &mut bind, ex, None)?;
                let lsm = tape.log_softmax(logits)?;
                let picked = tape.pick(lsm, usize::from(ex.label))?;
                losses.push(tape.affine(picked, S::of(-1.0), S::zero()));
            }
            let all = tape.concat(&losses)?;
            let loss = tape.mean(all)?;
            tape.backward(loss)?;
            bind.harvest(&tape, &mut model.params);
            opt.step(&mut model.params)?;
            model.params.zero_grads();
        }

        let val_acc = accuracy(&model, validation)?;
        history.push(val_acc);
        if best.as_ref().map_or(true, |(a, _)| val_acc > *a) {
            best = Some((val_acc, model.params.clone()));
        }
        if val_acc == 1.0 {
            break;
        }
    }

    let (best_acc, best_params) = best.expect("at least one epoch ran");
    if best_acc < cfg.target_accuracy {
        return Err(Error::Training(format!(
            "validation accuracy plateaued at {best_acc:.4} (< {:.4}) after {epochs_run} epochs; \
             try another seed or a higher epoch cap",
            cfg.target_accuracy
        )));
    }
    let config = model.config.clone();
    let model = RgcnModel::from_params(config, best_params)?;
    Ok((
        model,
        ToyTrainReport {
            epochs_run,
            best_val_accuracy: best_acc,
            val_accuracy_history: history,
        },
    ))
}

/// Fisher-Yates shuffle driven by the given RNG (kept local so the training
/// stream stays identical across rand crate upgrades).
pub(crate) fn shuffle<T, R: rand::Rng>(xs: &mut [T], rng: &mut R) {
    for i in (1..xs.len()).rev() {
        let j = rng.gen_range(0..=i);
        xs.swap(i, j);
    }
}
