//! Named trainable parameters, initialization, tape binding, and
//! JSON checkpointing.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{Tape, TensorId};

/// Handle to one parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Param<S: Real> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<S>,
    pub grad: Vec<S>,
}

/// Ordered collection of named parameters. Iteration order is insertion
/// order, so anything that walks the set (optimizers, checkpoints) is
/// deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<S: Real> {
    params: Vec<Param<S>>,
    index: HashMap<String, usize>,
}

impl<S: Real> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Register a parameter with explicit initial data.
    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<S>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArg(format!("duplicate parameter '{name}'")));
        }
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::InvalidArg(format!(
                "parameter '{name}': {} values for shape {shape:?}",
                data.len()
            )));
        }
        let id = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            grad: vec![S::zero(); n],
            data,
        });
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    /// Register a parameter filled with a constant.
    pub fn add_full(&mut self, name: &str, shape: &[usize], value: S) -> Result<ParamId> {
        let n = shape.iter().product();
        self.add(name, shape, vec![value; n])
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add_full(name, shape, S::zero())
    }

    /// Register a `[rows, cols]` matrix with Glorot-uniform initialization:
    /// entries drawn from U(-a, a), a = sqrt(6 / (rows + cols)).
    pub fn add_glorot<R: Rng>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data: Vec<S> = (0..rows * cols)
            .map(|_| S::of(rng.gen_range(-limit..limit)))
            .collect();
        self.add(name, &[rows, cols], data)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::InvalidArg(format!("unknown parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.params[id.0].shape
    }

    pub fn data(&self, id: ParamId) -> &[S] {
        &self.params[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [S] {
        &mut self.params[id.0].data
    }

    pub fn grad(&self, id: ParamId) -> &[S] {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [S] {
        &mut self.params[id.0].grad
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = S::zero());
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    /// Total number of scalar values across all parameters.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }
}

/// Per-tape cache mapping parameters onto tape tensors.
///
/// A trainable binding inserts each parameter as a gradient-taking leaf the
/// first time it is requested and reuses that tensor afterwards, so a
/// parameter used by many ops on one tape accumulates one combined gradient.
/// A frozen binding inserts constants instead: values flow, gradients don't.
#[derive(Debug)]
pub struct Binding {
    slots: Vec<Option<TensorId>>,
    trainable: bool,
}

impl Binding {
    pub fn trainable<S: Real>(params: &ParamSet<S>) -> Self {
        Binding {
            slots: vec![None; params.len()],
            trainable: true,
        }
    }

    pub fn frozen<S: Real>(params: &ParamSet<S>) -> Self {
        Binding {
            slots: vec![None; params.len()],
            trainable: false,
        }
    }

    /// Tape tensor for this parameter, inserting it on first use.
    pub fn get<S: Real>(
        &mut self,
        tape: &mut Tape<S>,
        params: &ParamSet<S>,
        id: ParamId,
    ) -> Result<TensorId> {
        let slot = id.0;
        if let Some(t) = self.slots[slot] {
            return Ok(t);
        }
        let data = params.data(id).to_vec();
        let shape = params.shape(id).to_vec();
        let t = if self.trainable {
            tape.leaf(data, &shape)?
        } else {
            tape.constant(data, &shape)?
        };
        self.slots[slot] = Some(t);
        Ok(t)
    }

    /// Add the tape's gradients for every bound parameter into the
    /// parameter set's gradient buffers. No-op for frozen bindings.
    pub fn harvest<S: Real>(&self, tape: &Tape<S>, params: &mut ParamSet<S>) {
        if !self.trainable {
            return;
        }
        for (slot, p) in self.slots.iter().zip(params.iter_mut()) {
            if let Some(t) = slot {
                if let Some(g) = tape.grad(*t) {
                    for (pg, &tg) in p.grad.iter_mut().zip(g) {
                        *pg += tg;
                    }
                }
            }
        }
    }
}

/// On-disk parameter bundle: a format tag, what the bundle is for, free-form
/// architecture metadata, and the parameters keyed by name.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub kind: String,
    pub meta: serde_json::Value,
    pub params: BTreeMap<String, CheckpointParam>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointParam {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub const CHECKPOINT_FORMAT: &str = "edge-mask-checkpoint-v1";

impl Checkpoint {
    pub fn new<S: Real>(kind: &str, meta: serde_json::Value, params: &ParamSet<S>) -> Self {
        let mut map = BTreeMap::new();
        for p in params.iter() {
            map.insert(
                p.name.clone(),
                CheckpointParam {
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| v.as_f64()).collect(),
                },
            );
        }
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            kind: kind.to_string(),
            meta,
            params: map,
        }
    }

    /// Rebuild a parameter set (alphabetical parameter order).
    pub fn to_params<S: Real>(&self) -> Result<ParamSet<S>> {
        let mut set = ParamSet::new();
        for (name, entry) in &self.params {
            let data: Vec<S> = entry.data.iter().map(|&v| S::of(v)).collect();
            set.add(name, &entry.shape, data)?;
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("malformed checkpoint {}: {e}", path.display())))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Data(format!(
                "unsupported checkpoint format '{}' in {}",
                ckpt.format,
                path.display()
            )));
        }
        Ok(ckpt)
    }

    /// Load and require a specific kind, with a clear error otherwise.
    pub fn load_kind(path: &Path, kind: &str) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if ckpt.kind != kind {
            return Err(Error::Data(format!(
                "checkpoint {} holds a '{}', expected a '{kind}'",
                path.display(),
                ckpt.kind
            )));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn add_and_lookup() {
        let mut p: ParamSet<f64> = ParamSet::new();
        let w = p.add("w", &[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(p.data(w), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(p.id("w").unwrap(), w);
        assert!(p.id("nope").is_err());
        assert!(p.add("w", &[1], vec![0.0]).is_err());
        assert!(p.add("bad", &[3], vec![0.0]).is_err());
    }

    #[test]
    fn glorot_is_seeded_and_bounded() {
        let mut rng1 = ChaCha8Rng::seed_from_u64(7);
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let mut a: ParamSet<f64> = ParamSet::new();
        let mut b: ParamSet<f64> = ParamSet::new();
        let wa = a.add_glorot("w", 10, 20, &mut rng1).unwrap();
        let wb = b.add_glorot("w", 10, 20, &mut rng2).unwrap();
        assert_eq!(a.data(wa), b.data(wb));
        let limit = (6.0f64 / 30.0).sqrt();
        assert!(a.data(wa).iter().all(|v| v.abs() < limit));
    }

    #[test]
    fn trainable_binding_accumulates_one_grad_per_param() {
        let mut p: ParamSet<f64> = ParamSet::new();
        let w = p.add("w", &[2], vec![3.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let mut bind = Binding::trainable(&p);
        let t1 = bind.get(&mut tape, &p, w).unwrap();
        let t2 = bind.get(&mut tape, &p, w).unwrap();
        assert_eq!(t1, t2, "binding must reuse the same tape tensor");

        // loss = sum(w * w) => dL/dw = 2w
        let sq = tape.mul(t1, t2).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        bind.harvest(&tape, &mut p);
        assert_eq!(p.grad(w), &[6.0, 8.0]);
    }

    #[test]
    fn frozen_binding_takes_no_grad() {
        let mut p: ParamSet<f64> = ParamSet::new();
        let w = p.add("w", &[2], vec![3.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let mut bind = Binding::frozen(&p);
        let t = bind.get(&mut tape, &p, w).unwrap();
        let x = tape.leaf(vec![1.0, 1.0], &[2]).unwrap();
        let prod = tape.mul(t, x).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        bind.harvest(&tape, &mut p);
        assert_eq!(p.grad(w), &[0.0, 0.0]);
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn checkpoint_round_trips() {
        let dir = std::env::temp_dir().join("gm-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.json");

        let mut p: ParamSet<f64> = ParamSet::new();
        p.add("b.bias", &[2], vec![0.5, -0.25]).unwrap();
        p.add("a.weight", &[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ckpt = Checkpoint::new("model", serde_json::json!({"layers": 1}), &p);
        ckpt.save(&path).unwrap();

        let loaded = Checkpoint::load_kind(&path, "model").unwrap();
        assert_eq!(loaded.meta["layers"], 1);
        let q: ParamSet<f64> = loaded.to_params().unwrap();
        assert_eq!(q.data(q.id("a.weight").unwrap()), p.data(p.id("a.weight").unwrap()));
        assert_eq!(q.data(q.id("b.bias").unwrap()), p.data(p.id("b.bias").unwrap()));

        assert!(Checkpoint::load_kind(&path, "gate-classifier").is_err());
        std::fs::remove_file(&path).ok();
    }
}
