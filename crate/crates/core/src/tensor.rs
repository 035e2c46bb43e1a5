//! Reverse-mode automatic differentiation on a define-by-run tape.
//!
//! A [`Tape`] owns every tensor created during one forward pass. Operations
//! append nodes and return lightweight [`TensorId`] handles; [`Tape::backward`]
//! walks the recorded nodes in reverse and accumulates gradients into every
//! tensor that (transitively) requires them. Tapes are cheap to build and are
//! meant to be discarded and rebuilt each forward pass.
//!
//! Tensors are dense, row-major, and at most rank 2. Scalars are shape `[1]`.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Handle to a tensor on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug)]
enum Op<S: Real> {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    /// `[m,k] x [k,n] -> [m,n]`, or `[m,k] x [k] -> [m]`.
    MatMul(TensorId, TensorId),
    /// Concatenation of 1-D tensors.
    Concat(Vec<TensorId>),
    /// Stack n equal-length 1-D tensors into `[n,d]`.
    StackRows(Vec<TensorId>),
    /// Extract row `i` of a 2-D tensor as 1-D.
    Row(TensorId, usize),
    /// Extract element `i` of a 1-D tensor as a scalar.
    Pick(TensorId, usize),
    Relu(TensorId),
    Sigmoid(TensorId),
    LogSigmoid(TensorId),
    Log(TensorId),
    Exp(TensorId),
    /// Elementwise `a*x + b` with constant `a`, `b`.
    Affine(TensorId, S, S),
    /// Elementwise clamp; gradient passes only strictly inside `(lo, hi)`.
    Clamp(TensorId, S, S),
    Softmax(TensorId),
    LogSoftmax(TensorId),
    /// Sum of all elements, producing a scalar.
    Sum(TensorId),
    /// Broadcast multiply: scalar `s` times tensor `x`.
    ScalarMul(TensorId, TensorId),
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: S,
    },
    /// Rows of `x` summed into buckets given per-row group ids.
    SumPool { x: TensorId, groups: Vec<usize> },
    /// Per-dimension max over each group; `argmax` is group-major, with
    /// `usize::MAX` marking empty groups.
    MaxPool {
        x: TensorId,
        groups: Vec<usize>,
        argmax: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<S: Real> {
    value: Vec<S>,
    shape: Vec<usize>,
    grad: Option<Vec<S>>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradient tape: arena of tensors plus the recorded ops connecting them.
#[derive(Debug)]
pub struct Tape<S: Real> {
    nodes: Vec<Node<S>>,
    grad_enabled: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Tape<S> {
    /// Fresh tape with gradient recording on.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Fresh tape that records values only; `backward` on it is an error.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<S>, shape: Vec<usize>, op: Op<S>, requires: bool) -> TensorId {
        let requires = requires && self.grad_enabled;
        // Ops feeding nothing that needs gradients are dead weight on the
        // backward pass; store them as leaves.
        let op = if requires { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            shape,
            grad: None,
            op,
            requires_grad: requires,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn check_data(op: &'static str, data: &[S], shape: &[usize]) -> Result<()> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(shape_err(op, format!("rank must be 1 or 2, got shape {shape:?}")));
        }
        if data.len() != numel(shape) {
            return Err(shape_err(
                op,
                format!("data length {} does not match shape {shape:?}", data.len()),
            ));
        }
        Ok(())
    }

    /// Tensor that never takes gradients.
    pub fn constant(&mut self, data: Vec<S>, shape: &[usize]) -> Result<TensorId> {
        Self::check_data("constant", &data, shape)?;
        Ok(self.push(data, shape.to_vec(), Op::Leaf, false))
    }

    /// Scalar constant, shape `[1]`.
    pub fn scalar(&mut self, x: S) -> TensorId {
        self.push(vec![x], vec![1], Op::Leaf, false)
    }

    /// Trainable input: receives a gradient when the tape has grad enabled.
    pub fn leaf(&mut self, data: Vec<S>, shape: &[usize]) -> Result<TensorId> {
        Self::check_data("leaf", &data, shape)?;
        Ok(self.push(data, shape.to_vec(), Op::Leaf, true))
    }

    pub fn value(&self, id: TensorId) -> &[S] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Gradient accumulated by the latest `backward`, if this tensor got one.
    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op_name,
                format!("shape {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let value: Vec<S> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(value, shape, op, req))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Matrix product `[m,k] x [k,n] -> [m,n]`, or matrix-vector
    /// `[m,k] x [k] -> [m]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ashape, bshape) = (self.shape(a), self.shape(b));
        if ashape.len() != 2 {
            return Err(shape_err("matmul", format!("left operand must be 2-D, got {ashape:?}")));
        }
        let (m, k) = (ashape[0], ashape[1]);
        let (value, shape) = match bshape.len() {
            1 => {
                if bshape[0] != k {
                    return Err(shape_err(
                        "matmul",
                        format!("inner dims: [{m},{k}] x {bshape:?}"),
                    ));
                }
                let v = kernels::matvec(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k);
                (v, vec![m])
            }
            2 => {
                if bshape[0] != k {
                    return Err(shape_err(
                        "matmul",
                        format!("inner dims: [{m},{k}] x {bshape:?}"),
                    ));
                }
                let n = bshape[1];
                let v = kernels::matmat(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n);
                (v, vec![m, n])
            }
            _ => return Err(shape_err("matmul", format!("right operand rank {}", bshape.len()))),
        };
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(value, shape, Op::MatMul(a, b), req))
    }

    /// Concatenate 1-D tensors in order.
    pub fn concat(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs"));
        }
        let mut value = Vec::new();
        let mut req = false;
        for &p in parts {
            if self.shape(p).len() != 1 {
                return Err(shape_err("concat", format!("input shape {:?} not 1-D", self.shape(p))));
            }
            value.extend_from_slice(&self.nodes[p.0].value);
            req |= self.requires(p);
        }
        let len = value.len();
        Ok(self.push(value, vec![len], Op::Concat(parts.to_vec()), req))
    }

    /// Stack equal-length 1-D tensors into a `[n, d]` matrix.
    pub fn stack_rows(&mut self, rows: &[TensorId]) -> Result<TensorId> {
        if rows.is_empty() {
            return Err(shape_err("stack_rows", "no inputs"));
        }
        let d = self.shape(rows[0]).first().copied().unwrap_or(0);
        let mut value = Vec::with_capacity(rows.len() * d);
        let mut req = false;
        for &r in rows {
            if self.shape(r) != [d] {
                return Err(shape_err(
                    "stack_rows",
                    format!("expected every row to be [{d}], got {:?}", self.shape(r)),
                ));
            }
            value.extend_from_slice(&self.nodes[r.0].value);
            req |= self.requires(r);
        }
        Ok(self.push(value, vec![rows.len(), d], Op::StackRows(rows.to_vec()), req))
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&mut self, x: TensorId, i: usize) -> Result<TensorId> {
        let shape = self.shape(x);
        if shape.len() != 2 {
            return Err(shape_err("row", format!("needs 2-D input, got {shape:?}")));
        }
        let (n, d) = (shape[0], shape[1]);
        if i >= n {
            return Err(shape_err("row", format!("row {i} out of bounds for {n} rows")));
        }
        let value = self.nodes[x.0].value[i * d..(i + 1) * d].to_vec();
        let req = self.requires(x);
        Ok(self.push(value, vec![d], Op::Row(x, i), req))
    }

    /// Element `i` of a 1-D tensor, as a scalar.
    pub fn pick(&mut self, x: TensorId, i: usize) -> Result<TensorId> {
        let shape = self.shape(x);
        if shape.len() != 1 {
            return Err(shape_err("pick", format!("needs 1-D input, got {shape:?}")));
        }
        if i >= shape[0] {
            return Err(shape_err("pick", format!("index {i} out of bounds for length {}", shape[0])));
        }
        let value = vec![self.nodes[x.0].value[i]];
        let req = self.requires(x);
        Ok(self.push(value, vec![1], Op::Pick(x, i), req))
    }

    fn unary(
        &mut self,
        x: TensorId,
        f: impl Fn(S) -> S,
        op: Op<S>,
    ) -> TensorId {
        let value: Vec<S> = self.nodes[x.0].value.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let req = self.requires(x);
        self.push(value, shape, op, req)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.unary(x, kernels::relu, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    /// Numerically stable `log(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, x: TensorId) -> TensorId {
        self.unary(x, kernels::log_sigmoid, Op::LogSigmoid(x))
    }

    pub fn log(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    /// Elementwise `a*x + b`.
    pub fn affine(&mut self, x: TensorId, a: S, b: S) -> TensorId {
        self.unary(x, |v| a * v + b, Op::Affine(x, a, b))
    }

    /// Elementwise clamp to `[lo, hi]`. The gradient flows only where the
    /// input lies strictly inside the interval.
    pub fn clamp(&mut self, x: TensorId, lo: S, hi: S) -> Result<TensorId> {
        if lo > hi {
            return Err(shape_err("clamp", format!("lo {lo} > hi {hi}")));
        }
        Ok(self.unary(
            x,
            |v| {
                if v < lo {
                    lo
                } else if v > hi {
                    hi
                } else {
                    v
                }
            },
            Op::Clamp(x, lo, hi),
        ))
    }

    fn check_1d(&self, op: &'static str, x: TensorId) -> Result<usize> {
        let shape = self.shape(x);
        if shape.len() != 1 || shape[0] == 0 {
            return Err(shape_err(op, format!("needs non-empty 1-D input, got {shape:?}")));
        }
        Ok(shape[0])
    }

    /// Softmax over a 1-D tensor (max-shifted for stability).
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.check_1d("softmax", x)?;
        let value = kernels::softmax(&self.nodes[x.0].value);
        let req = self.requires(x);
        Ok(self.push(value, vec![n], Op::Softmax(x), req))
    }

    /// Log-softmax over a 1-D tensor.
    pub fn log_softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.check_1d("log_softmax", x)?;
        let value = kernels::log_softmax(&self.nodes[x.0].value);
        let req = self.requires(x);
        Ok(self.push(value, vec![n], Op::LogSoftmax(x), req))
    }

    /// Sum all elements into a scalar.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let total = self.nodes[x.0].value.iter().copied().sum();
        let req = self.requires(x);
        self.push(vec![total], vec![1], Op::Sum(x), req)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.nodes[x.0].value.len();
        if n == 0 {
            return Err(shape_err("mean", "empty input"));
        }
        let s = self.sum(x);
        Ok(self.affine(s, S::of(1.0 / n as f64), S::zero()))
    }

    /// Multiply tensor `x` by scalar tensor `s` (shape `[1]`).
    pub fn scalar_mul(&mut self, s: TensorId, x: TensorId) -> Result<TensorId> {
        if self.shape(s) != [1] {
            return Err(shape_err(
                "scalar_mul",
                format!("scalar operand must be [1], got {:?}", self.shape(s)),
            ));
        }
        let sv = self.nodes[s.0].value[0];
        let value: Vec<S> = self.nodes[x.0].value.iter().map(|&v| sv * v).collect();
        let shape = self.nodes[x.0].shape.clone();
        let req = self.requires(s) || self.requires(x);
        Ok(self.push(value, shape, Op::ScalarMul(s, x), req))
    }

    /// Layer normalization over a 1-D tensor with learnable gain and bias.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: S,
    ) -> Result<TensorId> {
        let d = self.check_1d("layer_norm", x)?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "gain {:?} and bias {:?} must both be [{d}]",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let value = kernels::layer_norm(
            &self.nodes[x.0].value,
            &self.nodes[gain.0].value,
            &self.nodes[bias.0].value,
            eps,
        );
        let req = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(value, vec![d], Op::LayerNorm { x, gain, bias, eps }, req))
    }

    fn check_groups(
        &self,
        op: &'static str,
        x: TensorId,
        groups: &[usize],
        num_groups: usize,
    ) -> Result<(usize, usize)> {
        let shape = self.shape(x);
        if shape.len() != 2 {
            return Err(shape_err(op, format!("needs 2-D input, got {shape:?}")));
        }
        let (n, d) = (shape[0], shape[1]);
        if groups.len() != n {
            return Err(shape_err(
                op,
                format!("{} group ids for {n} rows", groups.len()),
            ));
        }
        if let Some(&g) = groups.iter().find(|&&g| g >= num_groups) {
            return Err(shape_err(op, format!("group id {g} >= num_groups {num_groups}")));
        }
        Ok((n, d))
    }

    /// Sum rows of `x` into `num_groups` buckets; empty buckets are zero.
    pub fn sum_pool(&mut self, x: TensorId, groups: &[usize], num_groups: usize) -> Result<TensorId> {
        let (n, d) = self.check_groups("sum_pool", x, groups, num_groups)?;
        let mut value = vec![S::zero(); num_groups * d];
        for i in 0..n {
            let g = groups[i];
            for j in 0..d {
                value[g * d + j] += self.nodes[x.0].value[i * d + j];
            }
        }
        let req = self.requires(x);
        Ok(self.push(
            value,
            vec![num_groups, d],
            Op::SumPool {
                x,
                groups: groups.to_vec(),
            },
            req,
        ))
    }

    /// Per-dimension max over each bucket; empty buckets are zero and take
    /// no gradient.
    pub fn max_pool(&mut self, x: TensorId, groups: &[usize], num_groups: usize) -> Result<TensorId> {
        let (n, d) = self.check_groups("max_pool", x, groups, num_groups)?;
        let mut value = vec![S::zero(); num_groups * d];
        let mut argmax = vec![usize::MAX; num_groups * d];
        for i in 0..n {
            let g = groups[i];
            for j in 0..d {
                let v = self.nodes[x.0].value[i * d + j];
                let slot = g * d + j;
                if argmax[slot] == usize::MAX || v > value[slot] {
                    value[slot] = v;
                    argmax[slot] = i;
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(
            value,
            vec![num_groups, d],
            Op::MaxPool {
                x,
                groups: groups.to_vec(),
                argmax,
            },
            req,
        ))
    }

    fn add_grad(&mut self, id: TensorId, delta: &[S]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let n = self.nodes[id.0].value.len();
        let grad = self.nodes[id.0].grad.get_or_insert_with(|| vec![S::zero(); n]);
        for (g, &d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn add_grad_at(&mut self, id: TensorId, offset: usize, delta: &[S]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let n = self.nodes[id.0].value.len();
        let grad = self.nodes[id.0].grad.get_or_insert_with(|| vec![S::zero(); n]);
        for (g, &d) in grad[offset..offset + delta.len()].iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Run reverse-mode accumulation from a scalar loss. Gradients of all
    /// tensors contributing to the loss become available through
    /// [`Tape::grad`]. Existing gradients on the tape are cleared first.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::InvalidArg(
                "backward on a tape created with no_grad".into(),
            ));
        }
        if self.shape(loss) != [1] {
            return Err(shape_err(
                "backward",
                format!("loss must be a scalar [1], got {:?}", self.shape(loss)),
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            // Constant loss: every gradient is zero; nothing to do.
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            let gy = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            // Temporarily take the op so the arms can borrow `self` freely.
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            match &op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.add_grad(*a, &gy);
                    self.add_grad(*b, &gy);
                }
                Op::Sub(a, b) => {
                    self.add_grad(*a, &gy);
                    let neg: Vec<S> = gy.iter().map(|&g| -g).collect();
                    self.add_grad(*b, &neg);
                }
                Op::Mul(a, b) => {
                    let da: Vec<S> = gy
                        .iter()
                        .zip(&self.nodes[b.0].value)
                        .map(|(&g, &v)| g * v)
                        .collect();
                    let db: Vec<S> = gy
                        .iter()
                        .zip(&self.nodes[a.0].value)
                        .map(|(&g, &v)| g * v)
                        .collect();
                    self.add_grad(*a, &da);
                    self.add_grad(*b, &db);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    if self.nodes[b.0].shape.len() == 1 {
                        // y[m] = A x: dA[i,j] = gy[i]*x[j]; dx[j] = sum_i A[i,j]*gy[i]
                        if self.nodes[a.0].requires_grad {
                            let x = &self.nodes[b.0].value;
                            let mut da = vec![S::zero(); m * k];
                            for i2 in 0..m {
                                for j in 0..k {
                                    da[i2 * k + j] = gy[i2] * x[j];
                                }
                            }
                            self.add_grad(*a, &da);
                        }
                        if self.nodes[b.0].requires_grad {
                            let av = &self.nodes[a.0].value;
                            let mut dx = vec![S::zero(); k];
                            for i2 in 0..m {
                                let g = gy[i2];
                                for j in 0..k {
                                    dx[j] += av[i2 * k + j] * g;
                                }
                            }
                            self.add_grad(*b, &dx);
                        }
                    } else {
                        let n = self.nodes[b.0].shape[1];
                        // dA = gY B^T ; dB = A^T gY
                        if self.nodes[a.0].requires_grad {
                            let bv = &self.nodes[b.0].value;
                            let mut da = vec![S::zero(); m * k];
                            for i2 in 0..m {
                                for j in 0..k {
                                    let mut acc = S::zero();
                                    for t in 0..n {
                                        acc += gy[i2 * n + t] * bv[j * n + t];
                                    }
                                    da[i2 * k + j] = acc;
                                }
                            }
                            self.add_grad(*a, &da);
                        }
                        if self.nodes[b.0].requires_grad {
                            let av = &self.nodes[a.0].value;
                            let mut db = vec![S::zero(); k * n];
                            for i2 in 0..m {
                                for j in 0..k {
                                    let aij = av[i2 * k + j];
                                    for t in 0..n {
                                        db[j * n + t] += aij * gy[i2 * n + t];
                                    }
                                }
                            }
                            self.add_grad(*b, &db);
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].value.len();
                        let slice = gy[offset..offset + len].to_vec();
                        self.add_grad(p, &slice);
                        offset += len;
                    }
                }
                Op::StackRows(rows) => {
                    let d = self.nodes[i].shape[1];
                    for (r, &id) in rows.iter().enumerate() {
                        let slice = gy[r * d..(r + 1) * d].to_vec();
                        self.add_grad(id, &slice);
                    }
                }
                Op::Row(x, r) => {
                    let d = self.nodes[i].shape[0];
                    self.add_grad_at(*x, r * d, &gy);
                }
                Op::Pick(x, idx) => {
                    self.add_grad_at(*x, *idx, &gy);
                }
                Op::Relu(x) => {
                    let dx: Vec<S> = gy
                        .iter()
                        .zip(&self.nodes[x.0].value)
                        .map(|(&g, &v)| if v > S::zero() { g } else { S::zero() })
                        .collect();
                    self.add_grad(*x, &dx);
                }
                Op::Sigmoid(x) => {
                    let dx: Vec<S> = gy
                        .iter()
                        .zip(&self.nodes[i].value)
                        .map(|(&g, &y)| g * y * (S::one() - y))
                        .collect();
                    self.add_grad(*x, &dx);
                }
                Op::LogSigmoid(x) => {
                    // d/dx log(sigmoid(x)) = 1 - sigmoid(x) = 1 - exp(y)
                    let dx: Vec<S> = gy
                        .iter()
                        .zip(&self.nodes[i].value)
                        .map(|(&g, &y)| g * (S::one() - y.exp()))
                        .collect();
                    self.add_grad(*x, &dx);
                }
                Op::Log(x) => {
                    let dx: Vec<S> = gy
                        .iter()
                        .zip(&self.nodes[x.0].value)
                        .map(|(&g, &v)| g / v)
                        .collect();
                    self.add_grad(*x, &dx);
                }
                Op::Exp(x) => {
                    let dx: Vec<S> = gy
                        .iter()
                        .zip(&self.nodes[i].value)
                        .map(|(&g, &y)| g * y)
                        .collect();
                    self.add_grad(*x, &dx);
                }
                Op::Affine(x, a, _) => {
                    let dx: Vec<S> = gy.iter().map(|&g| g * *a).collect();
                    self.add_grad(*x, &dx);
                }
                Op::Clamp(x, lo, hi) => {
                    let dx: Vec<S> = gy
                        .iter()
                        .zip(&self.nodes[x.0].value)
                        .map(|(&g, &v)| if v > *lo && v < *hi { g } else { S::zero() })
                        .collect();
                    self.add_grad(*x, &dx);
                }
                Op::Softmax(x) => {
                    let y = &self.nodes[i].value;
                    let dot: S = gy.iter().zip(y).map(|(&g, &p)| g * p).sum();
                    let dx: Vec<S> = gy.iter().zip(y).map(|(&g, &p)| p * (g - dot)).collect();
                    self.add_grad(*x, &dx);
                }
                Op::LogSoftmax(x) => {
                    let gsum: S = gy.iter().copied().sum();
                    let dx: Vec<S> = gy
                        .iter()
                        .zip(&self.nodes[i].value)
                        .map(|(&g, &y)| g - y.exp() * gsum)
                        .collect();
                    self.add_grad(*x, &dx);
                }
                Op::Sum(x) => {
                    let n = self.nodes[x.0].value.len();
                    let dx = vec![gy[0]; n];
                    self.add_grad(*x, &dx);
                }
                Op::ScalarMul(s, x) => {
                    let sv = self.nodes[s.0].value[0];
                    if self.nodes[x.0].requires_grad {
                        let dx: Vec<S> = gy.iter().map(|&g| g * sv).collect();
                        self.add_grad(*x, &dx);
                    }
                    if self.nodes[s.0].requires_grad {
                        let ds: S = gy
                            .iter()
                            .zip(&self.nodes[x.0].value)
                            .map(|(&g, &v)| g * v)
                            .sum();
                        self.add_grad(*s, &[ds]);
                    }
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (dg, dx) = {
                        let xv = &self.nodes[x.0].value;
                        let gv = &self.nodes[gain.0].value;
                        let dn = S::of(xv.len() as f64);
                        let mean = xv.iter().copied().sum::<S>() / dn;
                        let var =
                            xv.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
                        let std = (var + *eps).sqrt();
                        let xhat: Vec<S> = xv.iter().map(|&v| (v - mean) / std).collect();
                        let dg: Vec<S> =
                            gy.iter().zip(&xhat).map(|(&g, &h)| g * h).collect();
                        let w: Vec<S> = gy.iter().zip(gv).map(|(&g, &gn)| g * gn).collect();
                        let w_mean = w.iter().copied().sum::<S>() / dn;
                        let wx_mean =
                            w.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<S>() / dn;
                        let dx: Vec<S> = w
                            .iter()
                            .zip(&xhat)
                            .map(|(&wi, &hi)| (wi - w_mean - hi * wx_mean) / std)
                            .collect();
                        (dg, dx)
                    };
                    self.add_grad(*bias, &gy);
                    self.add_grad(*gain, &dg);
                    self.add_grad(*x, &dx);
                }
                Op::SumPool { x, groups } => {
                    let d = self.nodes[i].shape[1];
                    let n = groups.len();
                    let mut dx = vec![S::zero(); n * d];
                    for (r, &g) in groups.iter().enumerate() {
                        for j in 0..d {
                            dx[r * d + j] = gy[g * d + j];
                        }
                    }
                    self.add_grad(*x, &dx);
                }
                Op::MaxPool {
                    x, argmax, groups, ..
                } => {
                    let d = self.nodes[i].shape[1];
                    let n = groups.len();
                    let mut dx = vec![S::zero(); n * d];
                    for (slot, &src) in argmax.iter().enumerate() {
                        if src != usize::MAX {
                            let j = slot % d;
                            dx[src * d + j] += gy[slot];
                        }
                    }
                    self.add_grad(*x, &dx);
                }
            }
            self.nodes[i].op = op;
            // Keep the gradient so callers can query any node after backward.
            self.nodes[i].grad = Some(gy);
        }
        Ok(())
    }
}

/// Shared numeric kernels, used by both the tape ops and the value-only
/// evaluation paths so the two routes agree bit for bit.
pub(crate) mod kernels {
    use crate::scalar::Real;

    pub fn relu<S: Real>(x: S) -> S {
        if x > S::zero() {
            x
        } else {
            S::zero()
        }
    }

    pub fn sigmoid<S: Real>(x: S) -> S {
        if x >= S::zero() {
            S::one() / (S::one() + (-x).exp())
        } else {
            let e = x.exp();
            e / (S::one() + e)
        }
    }

    /// log(sigmoid(x)) = -softplus(-x), stable at both tails.
    pub fn log_sigmoid<S: Real>(x: S) -> S {
        let t = -x;
        let m = if t > S::zero() { t } else { S::zero() };
        -(m + ((t - m).exp() + (-m).exp()).ln())
    }

    pub fn matvec<S: Real>(a: &[S], x: &[S], m: usize, k: usize) -> Vec<S> {
        let mut out = vec![S::zero(); m];
        for i in 0..m {
            let row = &a[i * k..(i + 1) * k];
            let mut acc = S::zero();
            for (av, xv) in row.iter().zip(x) {
                acc += *av * *xv;
            }
            out[i] = acc;
        }
        out
    }

    pub fn matmat<S: Real>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..k {
                let aij = a[i * k + j];
                if aij == S::zero() {
                    continue;
                }
                let brow = &b[j * n..(j + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += aij * *bv;
                }
            }
        }
        out
    }

    pub fn softmax<S: Real>(x: &[S]) -> Vec<S> {
        let max = x.iter().copied().fold(S::neg_infinity(), S::max);
        let exps: Vec<S> = x.iter().map(|&v| (v - max).exp()).collect();
        let total: S = exps.iter().copied().sum();
        exps.into_iter().map(|e| e / total).collect()
    }

    pub fn log_softmax<S: Real>(x: &[S]) -> Vec<S> {
        let max = x.iter().copied().fold(S::neg_infinity(), S::max);
        let lse: S = x.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
        x.iter().map(|&v| v - lse).collect()
    }

    pub fn layer_norm<S: Real>(x: &[S], gain: &[S], bias: &[S], eps: S) -> Vec<S> {
        let dn = S::of(x.len() as f64);
        let mean = x.iter().copied().sum::<S>() / dn;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
        let std = (var + eps).sqrt();
        x.iter()
            .zip(gain.iter().zip(bias))
            .map(|(&v, (&g, &b))| g * (v - mean) / std + b)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type T = Tape<f64>;

    fn assert_close(got: &[f64], want: &[f64], tol: f64) {
        assert_eq!(got.len(), want.len(), "length mismatch: {got:?} vs {want:?}");
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() <= tol, "got {got:?}, want {want:?}");
        }
    }

    #[test]
    fn relu_forward() {
        let mut t = T::new();
        let x = t.leaf(vec![-1.0, 0.0, 2.0], &[3]).unwrap();
        let y = t.relu(x);
        assert_eq!(t.value(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_shapes_and_values() {
        let mut t = T::new();
        let a = t.constant(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = t.constant(vec![5.0, 6.0], &[2]).unwrap();
        let y = t.matmul(a, b).unwrap();
        assert_eq!(t.value(y), &[17.0, 39.0]);

        let c = t.constant(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let d = t.matmul(a, c).unwrap();
        assert_eq!(t.value(d), &[1.0, 2.0, 3.0, 4.0]);

        let bad = t.constant(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        assert!(t.matmul(a, bad).is_err());
    }

    #[test]
    fn softmax_normalizes_and_is_shift_invariant() {
        let mut t = T::new();
        let x = t.constant(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let y = t.softmax(x).unwrap();
        let s: f64 = t.value(y).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);

        let xs = t.constant(vec![1001.0, 1002.0, 1003.0], &[3]).unwrap();
        let ys = t.softmax(xs).unwrap();
        assert_close(t.value(ys), &t.value(y).to_vec(), 1e-12);
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let mut t = T::new();
        let x = t.constant(vec![0.5, -1.0, 2.0], &[3]).unwrap();
        let sm = t.softmax(x).unwrap();
        let lsm = t.log_softmax(x).unwrap();
        let want: Vec<f64> = t.value(sm).iter().map(|p| p.ln()).collect();
        assert_close(t.value(lsm), &want, 1e-12);
    }

    #[test]
    fn layer_norm_standardizes() {
        let mut t = T::new();
        let x = t.constant(vec![1.0, 2.0, 3.0, 4.0], &[4]).unwrap();
        let g = t.constant(vec![1.0; 4], &[4]).unwrap();
        let b = t.constant(vec![0.0; 4], &[4]).unwrap();
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        let v = t.value(y);
        let mean: f64 = v.iter().sum::<f64>() / 4.0;
        let var: f64 = v.iter().map(|&a| (a - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-4); // eps shrinks variance slightly
    }

    #[test]
    fn sum_pool_groups_rows() {
        let mut t = T::new();
        let x = t
            .constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2])
            .unwrap();
        let y = t.sum_pool(x, &[0, 1, 0], 2).unwrap();
        assert_eq!(t.value(y), &[6.0, 8.0, 3.0, 4.0]);
        assert_eq!(t.shape(y), &[2, 2]);
    }

    #[test]
    fn sum_pool_empty_group_is_zero() {
        let mut t = T::new();
        let x = t.constant(vec![1.0, 2.0], &[1, 2]).unwrap();
        let y = t.sum_pool(x, &[2], 3).unwrap();
        assert_eq!(t.value(y), &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn max_pool_takes_per_dim_max() {
        let mut t = T::new();
        let x = t
            .constant(vec![1.0, 5.0, 3.0, 2.0, -1.0, 0.0], &[3, 2])
            .unwrap();
        let y = t.max_pool(x, &[0, 0, 1], 2).unwrap();
        assert_eq!(t.value(y), &[3.0, 5.0, -1.0, 0.0]);
    }

    #[test]
    fn backward_add_mul_chain() {
        // y = (a + b) * a, dy/da = 2a + b, dy/db = a
        let mut t = T::new();
        let a = t.leaf(vec![3.0], &[1]).unwrap();
        let b = t.leaf(vec![4.0], &[1]).unwrap();
        let s = t.add(a, b).unwrap();
        let y = t.mul(s, a).unwrap();
        t.backward(y).unwrap();
        assert_close(t.grad(a).unwrap(), &[10.0], 1e-12);
        assert_close(t.grad(b).unwrap(), &[3.0], 1e-12);
    }

    #[test]
    fn backward_diamond_accumulates() {
        // y = x*x + x : dy/dx = 2x + 1
        let mut t = T::new();
        let x = t.leaf(vec![5.0], &[1]).unwrap();
        let sq = t.mul(x, x).unwrap();
        let y = t.add(sq, x).unwrap();
        t.backward(y).unwrap();
        assert_close(t.grad(x).unwrap(), &[11.0], 1e-12);
    }

    #[test]
    fn clamp_gradient_gates_on_strict_interior() {
        let mut t = T::new();
        let x = t.leaf(vec![-0.5, 0.0, 0.5, 1.0, 1.5], &[5]).unwrap();
        let c = t.clamp(x, 0.0, 1.0).unwrap();
        let y = t.sum(c);
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn no_grad_tape_records_leaves_only() {
        let mut t = Tape::<f64>::no_grad();
        let x = t.leaf(vec![1.0, 2.0], &[2]).unwrap();
        let y = t.relu(x);
        assert!(t.backward(y).is_err());
        assert_eq!(t.value(y), &[1.0, 2.0]);
    }

    #[test]
    fn constant_loss_backward_is_noop() {
        let mut t = T::new();
        let x = t.constant(vec![1.0], &[1]).unwrap();
        let y = t.relu(x);
        t.backward(y).unwrap();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = T::new();
        let x = t.leaf(vec![1.0, 2.0], &[2]).unwrap();
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut t = T::new();
            let x = t.leaf(vec![0.3, -0.7, 1.9], &[3]).unwrap();
            let s = t.sigmoid(x);
            let sm = t.softmax(s).unwrap();
            let y = t.sum(sm);
            t.backward(y).unwrap();
            (t.value(sm).to_vec(), t.grad(x).unwrap().to_vec())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
    }

    use crate::check::assert_gradients as gradcheck;

    #[test]
    fn gradcheck_core_ops() {
        let input = vec![0.37, -0.81, 1.42, 0.06];

        gradcheck(
            |t, x| {
                let s = t.sigmoid(x);
                t.sum(s)
            },
            &input,
            1e-6,
        );
        gradcheck(
            |t, x| {
                let s = t.log_sigmoid(x);
                t.sum(s)
            },
            &input,
            1e-6,
        );
        gradcheck(
            |t, x| {
                let s = t.softmax(x).unwrap();
                let l = t.log(s);
                let p = t.pick(l, 2).unwrap();
                t.affine(p, -1.0, 0.0)
            },
            &input,
            1e-6,
        );
        gradcheck(
            |t, x| {
                let l = t.log_softmax(x).unwrap();
                t.pick(l, 0).unwrap()
            },
            &input,
            1e-6,
        );
        gradcheck(
            |t, x| {
                let g = t.constant(vec![1.3, 0.7, -0.2, 2.0], &[4]).unwrap();
                let b = t.constant(vec![0.1, -0.4, 0.0, 0.5], &[4]).unwrap();
                let y = t.layer_norm(x, g, b, 1e-5).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum(sq)
            },
            &input,
            1e-5,
        );
        gradcheck(
            |t, x| {
                let w = t
                    .constant(vec![0.5, -1.0, 0.25, 2.0, 1.0, 0.0, -0.5, 0.75], &[2, 4])
                    .unwrap();
                let y = t.matmul(w, x).unwrap();
                let r = t.relu(y);
                t.sum(r)
            },
            &input,
            1e-6,
        );
        gradcheck(
            |t, x| {
                let e = t.exp(x);
                let m = t.mean(e).unwrap();
                t.log(m)
            },
            &input,
            1e-6,
        );
    }

    #[test]
    fn gradcheck_layer_norm_params() {
        // Gradient w.r.t. gain and bias rather than the input.
        let gain0 = vec![1.0, 1.5, 0.5, 2.0];
        gradcheck(
            |t, g| {
                let x = t.constant(vec![0.2, -0.9, 1.1, 0.4], &[4]).unwrap();
                let b = t.constant(vec![0.0; 4], &[4]).unwrap();
                let y = t.layer_norm(x, g, b, 1e-5).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum(sq)
            },
            &gain0,
            1e-5,
        );
    }

    #[test]
    fn gradcheck_scalar_mul_both_sides() {
        gradcheck(
            |t, x| {
                let s = t.pick(x, 0).unwrap();
                let rest = t.constant(vec![2.0, -3.0, 0.5], &[3]).unwrap();
                let y = t.scalar_mul(s, rest).unwrap();
                t.sum(y)
            },
            &[0.8],
            1e-6,
        );
        gradcheck(
            |t, x| {
                let s = t.scalar(1.7);
                let y = t.scalar_mul(s, x).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum(sq)
            },
            &[0.3, -0.6, 0.9, 1.2],
            1e-6,
        );
    }

    /// Slice a flat 1-D tensor into its i-th chunk of length d via
    /// pick+concat (test helper).
    fn row_from_flat(t: &mut Tape<f64>, x: TensorId, i: usize, d: usize) -> TensorId {
        let picks: Vec<TensorId> = (0..d).map(|j| t.pick(x, i * d + j).unwrap()).collect();
        t.concat(&picks).unwrap()
    }

    #[test]
    fn gradcheck_pooling() {
        gradcheck(
            |t, x| {
                let rows = [row_from_flat(t, x, 0, 2), row_from_flat(t, x, 1, 2)];
                let m = t.stack_rows(&rows).unwrap();
                let p = t.sum_pool(m, &[0, 0], 1).unwrap();
                let r = t.row(p, 0).unwrap();
                let sq = t.mul(r, r).unwrap();
                t.sum(sq)
            },
            &[0.5, -1.5, 2.5, 0.1],
            1e-6,
        );
        gradcheck(
            |t, x| {
                let rows = [row_from_flat(t, x, 0, 2), row_from_flat(t, x, 1, 2)];
                let m = t.stack_rows(&rows).unwrap();
                let p = t.max_pool(m, &[0, 0], 1).unwrap();
                let r = t.row(p, 0).unwrap();
                t.sum(r)
            },
            &[0.5, -1.5, 2.5, 0.1],
            1e-6,
        );
    }

    #[test]
    fn f32_tape_smoke() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(vec![0.0, -2.0], &[2]).unwrap();
        let s = t.sigmoid(x);
        let y = t.sum(s);
        t.backward(y).unwrap();
        let g = t.grad(x).unwrap();
        assert!((g[0] - 0.25).abs() < 1e-6, "sigmoid'(0) = 1/4, got {}", g[0]);
    }
}
