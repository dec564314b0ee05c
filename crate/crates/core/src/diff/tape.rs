//! Reverse-mode differentiation over a Wengert list.
//!
//! Every operation performed through a [`Var`] appends a node holding its
//! forward value to the owning [`Tape`]. Nodes only ever reference earlier
//! nodes, so the list is a topological order and [`Tape::backward`] is a
//! single reverse sweep.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Identifier of a trainable parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// The primitive operations the tape knows how to differentiate.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    /// `[m,k] x [k,n] -> [m,n]` or `[m,k] x [k] -> [m]`.
    MatMul,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Softplus,
    Sum,
    Mean,
    /// Concatenation of rank-1 tensors.
    Concat,
    /// Contiguous range of a rank-1 tensor.
    Slice { start: usize, len: usize },
    /// `[1] -> shape` or `[n] -> [rows, n]`.
    Broadcast { shape: Vec<usize> },
    /// Multiplication by a constant.
    Scale(f64),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::MatMul => "matmul",
            Primitive::Tanh => "tanh",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Softplus => "softplus",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Concat => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Broadcast { .. } => "broadcast",
            Primitive::Scale(_) => "scale",
        }
    }

    fn arity_ok(&self, n: usize) -> bool {
        match self {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::MatMul => n == 2,
            Primitive::Concat => n >= 1,
            _ => n == 1,
        }
    }

    /// Evaluates the primitive without recording anything.
    pub fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let op = self.name();
        if !self.arity_ok(inputs.len()) {
            return Err(Error::shape(op, format!("wrong number of inputs: {}", inputs.len())));
        }
        let out = match self {
            Primitive::Add | Primitive::Sub | Primitive::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.shape() != b.shape() {
                    return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
                }
                let f: fn(f64, f64) -> f64 = match self {
                    Primitive::Add => |x, y| x + y,
                    Primitive::Sub => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::from_parts(a.shape().to_vec(), data)
            }
            Primitive::MatMul => matmul(inputs[0], inputs[1])?,
            Primitive::Tanh => unary(inputs[0], f64::tanh),
            Primitive::Sigmoid => unary(inputs[0], sigmoid),
            Primitive::Exp => unary(inputs[0], f64::exp),
            Primitive::Log => {
                if let Some(&bad) = inputs[0].data().iter().find(|&&v| v <= 0.0) {
                    return Err(Error::NonPositiveLog(bad));
                }
                unary(inputs[0], f64::ln)
            }
            Primitive::Softplus => unary(inputs[0], softplus),
            Primitive::Sum => Tensor::from_parts(vec![1], vec![inputs[0].data().iter().sum()]),
            Primitive::Mean => {
                let a = inputs[0];
                let s: f64 = a.data().iter().sum();
                Tensor::from_parts(vec![1], vec![s / a.len() as f64])
            }
            Primitive::Concat => {
                let mut data = Vec::new();
                for t in inputs {
                    if t.rank() != 1 {
                        return Err(Error::shape(op, format!("rank-1 inputs only, got {:?}", t.shape())));
                    }
                    data.extend_from_slice(t.data());
                }
                Tensor::from_parts(vec![data.len()], data)
            }
            Primitive::Slice { start, len } => {
                let a = inputs[0];
                if a.rank() != 1 || *len == 0 || start + len > a.len() {
                    return Err(Error::shape(
                        op,
                        format!("[{start}, {}) out of range for {:?}", start + len, a.shape()),
                    ));
                }
                Tensor::from_parts(vec![*len], a.data()[*start..start + len].to_vec())
            }
            Primitive::Broadcast { shape } => {
                let a = inputs[0];
                if shape.is_empty() || shape.iter().any(|&d| d == 0) {
                    return Err(Error::shape(op, format!("bad target shape {shape:?}")));
                }
                let n: usize = shape.iter().product();
                if a.len() == 1 {
                    Tensor::from_parts(shape.clone(), vec![a.data()[0]; n])
                } else if a.rank() == 1 && shape.len() == 2 && shape[1] == a.len() {
                    let mut data = Vec::with_capacity(n);
                    for _ in 0..shape[0] {
                        data.extend_from_slice(a.data());
                    }
                    Tensor::from_parts(shape.clone(), data)
                } else {
                    return Err(Error::shape(op, format!("cannot broadcast {:?} to {shape:?}", a.shape())));
                }
            }
            Primitive::Scale(c) => unary(inputs[0], |v| c * v),
        };
        if out.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op));
        }
        Ok(out)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn unary(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&v| f(v)).collect())
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(Error::shape("matmul", format!("left operand must be rank 2, got {:?}", a.shape())));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n, out_shape) = match b.shape() {
        [k2] => (*k2, 1, vec![m]),
        [k2, n] => (*k2, *n, vec![m, *n]),
        s => return Err(Error::shape("matmul", format!("right operand rank {}", s.len()))),
    };
    if k != k2 {
        return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let (ad, bd) = (a.data(), b.data());
    if n == 1 {
        let out = ad.chunks_exact(k).map(|row| row.iter().zip(bd).map(|(x, y)| x * y).sum()).collect();
        return Ok(Tensor::from_parts(out_shape, out));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &ad[i * k..(i + 1) * k];
        let dst = &mut out[i * n..(i + 1) * n];
        for (p, &av) in row.iter().enumerate() {
            let brow = &bd[p * n..(p + 1) * n];
            for (d, &bv) in dst.iter_mut().zip(brow) {
                *d += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

enum Origin {
    Leaf(Option<ParamId>),
    Op(Primitive, Vec<usize>),
}

struct Node {
    origin: Origin,
    value: Rc<Tensor>,
    /// Whether any parameter leaf lies upstream of this node.
    needs_grad: bool,
}

/// Append-only record of a computation.
///
/// A tape is single-threaded; build one tape per thread when evaluating
/// independent trajectories concurrently.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, origin: Origin, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = match &origin {
            Origin::Leaf(p) => p.is_some(),
            Origin::Op(_, ins) => ins.iter().any(|&i| nodes[i].needs_grad),
        };
        nodes.push(Node { origin, value: Rc::new(value), needs_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// A trainable leaf. Gradients are reported for it under `id`.
    pub fn param(&self, id: ParamId, value: Tensor) -> Var<'_> {
        self.push(Origin::Leaf(Some(id)), value)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Origin::Leaf(None), value)
    }

    pub fn scalar(&self, v: f64) -> Result<Var<'_>> {
        Ok(self.constant(Tensor::scalar(v)?))
    }

    pub fn vector(&self, v: Vec<f64>) -> Result<Var<'_>> {
        Ok(self.constant(Tensor::vector(v)?))
    }

    /// Applies `op` to `inputs` and records the result.
    pub fn apply<'t>(&'t self, op: Primitive, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        for v in inputs {
            self.check_owner(v)?;
        }
        let values: Vec<Rc<Tensor>> = {
            let nodes = self.nodes.borrow();
            inputs.iter().map(|v| nodes[v.id].value.clone()).collect()
        };
        let refs: Vec<&Tensor> = values.iter().map(|r| r.as_ref()).collect();
        let out = op.forward(&refs)?;
        Ok(self.push(Origin::Op(op, inputs.iter().map(|v| v.id).collect()), out))
    }

    fn check_owner(&self, v: &Var<'_>) -> Result<()> {
        if v.tape.id != self.id {
            return Err(Error::ForeignNode(v.id));
        }
        Ok(())
    }

    pub fn value(&self, v: Var<'_>) -> Rc<Tensor> {
        self.nodes.borrow()[v.id].value.clone()
    }

    /// Re-evaluates every recorded operation from its cached inputs and
    /// reports whether all outputs are reproduced bit for bit.
    pub fn replay_matches(&self) -> bool {
        let nodes = self.nodes.borrow();
        nodes.iter().all(|node| match &node.origin {
            Origin::Leaf(_) => true,
            Origin::Op(op, ins) => {
                let refs: Vec<&Tensor> = ins.iter().map(|&i| nodes[i].value.as_ref()).collect();
                match op.forward(&refs) {
                    Ok(t) => t.shape() == node.value.shape()
                        && t.data().iter().zip(node.value.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
                    Err(_) => false,
                }
            }
        })
    }

    /// Gradient of the scalar `loss` with respect to every parameter leaf on
    /// the tape. Parameters that do not influence the loss get zeros.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check_owner(&loss)?;
        let nodes = self.nodes.borrow();
        if loss.id >= nodes.len() {
            return Err(Error::ForeignNode(loss.id));
        }
        if !nodes[loss.id].value.is_scalar() {
            return Err(Error::NonScalarLoss(nodes[loss.id].value.shape().to_vec()));
        }

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        adj[loss.id] = Some(vec![1.0]);
        let mut grads = Gradients::default();

        for id in (0..=loss.id).rev() {
            let Some(g) = adj[id].take() else {
                if let Origin::Leaf(Some(pid)) = nodes[id].origin {
                    grads.accumulate(pid, &Tensor::zeros(nodes[id].value.shape()));
                }
                continue;
            };
            let node = &nodes[id];
            match &node.origin {
                Origin::Leaf(Some(pid)) => {
                    grads.accumulate(*pid, &Tensor::from_parts(node.value.shape().to_vec(), g));
                }
                Origin::Leaf(None) => {}
                Origin::Op(_, _) if !node.needs_grad => {}
                Origin::Op(op, ins) => {
                    let y = node.value.data();
                    let x = |i: usize| nodes[ins[i]].value.data();
                    let need = |slot: usize| nodes[ins[slot]].needs_grad;
                    let mut send = |slot: usize, contrib: Vec<f64>| {
                        if !nodes[ins[slot]].needs_grad {
                            return;
                        }
                        let dst = &mut adj[ins[slot]];
                        match dst {
                            Some(d) => d.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                            None => *dst = Some(contrib),
                        }
                    };
                    match op {
                        Primitive::Add => {
                            send(0, g.clone());
                            send(1, g);
                        }
                        Primitive::Sub => {
                            send(1, g.iter().map(|v| -v).collect());
                            send(0, g);
                        }
                        Primitive::Mul => {
                            let (a, b) = (x(0), x(1));
                            send(0, g.iter().zip(b).map(|(g, b)| g * b).collect());
                            send(1, g.iter().zip(a).map(|(g, a)| g * a).collect());
                        }
                        Primitive::MatMul => {
                            let a = &nodes[ins[0]].value;
                            let b = &nodes[ins[1]].value;
                            let (m, k) = (a.shape()[0], a.shape()[1]);
                            let n = if b.rank() == 1 { 1 } else { b.shape()[1] };
                            let (ad, bd) = (a.data(), b.data());
                            if need(0) {
                                let mut ga = vec![0.0; m * k];
                                for i in 0..m {
                                    let grow = &g[i * n..(i + 1) * n];
                                    for p in 0..k {
                                        let brow = &bd[p * n..(p + 1) * n];
                                        ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                                    }
                                }
                                send(0, ga);
                            }
                            if need(1) {
                                let mut gb = vec![0.0; k * n];
                                for i in 0..m {
                                    let grow = &g[i * n..(i + 1) * n];
                                    for p in 0..k {
                                        let av = ad[i * k + p];
                                        for (dst, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                            *dst += av * gv;
                                        }
                                    }
                                }
                                send(1, gb);
                            }
                        }
                        Primitive::Tanh => send(0, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect()),
                        Primitive::Sigmoid => send(0, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect()),
                        Primitive::Exp => send(0, g.iter().zip(y).map(|(g, y)| g * y).collect()),
                        Primitive::Log => send(0, g.iter().zip(x(0)).map(|(g, x)| g / x).collect()),
                        Primitive::Softplus => {
                            send(0, g.iter().zip(x(0)).map(|(g, &x)| g * sigmoid(x)).collect())
                        }
                        Primitive::Sum => send(0, vec![g[0]; x(0).len()]),
                        Primitive::Mean => {
                            let n = x(0).len();
                            send(0, vec![g[0] / n as f64; n]);
                        }
                        Primitive::Concat => {
                            let mut off = 0;
                            for slot in 0..ins.len() {
                                let n = x(slot).len();
                                send(slot, g[off..off + n].to_vec());
                                off += n;
                            }
                        }
                        Primitive::Slice { start, len } => {
                            let mut ga = vec![0.0; x(0).len()];
                            ga[*start..start + len].copy_from_slice(&g);
                            send(0, ga);
                        }
                        Primitive::Broadcast { .. } => {
                            let n = x(0).len();
                            let mut ga = vec![0.0; n];
                            for (i, gv) in g.iter().enumerate() {
                                ga[i % n] += gv;
                            }
                            send(0, ga);
                        }
                        Primitive::Scale(c) => send(0, g.iter().map(|v| c * v).collect()),
                    }
                }
            }
        }
        // Parameters recorded after the loss cannot influence it.
        for node in &nodes[loss.id + 1..] {
            if let Origin::Leaf(Some(pid)) = node.origin {
                grads.accumulate(pid, &Tensor::zeros(node.value.shape()));
            }
        }
        if grads.map.values().any(|t| t.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("backward"));
        }
        Ok(grads)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn node_id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.value().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Value of a scalar node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn un(self, op: Primitive) -> Result<Var<'t>> {
        self.tape.apply(op, &[self])
    }

    fn bin(self, op: Primitive, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(op, &[self, other])
    }

    pub fn add(self, o: Var<'t>) -> Result<Var<'t>> {
        self.bin(Primitive::Add, o)
    }

    pub fn sub(self, o: Var<'t>) -> Result<Var<'t>> {
        self.bin(Primitive::Sub, o)
    }

    pub fn mul(self, o: Var<'t>) -> Result<Var<'t>> {
        self.bin(Primitive::Mul, o)
    }

    /// `self` is the left (matrix) operand.
    pub fn matmul(self, o: Var<'t>) -> Result<Var<'t>> {
        self.bin(Primitive::MatMul, o)
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.un(Primitive::Tanh)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.un(Primitive::Sigmoid)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.un(Primitive::Exp)
    }

    pub fn ln(self) -> Result<Var<'t>> {
        self.un(Primitive::Log)
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        self.un(Primitive::Softplus)
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.un(Primitive::Sum)
    }

    pub fn mean(self) -> Result<Var<'t>> {
        self.un(Primitive::Mean)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.un(Primitive::Scale(c))
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.mul(self)
    }

    pub fn slice(self, start: usize, len: usize) -> Result<Var<'t>> {
        self.un(Primitive::Slice { start, len })
    }

    pub fn broadcast(self, shape: &[usize]) -> Result<Var<'t>> {
        self.un(Primitive::Broadcast { shape: shape.to_vec() })
    }

    /// Adds a constant to every element.
    pub fn add_const(self, c: f64) -> Result<Var<'t>> {
        let k = self.tape.constant(Tensor::filled(&self.shape(), c));
        self.add(k)
    }

    /// `c - self`, elementwise.
    pub fn rsub_const(self, c: f64) -> Result<Var<'t>> {
        let k = self.tape.constant(Tensor::filled(&self.shape(), c));
        k.sub(self)
    }
}

/// Concatenates rank-1 nodes.
pub fn concat<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
    first.tape.apply(Primitive::Concat, parts)
}

/// Gradient tensors keyed by parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, id: ParamId, t: Tensor) {
        self.map.insert(id, t);
    }

    pub fn accumulate(&mut self, id: ParamId, t: &Tensor) {
        match self.map.get_mut(&id) {
            Some(dst) => dst.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
            None => {
                self.map.insert(id, t.clone());
            }
        }
    }

    /// Adds every entry of `other` into `self`. Iteration is in key order.
    pub fn merge(&mut self, other: &Gradients) {
        for (id, t) in other.iter() {
            self.accumulate(id, t);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.map.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn retain(&mut self, keep: impl Fn(ParamId) -> bool) {
        self.map.retain(|k, _| keep(*k));
    }

    pub fn global_norm(&self) -> f64 {
        self.map.values().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(|t| t.data().iter().all(|v| v.is_finite()))
    }

    /// Rescales so the global norm is at most `max_norm`. Returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }
}
