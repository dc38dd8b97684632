//! Dense f64 tensors with a scoped reverse-mode tape.
//!
//! Everything is double precision, and every public operation checks its
//! output for NaN/inf so numerical trouble surfaces where it happens instead
//! of three modules later.
//!
//! The tape is explicit and scoped: [`with_tape`] activates a fresh tape for
//! the current thread, ops executed inside the closure record themselves iff
//! at least one input is tracked, and the returned [`Tape`] is consumed by
//! [`Tape::backward`]. Outside a scope the same ops run as plain arithmetic
//! and record nothing. Tapes never cross threads; distinct computations on
//! distinct tapes can run on distinct threads with no shared state.
//!
//! Leaves come in three kinds: named parameters (entered via
//! [`ParamSet::tracked`]), marked inputs ([`Tensor::tracked`]), and constants
//! (anything untracked that flows into a recorded op). `backward` returns
//! gradients for the first two, keyed by name and by tensor respectively.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

// ── Tensor ───────────────────────────────────────────────────────────────

/// Row-major dense tensor. Rank 1 and 2 cover everything this crate does.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    node: Option<NodeRef>,
}

/// Where a tensor lives on a tape: which tape, which node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct NodeRef {
    tape: u64,
    idx: u32,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "from_vec",
                detail: format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            });
        }
        let t = Tensor { shape, data, node: None };
        t.check_finite("from_vec")?;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], node: None }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor { shape: vec![1], data: vec![v], node: None }
    }

    pub fn vector(data: Vec<f64>) -> Tensor {
        let n = data.len();
        Tensor { shape: vec![n], data, node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Shape {
                op: "item",
                detail: format!("expected one element, shape is {:?}", self.shape),
            });
        }
        Ok(self.data[0])
    }

    /// Overwrite the values in place. Shape is immutable; length must match.
    pub fn set_data(&mut self, data: &[f64]) -> Result<()> {
        if data.len() != self.data.len() {
            return Err(Error::Shape {
                op: "set_data",
                detail: format!("have {} values, got {}", self.data.len(), data.len()),
            });
        }
        self.data.copy_from_slice(data);
        self.check_finite("set_data")
    }

    /// Register this tensor as a marked input on the active tape. Gradients
    /// for it can be fetched from [`Gradients::input`] after `backward`. A
    /// no-op (returns `self` untracked) when no tape is active.
    pub fn tracked(mut self) -> Tensor {
        self.node = with_active(|tape| {
            let idx = tape.push_leaf(LeafKind::Input, &self.data);
            NodeRef { tape: tape.id, idx }
        });
        self
    }

    fn untracked(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.clone(), node: None }
    }

    fn check_finite(&self, op: &'static str) -> Result<()> {
        check_finite_slice(&self.data, op)
    }
}

fn check_finite_slice(data: &[f64], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

// ── Tape ─────────────────────────────────────────────────────────────────

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    /// Stack of tape scopes for this thread. `None` entries suspend taping
    /// (used to run plain forward passes inside a taped region).
    static ACTIVE: RefCell<Vec<Option<Tape>>> = const { RefCell::new(Vec::new()) };
}

/// Custom reverse rule for an opaque block recorded on the tape. The block's
/// forward was computed outside the tape; `vjp` receives the cotangent of the
/// block output and must return the cotangent of the block input plus named
/// parameter cotangents.
pub trait CustomVjp {
    fn vjp(&self, upstream: &[f64]) -> Result<(Vec<f64>, BTreeMap<String, Vec<f64>>)>;
}

enum LeafKind {
    Param(String),
    Input,
    Constant,
}

enum Op {
    Leaf(LeafKind),
    /// y = W x + b with W of shape [m, n].
    Linear { w: u32, b: u32, x: u32, m: usize, n: usize },
    Activation { kind: Activation, x: u32 },
    Concat { xs: Vec<u32> },
    /// y_i = sum_k coeff_k * term_k[i], accumulated in term order.
    LinComb { terms: Vec<(f64, u32)> },
    /// Elementwise product.
    Mul { a: u32, b: u32 },
    /// Scalar y = sum_i weights[i] * x[i] with constant weights.
    WeightedSum { x: u32, weights: Vec<f64> },
    /// Scalar loss over logits; softmax probabilities saved for the reverse.
    SoftmaxCrossEntropy { logits: u32, target: usize, probs: Vec<f64> },
    /// One row of a [r, c] table.
    RowSelect { table: u32, row: usize, cols: usize },
    /// Opaque block with a caller-supplied reverse rule. `params` maps the
    /// block's internal parameter names to leaf nodes on this tape.
    Custom { x: u32, params: Vec<(String, u32)>, vjp: Box<dyn CustomVjp> },
}

struct Node {
    op: Op,
    len: usize,
}

/// A Wengert list: one entry per recorded operation, in execution order,
/// with the forward value of every node retained for the reverse sweep.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    values: Vec<Vec<f64>>,
}

impl Tape {
    fn new() -> Tape {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, kind: LeafKind, value: &[f64]) -> u32 {
        self.push_node(Op::Leaf(kind), value.to_vec())
    }

    fn push_node(&mut self, op: Op, value: Vec<f64>) -> u32 {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node { op, len: value.len() });
        self.values.push(value);
        idx
    }

    /// Reverse sweep from a scalar loss with seed dL/dloss = `seed`.
    pub fn backward(self, loss: &Tensor, seed: f64) -> Result<Gradients> {
        if loss.numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be scalar, shape is {:?}", loss.shape),
            });
        }
        self.backward_seeded(&[(loss, &[seed])])
    }

    /// General vector–Jacobian product: seed several recorded tensors with
    /// explicit cotangents, then sweep. Consumes the tape.
    pub fn backward_seeded(self, seeds: &[(&Tensor, &[f64])]) -> Result<Gradients> {
        let Tape { id, nodes, values } = self;
        let mut adj: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        for (tensor, cot) in seeds {
            let node = tensor.node.ok_or_else(|| {
                Error::Tape("cannot seed a tensor that was never recorded".into())
            })?;
            if node.tape != id {
                return Err(Error::Tape("seed tensor belongs to a different tape".into()));
            }
            let idx = node.idx as usize;
            if cot.len() != nodes[idx].len {
                return Err(Error::Shape {
                    op: "backward_seeded",
                    detail: format!("cotangent has {} values, node has {}", cot.len(), nodes[idx].len),
                });
            }
            accumulate(&mut adj[idx], cot, nodes[idx].len);
        }

        let mut params: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut inputs: BTreeMap<u32, Vec<f64>> = BTreeMap::new();

        for i in (0..nodes.len()).rev() {
            let Some(g) = adj[i].take() else { continue };
            match &nodes[i].op {
                Op::Leaf(LeafKind::Param(name)) => match params.get_mut(name.as_str()) {
                    Some(acc) => add_into(acc, &g),
                    None => {
                        params.insert(name.clone(), g);
                    }
                },
                Op::Leaf(LeafKind::Input) => {
                    inputs.insert(i as u32, g);
                }
                Op::Leaf(LeafKind::Constant) => {}
                Op::Linear { w, b, x, m, n } => {
                    let (m, n) = (*m, *n);
                    let w_val = &values[*w as usize];
                    let x_val = &values[*x as usize];
                    // dL/dx = W^T g
                    let gx = adj_buf(&mut adj, *x, n);
                    for i_row in 0..m {
                        let gi = g[i_row];
                        let row = &w_val[i_row * n..(i_row + 1) * n];
                        for (gxj, wj) in gx.iter_mut().zip(row) {
                            *gxj += gi * wj;
                        }
                    }
                    // dL/dW = g x^T
                    let gw = adj_buf(&mut adj, *w, m * n);
                    for i_row in 0..m {
                        let gi = g[i_row];
                        let row = &mut gw[i_row * n..(i_row + 1) * n];
                        for (gwj, xj) in row.iter_mut().zip(x_val) {
                            *gwj += gi * xj;
                        }
                    }
                    // dL/db = g
                    accumulate(&mut adj[*b as usize], &g, m);
                }
                Op::Activation { kind, x } => {
                    let gx = adj_buf(&mut adj, *x, nodes[*x as usize].len);
                    match kind {
                        Activation::Tanh => {
                            // y is this node's own stored value.
                            let y = &values[i];
                            for ((gxj, gj), yj) in gx.iter_mut().zip(&g).zip(y) {
                                *gxj += gj * (1.0 - yj * yj);
                            }
                        }
                        Activation::Relu => {
                            let x_val = &values[*x as usize];
                            for ((gxj, gj), xj) in gx.iter_mut().zip(&g).zip(x_val) {
                                if *xj > 0.0 {
                                    *gxj += gj;
                                }
                            }
                        }
                    }
                }
                Op::Concat { xs } => {
                    let mut offset = 0;
                    for &part in xs {
                        let len = nodes[part as usize].len;
                        accumulate(&mut adj[part as usize], &g[offset..offset + len], len);
                        offset += len;
                    }
                }
                Op::LinComb { terms } => {
                    for &(c, part) in terms {
                        let len = nodes[part as usize].len;
                        let gp = adj_buf(&mut adj, part, len);
                        for (gpj, gj) in gp.iter_mut().zip(&g) {
                            *gpj += c * gj;
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let len = nodes[a as usize].len;
                    // Clone the partner values so `a == b` (x * x) works too.
                    let a_val = values[a as usize].clone();
                    let b_val = values[b as usize].clone();
                    let ga = adj_buf(&mut adj, a, len);
                    for ((gaj, gj), bj) in ga.iter_mut().zip(&g).zip(&b_val) {
                        *gaj += gj * bj;
                    }
                    let gb = adj_buf(&mut adj, b, len);
                    for ((gbj, gj), aj) in gb.iter_mut().zip(&g).zip(&a_val) {
                        *gbj += gj * aj;
                    }
                }
                Op::WeightedSum { x, weights } => {
                    let gx = adj_buf(&mut adj, *x, weights.len());
                    for (gxj, wj) in gx.iter_mut().zip(weights) {
                        *gxj += g[0] * wj;
                    }
                }
                Op::SoftmaxCrossEntropy { logits, target, probs } => {
                    let gl = adj_buf(&mut adj, *logits, probs.len());
                    for (j, (glj, pj)) in gl.iter_mut().zip(probs).enumerate() {
                        let onehot = if j == *target { 1.0 } else { 0.0 };
                        *glj += g[0] * (pj - onehot);
                    }
                }
                Op::RowSelect { table, row, cols } => {
                    let total = nodes[*table as usize].len;
                    let gt = adj_buf(&mut adj, *table, total);
                    let start = row * cols;
                    for (gtj, gj) in gt[start..start + cols].iter_mut().zip(&g) {
                        *gtj += gj;
                    }
                }
                Op::Custom { x, params: block_params, vjp } => {
                    let (gx, gparams) = vjp.vjp(&g)?;
                    check_finite_slice(&gx, "custom vjp")?;
                    let len = nodes[*x as usize].len;
                    if gx.len() != len {
                        return Err(Error::Shape {
                            op: "custom vjp",
                            detail: format!("input cotangent has {} values, expected {}", gx.len(), len),
                        });
                    }
                    accumulate(&mut adj[*x as usize], &gx, len);
                    for (name, node) in block_params {
                        let Some(gp) = gparams.get(name) else { continue };
                        check_finite_slice(gp, "custom vjp")?;
                        let len = nodes[*node as usize].len;
                        if gp.len() != len {
                            return Err(Error::Shape {
                                op: "custom vjp",
                                detail: format!(
                                    "parameter {name} cotangent has {} values, expected {}",
                                    gp.len(),
                                    len
                                ),
                            });
                        }
                        accumulate(&mut adj[*node as usize], gp, len);
                    }
                }
            }
        }

        let param_tensors = params
            .into_iter()
            .map(|(name, data)| {
                check_finite_slice(&data, "backward")?;
                Ok((name, Tensor { shape: vec![data.len()], data, node: None }))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        let input_tensors = inputs
            .into_iter()
            .map(|(idx, data)| {
                check_finite_slice(&data, "backward")?;
                Ok((idx, Tensor { shape: vec![data.len()], data, node: None }))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Gradients { tape: id, params: param_tensors, inputs: input_tensors })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64], len: usize) {
    match slot {
        Some(acc) => add_into(acc, g),
        None => {
            let mut buf = vec![0.0; len];
            add_into(&mut buf, g);
            *slot = Some(buf);
        }
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn adj_buf<'a>(adj: &'a mut [Option<Vec<f64>>], idx: u32, len: usize) -> &'a mut Vec<f64> {
    adj[idx as usize].get_or_insert_with(|| vec![0.0; len])
}

/// Activate a fresh tape on this thread, run `f`, hand back its result and
/// the recorded tape. Nests: an inner scope shadows the outer one.
pub fn with_tape<R>(f: impl FnOnce() -> R) -> (R, Tape) {
    ACTIVE.with(|a| a.borrow_mut().push(Some(Tape::new())));
    let _guard = ScopeGuard;
    let out = f();
    let tape = ACTIVE
        .with(|a| a.borrow_mut().last_mut().and_then(|slot| slot.take()))
        .expect("tape scope vanished");
    (out, tape)
}

/// Suspend taping for the duration of `f`: ops inside run plain even if an
/// outer tape is active.
pub fn without_tape<R>(f: impl FnOnce() -> R) -> R {
    ACTIVE.with(|a| a.borrow_mut().push(None));
    let _guard = ScopeGuard;
    f()
}

pub fn tape_active() -> bool {
    ACTIVE.with(|a| matches!(a.borrow().last(), Some(Some(_))))
}

/// Pops the scope this guard was created under, even on unwind, so a panic
/// inside one test cannot poison the thread for the next.
struct ScopeGuard;

impl Drop for ScopeGuard {
    fn drop(&mut self) {
        ACTIVE.with(|a| {
            a.borrow_mut().pop();
        });
    }
}

fn with_active<R>(f: impl FnOnce(&mut Tape) -> R) -> Option<R> {
    ACTIVE.with(|a| {
        let mut stack = a.borrow_mut();
        match stack.last_mut() {
            Some(Some(tape)) => Some(f(tape)),
            _ => None,
        }
    })
}

/// Resolve the tape node for `t` under the active tape: `Ok(Some)` if tracked
/// here, `Ok(None)` if plain, `Err` if it belongs to a different tape.
fn node_under(tape: &Tape, t: &Tensor) -> Result<Option<u32>> {
    match t.node {
        Some(nr) if nr.tape == tape.id => Ok(Some(nr.idx)),
        Some(_) => Err(Error::Tape(
            "tensor is tracked on a different tape; re-track it in this scope".into(),
        )),
        None => Ok(None),
    }
}

/// Node for `t`, registering it as a constant leaf if it is plain.
fn node_or_constant(tape: &mut Tape, t: &Tensor) -> Result<u32> {
    match node_under(tape, t)? {
        Some(idx) => Ok(idx),
        None => Ok(tape.push_leaf(LeafKind::Constant, &t.data)),
    }
}

/// Record `op` producing `value` if any of `inputs` is tracked on the active
/// tape. Returns the node ref for the output, or `None` when untracked.
fn maybe_record(
    inputs: &[&Tensor],
    value: &[f64],
    build: impl FnOnce(&mut Tape) -> Result<Op>,
) -> Result<Option<NodeRef>> {
    let recorded = with_active(|tape| -> Result<Option<NodeRef>> {
        let mut any_tracked = false;
        for t in inputs {
            if node_under(tape, t)?.is_some() {
                any_tracked = true;
            }
        }
        if !any_tracked {
            return Ok(None);
        }
        let op = build(tape)?;
        let idx = tape.push_node(op, value.to_vec());
        Ok(Some(NodeRef { tape: tape.id, idx }))
    });
    match recorded {
        Some(result) => result,
        None => Ok(None),
    }
}

// ── Gradients ────────────────────────────────────────────────────────────

/// What a reverse sweep produced: one gradient per named parameter that was
/// reachable from the seeds, one per marked input.
pub struct Gradients {
    tape: u64,
    params: BTreeMap<String, Tensor>,
    inputs: BTreeMap<u32, Tensor>,
}

impl Gradients {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// Gradient for a tensor previously marked with [`Tensor::tracked`].
    pub fn input(&self, t: &Tensor) -> Result<&Tensor> {
        let node = t
            .node
            .ok_or_else(|| Error::Tape("tensor was never tracked".into()))?;
        if node.tape != self.tape {
            return Err(Error::Tape("tensor belongs to a different tape".into()));
        }
        self.inputs
            .get(&node.idx)
            .ok_or_else(|| Error::Tape("no gradient reached this input".into()))
    }

    /// Iterate parameter gradients in name order.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn into_param_map(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

// ── Operations ───────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }
}

/// y = W x + b. W is [m, n], b is [m], x is [n].
pub fn linear(w: &Tensor, b: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (m, n) = match w.shape() {
        [m, n] => (*m, *n),
        other => {
            return Err(Error::Shape {
                op: "linear",
                detail: format!("weight must be rank 2, shape is {:?}", other),
            })
        }
    };
    if b.shape() != [m] {
        return Err(Error::Shape {
            op: "linear",
            detail: format!("bias shape {:?} does not match {} rows", b.shape(), m),
        });
    }
    if x.shape() != [n] {
        return Err(Error::Shape {
            op: "linear",
            detail: format!("input shape {:?} does not match {} columns", x.shape(), n),
        });
    }
    let mut out = vec![0.0; m];
    for i in 0..m {
        let row = &w.data[i * n..(i + 1) * n];
        let mut acc = b.data[i];
        for (wj, xj) in row.iter().zip(&x.data) {
            acc += wj * xj;
        }
        out[i] = acc;
    }
    check_finite_slice(&out, "linear")?;
    let node = maybe_record(&[w, b, x], &out, |tape| {
        Ok(Op::Linear {
            w: node_or_constant(tape, w)?,
            b: node_or_constant(tape, b)?,
            x: node_or_constant(tape, x)?,
            m,
            n,
        })
    })?;
    Ok(Tensor { shape: vec![m], data: out, node })
}

/// Elementwise activation.
pub fn activation(kind: Activation, x: &Tensor) -> Result<Tensor> {
    let out: Vec<f64> = x.data.iter().map(|&v| kind.apply(v)).collect();
    check_finite_slice(&out, "activation")?;
    let node = maybe_record(&[x], &out, |tape| {
        Ok(Op::Activation { kind, x: node_or_constant(tape, x)? })
    })?;
    Ok(Tensor { shape: x.shape.clone(), data: out, node })
}

/// Concatenate rank-1 tensors in order.
pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Shape { op: "concat", detail: "no tensors given".into() });
    }
    for p in parts {
        if p.shape.len() != 1 {
            return Err(Error::Shape {
                op: "concat",
                detail: format!("only rank-1 tensors concatenate, got {:?}", p.shape),
            });
        }
    }
    let total: usize = parts.iter().map(|p| p.numel()).sum();
    let mut out = Vec::with_capacity(total);
    for p in parts {
        out.extend_from_slice(&p.data);
    }
    let node = maybe_record(parts, &out, |tape| {
        let xs = parts
            .iter()
            .map(|p| node_or_constant(tape, p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Op::Concat { xs })
    })?;
    Ok(Tensor { shape: vec![total], data: out, node })
}

/// y = sum_k coeff_k * term_k, all terms the same shape. Per element the sum
/// runs in term order, so the result is bit-reproducible.
pub fn lincomb(terms: &[(f64, &Tensor)]) -> Result<Tensor> {
    let Some(((_, first), rest)) = terms.split_first() else {
        return Err(Error::Shape { op: "lincomb", detail: "no terms given".into() });
    };
    for (_, t) in rest {
        if t.shape != first.shape {
            return Err(Error::Shape {
                op: "lincomb",
                detail: format!("term shapes differ: {:?} vs {:?}", first.shape, t.shape),
            });
        }
    }
    let n = first.numel();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let mut acc = terms[0].0 * terms[0].1.data[i];
        for (c, t) in rest {
            acc += c * t.data[i];
        }
        out[i] = acc;
    }
    check_finite_slice(&out, "lincomb")?;
    let inputs: Vec<&Tensor> = terms.iter().map(|(_, t)| *t).collect();
    let node = maybe_record(&inputs, &out, |tape| {
        let resolved = terms
            .iter()
            .map(|(c, t)| Ok((*c, node_or_constant(tape, t)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Op::LinComb { terms: resolved })
    })?;
    Ok(Tensor { shape: first.shape.clone(), data: out, node })
}

/// Elementwise product of two same-shape tensors.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::Shape {
            op: "mul",
            detail: format!("shapes differ: {:?} vs {:?}", a.shape, b.shape),
        });
    }
    let out: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    check_finite_slice(&out, "mul")?;
    let node = maybe_record(&[a, b], &out, |tape| {
        Ok(Op::Mul { a: node_or_constant(tape, a)?, b: node_or_constant(tape, b)? })
    })?;
    Ok(Tensor { shape: a.shape.clone(), data: out, node })
}

/// Scalar dot product with a constant weight vector.
pub fn weighted_sum(x: &Tensor, weights: &[f64]) -> Result<Tensor> {
    if x.numel() != weights.len() {
        return Err(Error::Shape {
            op: "weighted_sum",
            detail: format!("{} values vs {} weights", x.numel(), weights.len()),
        });
    }
    let mut acc = 0.0;
    for (v, w) in x.data.iter().zip(weights) {
        acc += v * w;
    }
    check_finite_slice(std::slice::from_ref(&acc), "weighted_sum")?;
    let node = maybe_record(&[x], &[acc], |tape| {
        Ok(Op::WeightedSum { x: node_or_constant(tape, x)?, weights: weights.to_vec() })
    })?;
    Ok(Tensor { shape: vec![1], data: vec![acc], node })
}

/// Numerically stable softmax + cross-entropy against a class index:
/// loss = logsumexp(logits) - logits[target].
pub fn softmax_cross_entropy(logits: &Tensor, target: usize) -> Result<Tensor> {
    if logits.shape.len() != 1 || logits.numel() == 0 {
        return Err(Error::Shape {
            op: "softmax_cross_entropy",
            detail: format!("logits must be a nonempty vector, shape is {:?}", logits.shape),
        });
    }
    if target >= logits.numel() {
        return Err(Error::Shape {
            op: "softmax_cross_entropy",
            detail: format!("target {} out of range for {} classes", target, logits.numel()),
        });
    }
    let max = logits.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    let mut probs = vec![0.0; logits.numel()];
    for (p, &z) in probs.iter_mut().zip(&logits.data) {
        *p = (z - max).exp();
        sum += *p;
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
    let loss = max + sum.ln() - logits.data[target];
    check_finite_slice(std::slice::from_ref(&loss), "softmax_cross_entropy")?;
    let node = maybe_record(&[logits], &[loss], |tape| {
        Ok(Op::SoftmaxCrossEntropy {
            logits: node_or_constant(tape, logits)?,
            target,
            probs: probs.clone(),
        })
    })?;
    Ok(Tensor { shape: vec![1], data: vec![loss], node })
}

/// Softmax probabilities of a logit vector (forward only, never recorded).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in out.iter_mut() {
        *p /= sum;
    }
    out
}

/// Select row `row` of a [r, c] table (embedding lookup).
pub fn row_select(table: &Tensor, row: usize) -> Result<Tensor> {
    let (r, c) = match table.shape() {
        [r, c] => (*r, *c),
        other => {
            return Err(Error::Shape {
                op: "row_select",
                detail: format!("table must be rank 2, shape is {:?}", other),
            })
        }
    };
    if row >= r {
        return Err(Error::Shape {
            op: "row_select",
            detail: format!("row {} out of range for {} rows", row, r),
        });
    }
    let out = table.data[row * c..(row + 1) * c].to_vec();
    let node = maybe_record(&[table], &out, |tape| {
        Ok(Op::RowSelect { table: node_or_constant(tape, table)?, row, cols: c })
    })?;
    Ok(Tensor { shape: vec![c], data: out, node })
}

/// Record an opaque block: forward value `value` computed elsewhere from
/// tracked input `x` and the named parameters of `params`, reverse rule
/// supplied by `vjp`. Used to splice a non-taped solve into a taped graph.
pub fn custom_block(
    x: &Tensor,
    params: &ParamSet,
    value: Vec<f64>,
    vjp: Box<dyn CustomVjp>,
) -> Result<Tensor> {
    check_finite_slice(&value, "custom_block")?;
    let shape = vec![value.len()];
    let inputs: Vec<&Tensor> = std::iter::once(x)
        .chain(params.entries.values())
        .collect();
    let node = maybe_record(&inputs, &value, |tape| {
        let x_node = node_or_constant(tape, x)?;
        let resolved = params
            .entries
            .iter()
            .map(|(name, t)| Ok((name.clone(), node_or_constant(tape, t)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Op::Custom { x: x_node, params: resolved, vjp })
    })?;
    Ok(Tensor { shape, data: value, node })
}

// ── ParamSet ─────────────────────────────────────────────────────────────

/// Named parameter collection. Iteration order is always lexicographic by
/// name, which makes flattening (and therefore optimizer state and file
/// layout) deterministic. Shapes are fixed at insertion.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if name.is_empty() {
            return Err(Error::config("parameter name must be nonempty"));
        }
        if self.entries.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name {name:?}")));
        }
        tensor.check_finite("ParamSet::insert")?;
        self.entries.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Tape(format!("unknown parameter {name:?}")))
    }

    /// Replace the values of an existing entry; shape stays fixed.
    pub fn set_data(&mut self, name: &str, data: &[f64]) -> Result<()> {
        let t = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Tape(format!("unknown parameter {name:?}")))?;
        t.set_data(data)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across all entries.
    pub fn total_len(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    /// Entries in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    /// Copy of this set with every entry registered as a named leaf on the
    /// active tape. With no active tape this is a plain clone.
    pub fn tracked(&self) -> ParamSet {
        let entries = self
            .entries
            .iter()
            .map(|(name, t)| {
                let node = with_active(|tape| {
                    let idx = tape.push_leaf(LeafKind::Param(name.clone()), &t.data);
                    NodeRef { tape: tape.id, idx }
                });
                (name.clone(), Tensor { shape: t.shape.clone(), data: t.data.clone(), node })
            })
            .collect();
        ParamSet { entries }
    }

    /// Untracked deep copy (drops any tape references).
    pub fn detached(&self) -> ParamSet {
        let entries = self
            .entries
            .iter()
            .map(|(name, t)| (name.clone(), t.untracked()))
            .collect();
        ParamSet { entries }
    }

    // The on-disk layout is a header (names, shapes, byte offsets) followed
    // by one contiguous payload of little-endian f64 bit patterns, so a
    // save/load round trip is exact even for values like -0.0.

    const MAGIC: &'static [u8; 4] = b"PSB1";

    pub fn write_to(&self, w: &mut impl IoWrite) -> std::io::Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        let mut offset: u64 = 0;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            w.write_all(&offset.to_le_bytes())?;
            offset += (t.numel() * 8) as u64;
        }
        for t in self.entries.values() {
            for &v in &t.data {
                w.write_all(&v.to_bits().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl IoRead) -> Result<ParamSet> {
        let bad = |detail: &str| Error::parse("parameter file", detail);
        let mut buf = Vec::new();
        r.read_to_end(&mut buf).map_err(|e| Error::parse("parameter file", e))?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            let end = pos.checked_add(n).ok_or_else(|| bad("length overflow"))?;
            if end > buf.len() {
                return Err(bad("truncated file"));
            }
            let slice = &buf[*pos..end];
            *pos = end;
            Ok(slice)
        };
        let u32_at = |pos: &mut usize| -> Result<u32> {
            Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
        };
        let u64_at = |pos: &mut usize| -> Result<u64> {
            Ok(u64::from_le_bytes(take(pos, 8)?.try_into().unwrap()))
        };

        if take(&mut pos, 4)? != Self::MAGIC {
            return Err(bad("bad magic"));
        }
        let count = u32_at(&mut pos)? as usize;
        let mut headers = Vec::with_capacity(count);
        let mut expect_offset = 0u64;
        for _ in 0..count {
            let name_len = u32_at(&mut pos)? as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| bad("name is not utf-8"))?;
            let ndim = u32_at(&mut pos)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64_at(&mut pos)? as usize);
            }
            let offset = u64_at(&mut pos)?;
            if offset != expect_offset {
                return Err(bad("payload offsets are not contiguous"));
            }
            let numel: usize = shape.iter().product();
            expect_offset += (numel * 8) as u64;
            headers.push((name, shape, numel));
        }
        let mut set = ParamSet::new();
        for (name, shape, numel) in headers {
            let bytes = take(&mut pos, numel * 8)?;
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
                .collect();
            // Bypass insert(): a stored parameter is allowed to hold whatever
            // bits were saved, finite or not.
            if set.entries.contains_key(&name) {
                return Err(bad("duplicate parameter name"));
            }
            set.entries.insert(name, Tensor { shape, data, node: None });
        }
        if pos != buf.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        self.write_to(&mut out).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ParamSet> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        ParamSet::read_from(&mut bytes.as_slice())
    }
}

// ── Tests ────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t1(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec())
    }

    #[test]
    fn linear_identity_passes_input_through() {
        let w = Tensor::from_vec(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let b = t1(&[0., 0., 0.]);
        let x = t1(&[2.5, -1.0, 4.0]);
        let y = linear(&w, &b, &x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn linear_matches_hand_arithmetic() {
        // [[1, 2], [3, 4]] * [5, 6] + [0.5, -0.5] = [17.5, 38.5]
        let w = Tensor::from_vec(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = t1(&[0.5, -0.5]);
        let x = t1(&[5., 6.]);
        let y = linear(&w, &b, &x).unwrap();
        assert_eq!(y.data(), &[17.5, 38.5]);
    }

    #[test]
    fn linear_agrees_with_triple_loop_oracle() {
        let mut seed = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            // xorshift is plenty for test data
            seed ^= seed << 13;
            seed ^= seed >> 7;
            seed ^= seed << 17;
            (seed >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let (m, n) = (8, 8);
        let w = Tensor::from_vec(vec![m, n], (0..m * n).map(|_| next()).collect()).unwrap();
        let b = t1(&(0..m).map(|_| next()).collect::<Vec<_>>());
        let x = t1(&(0..n).map(|_| next()).collect::<Vec<_>>());
        let y = linear(&w, &b, &x).unwrap();
        for i in 0..m {
            let mut acc = b.data()[i];
            for j in 0..n {
                acc += w.data()[i * n + j] * x.data()[j];
            }
            assert!((y.data()[i] - acc).abs() <= 1e-15, "row {i}: {} vs {acc}", y.data()[i]);
        }
    }

    #[test]
    fn linear_rejects_mismatched_shapes() {
        let w = Tensor::from_vec(vec![2, 3], vec![0.; 6]).unwrap();
        let b = t1(&[0., 0.]);
        let x = t1(&[1., 2.]); // needs 3
        assert!(matches!(linear(&w, &b, &x), Err(Error::Shape { .. })));
    }

    #[test]
    fn activations_hit_known_values() {
        let x = t1(&[0.0, -2.0, 2.0]);
        let tanh = activation(Activation::Tanh, &x).unwrap();
        assert_eq!(tanh.data()[0], 0.0);
        assert!((tanh.data()[2] - 2.0f64.tanh()).abs() < 1e-16);
        let relu = activation(Activation::Relu, &x).unwrap();
        assert_eq!(relu.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn tanh_gradient_matches_finite_differences() {
        let x0 = 0.37;
        let f = |v: f64| -> f64 {
            let x = t1(&[v]);
            activation(Activation::Tanh, &x).unwrap().data()[0]
        };
        let h = 1e-6;
        let fd = (f(x0 + h) - f(x0 - h)) / (2.0 * h);
        let ((y, x), tape) = with_tape(|| {
            let x = t1(&[x0]).tracked();
            (activation(Activation::Tanh, &x).unwrap(), x)
        });
        let grads = tape.backward(&y, 1.0).unwrap();
        let got = grads.input(&x).unwrap().data()[0];
        assert!((got - fd).abs() <= 1e-8, "{got} vs fd {fd}");
    }

    #[test]
    fn concat_stacks_parts_and_routes_gradients() {
        let ((loss, a, b), tape) = with_tape(|| {
            let a = t1(&[1., 2.]).tracked();
            let b = t1(&[3.]).tracked();
            let c = concat(&[&a, &b]).unwrap();
            assert_eq!(c.data(), &[1., 2., 3.]);
            let loss = weighted_sum(&c, &[10., 20., 30.]).unwrap();
            (loss, a, b)
        });
        let grads = tape.backward(&loss, 1.0).unwrap();
        assert_eq!(grads.input(&a).unwrap().data(), &[10., 20.]);
        assert_eq!(grads.input(&b).unwrap().data(), &[30.]);
    }

    #[test]
    fn square_via_mul_has_gradient_two_x() {
        // L = x^2 at x = 3 -> dL/dx = 6.
        let ((loss, x), tape) = with_tape(|| {
            let x = t1(&[3.0]).tracked();
            let sq = mul(&x, &x).unwrap();
            (sq, x)
        });
        let grads = tape.backward(&loss, 1.0).unwrap();
        assert_eq!(grads.input(&x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn constant_loss_yields_zero_gradients() {
        let ((loss, x), tape) = with_tape(|| {
            let x = t1(&[1.5, -2.5]).tracked();
            // Weighted sum with zero weights: value and all gradients are 0.
            let loss = weighted_sum(&x, &[0.0, 0.0]).unwrap();
            (loss, x)
        });
        assert_eq!(loss.data(), &[0.0]);
        let grads = tape.backward(&loss, 1.0).unwrap();
        assert_eq!(grads.input(&x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_ce_uniform_logits_gives_ln_k() {
        let logits = t1(&[0.0; 4]);
        let loss = softmax_cross_entropy(&logits, 2).unwrap();
        assert!((loss.data()[0] - 4.0f64.ln()).abs() <= 1e-15);
    }

    #[test]
    fn softmax_ce_is_stable_for_huge_logits() {
        let logits = t1(&[1000.0, 0.0]);
        let loss = softmax_cross_entropy(&logits, 0).unwrap();
        assert!(loss.data()[0].is_finite());
        // logsumexp(1000, 0) - 1000 = ln(1 + e^-1000), indistinguishable from 0.
        assert!(loss.data()[0] >= 0.0 && loss.data()[0] < 1e-10);
    }

    #[test]
    fn softmax_ce_gradient_is_probs_minus_onehot() {
        let raw = [0.3, -1.2, 0.7];
        let ((loss, logits), tape) = with_tape(|| {
            let logits = t1(&raw).tracked();
            let loss = softmax_cross_entropy(&logits, 1).unwrap();
            (loss, logits)
        });
        let grads = tape.backward(&loss, 1.0).unwrap();
        let probs = softmax(&raw);
        let g = grads.input(&logits).unwrap();
        for j in 0..3 {
            let expect = probs[j] - if j == 1 { 1.0 } else { 0.0 };
            assert!((g.data()[j] - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn row_select_reads_and_scatters() {
        let ((loss, _table), tape) = with_tape(|| {
            let mut p = ParamSet::new();
            p.insert("emb", Tensor::from_vec(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap())
                .unwrap();
            let p = p.tracked();
            let row = row_select(p.get("emb").unwrap(), 1).unwrap();
            assert_eq!(row.data(), &[3., 4.]);
            let loss = weighted_sum(&row, &[1.0, 10.0]).unwrap();
            (loss, p)
        });
        let grads = tape.backward(&loss, 1.0).unwrap();
        let g = grads.param("emb").unwrap();
        assert_eq!(g.data(), &[0., 0., 1., 10., 0., 0.]);
    }

    #[test]
    fn lincomb_accumulates_in_term_order() {
        let a = t1(&[1.0, 2.0]);
        let b = t1(&[10.0, 20.0]);
        let y = lincomb(&[(1.0, &a), (0.5, &b)]).unwrap();
        assert_eq!(y.data(), &[6.0, 12.0]);
    }

    #[test]
    fn ops_outside_a_tape_record_nothing() {
        let x = t1(&[1.0]);
        let y = activation(Activation::Tanh, &x).unwrap();
        assert!(y.node.is_none());
        // And inside a suspended region, tracked inputs go plain too.
        let ((), _tape) = with_tape(|| {
            without_tape(|| {
                let z = t1(&[2.0]).tracked();
                assert!(z.node.is_none());
                let w = mul(&z, &z).unwrap();
                assert!(w.node.is_none());
            });
        });
    }

    #[test]
    fn tensor_from_another_tape_is_rejected() {
        let ((_, stale), tape_a) = with_tape(|| {
            let x = t1(&[1.0]).tracked();
            let y = mul(&x, &x).unwrap();
            (y, x)
        });
        drop(tape_a);
        let (result, _tape_b) = with_tape(|| {
            let other = t1(&[2.0]).tracked();
            mul(&stale, &other)
        });
        assert!(matches!(result, Err(Error::Tape(_))));
    }

    #[test]
    fn nonfinite_values_are_refused() {
        assert!(matches!(
            Tensor::from_vec(vec![1], vec![f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        let w = Tensor::from_vec(vec![1, 1], vec![f64::MAX]).unwrap();
        let b = t1(&[f64::MAX]);
        let x = t1(&[f64::MAX]);
        assert!(matches!(linear(&w, &b, &x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn paramset_iterates_lexicographically() {
        let mut p = ParamSet::new();
        p.insert("w2", Tensor::scalar(2.0)).unwrap();
        p.insert("b1", Tensor::scalar(1.0)).unwrap();
        p.insert("a0", Tensor::scalar(0.0)).unwrap();
        let names: Vec<&str> = p.names().collect();
        assert_eq!(names, ["a0", "b1", "w2"]);
        assert!(p.insert("b1", Tensor::scalar(9.0)).is_err(), "duplicate must fail");
    }

    #[test]
    fn paramset_survives_a_bit_exact_round_trip() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_vec(vec![2, 3], vec![0.1, -0.2, 1e-300, 3.5e12, -0.0, 7.0]).unwrap())
            .unwrap();
        p.insert("b", Tensor::vector(vec![f64::MIN_POSITIVE, 2.0_f64.powi(-1074)])).unwrap();
        let mut bytes = Vec::new();
        p.write_to(&mut bytes).unwrap();
        let q = ParamSet::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(q.len(), 2);
        for (name, t) in p.iter() {
            let u = q.get(name).unwrap();
            assert_eq!(t.shape(), u.shape());
            for (a, b) in t.data().iter().zip(u.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "entry {name}");
            }
        }
    }

    #[test]
    fn paramset_rejects_corrupt_files() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(1.0)).unwrap();
        let mut bytes = Vec::new();
        p.write_to(&mut bytes).unwrap();
        // truncate payload
        let cut = &bytes[..bytes.len() - 4];
        assert!(ParamSet::read_from(&mut &*cut).is_err());
        // bad magic
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(ParamSet::read_from(&mut wrong.as_slice()).is_err());
    }

    #[test]
    fn gradient_flows_through_a_small_mlp() {
        // Two-layer tanh MLP; checks the whole op chain against central
        // differences on every parameter coordinate.
        let weights = [
            ("w1", vec![2usize, 2], vec![0.3, -0.5, 0.8, 0.1]),
            ("b1", vec![2], vec![0.05, -0.02]),
            ("w2", vec![1, 2], vec![0.7, -0.4]),
            ("b2", vec![1], vec![0.01]),
        ];
        let build = |vals: &BTreeMap<String, Vec<f64>>| -> ParamSet {
            let mut p = ParamSet::new();
            for (name, shape, _) in &weights {
                p.insert(name, Tensor::from_vec(shape.clone(), vals[*name].clone()).unwrap())
                    .unwrap();
            }
            p
        };
        let forward = |p: &ParamSet| -> Tensor {
            let x = t1(&[0.4, -0.9]);
            let h = activation(
                Activation::Tanh,
                &linear(p.get("w1").unwrap(), p.get("b1").unwrap(), &x).unwrap(),
            )
            .unwrap();
            let y = linear(p.get("w2").unwrap(), p.get("b2").unwrap(), &h).unwrap();
            softmax_cross_entropy(&concat(&[&y, &Tensor::scalar(0.0)]).unwrap(), 0).unwrap()
        };
        let base: BTreeMap<String, Vec<f64>> = weights
            .iter()
            .map(|(n, _, v)| (n.to_string(), v.clone()))
            .collect();
        let (loss_and_params, tape) = with_tape(|| {
            let p = build(&base).tracked();
            (forward(&p), p)
        });
        let (loss, _tracked) = loss_and_params;
        let grads = tape.backward(&loss, 1.0).unwrap();

        let h = 1e-6;
        for (name, _, vals) in &weights {
            for k in 0..vals.len() {
                let mut up = base.clone();
                up.get_mut(*name).unwrap()[k] += h;
                let mut dn = base.clone();
                dn.get_mut(*name).unwrap()[k] -= h;
                let fd = (forward(&build(&up)).data()[0] - forward(&build(&dn)).data()[0]) / (2.0 * h);
                let got = grads.param(name).unwrap().data()[k];
                let denom = fd.abs().max(1e-8);
                assert!(
                    ((got - fd) / denom).abs() <= 1e-6,
                    "{name}[{k}]: got {got}, fd {fd}"
                );
            }
        }
    }

    proptest! {
        #[test]
        fn backward_is_linear_in_the_seed(vals in proptest::collection::vec(-2.0f64..2.0, 3), scale in 0.25f64..4.0) {
            let run = |seed: f64| -> Vec<f64> {
                let ((loss, x), tape) = with_tape(|| {
                    let x = Tensor::vector(vals.clone()).tracked();
                    let y = activation(Activation::Tanh, &x).unwrap();
                    let loss = weighted_sum(&y, &[1.0, -2.0, 0.5]).unwrap();
                    (loss, x)
                });
                tape.backward(&loss, seed).unwrap().input(&x).unwrap().data().to_vec()
            };
            let g1 = run(1.0);
            let g2 = run(scale);
            for (a, b) in g1.iter().zip(&g2) {
                prop_assert!((a * scale - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn untaped_forward_is_bit_identical_across_replays(vals in proptest::collection::vec(-3.0f64..3.0, 4)) {
            let run = || -> Vec<f64> {
                let x = Tensor::vector(vals.clone());
                let w = Tensor::from_vec(vec![2, 4], vec![0.1, 0.2, -0.3, 0.4, -0.5, 0.6, 0.7, -0.8]).unwrap();
                let b = Tensor::vector(vec![0.01, -0.01]);
                let y = activation(Activation::Tanh, &linear(&w, &b, &x).unwrap()).unwrap();
                y.data().to_vec()
            };
            let a = run();
            let b = run();
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
