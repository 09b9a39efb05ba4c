//! Reverse-mode differentiation over a closed set of array primitives.
//!
//! A [`Tape`] records every primitive applied to [`Var`]s in creation
//! order. [`Tape::backward`] walks the records in exact reverse order and
//! accumulates adjoints. Each node has exactly one producing record; leaves
//! (parameters and constants) are records with no inputs.
//!
//! One tape serves one forward/backward pass and is not shared between
//! threads.

use std::cell::{Ref, RefCell};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};

use super::array::{round_to_precision, DenseArray};
use super::ops::{self, broadcast_binary, gemm, matmul_dims, reduce_to_shape, MatmulDims};

/// Dropout is live only in `Train`; `Eval` makes it the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train { seed: u64 },
    Eval,
}

type Id = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Id, b: Id, ta: bool, tb: bool },
    Add { a: Id, b: Id },
    Sub { a: Id, b: Id },
    Mul { a: Id, b: Id },
    Scale { a: Id, c: f64 },
    Softmax { a: Id },
    LogSoftmax { a: Id },
    LayerNorm { x: Id, gamma: Id, beta: Id, normalized: Vec<f64>, inv_std: Vec<f64> },
    AvgPool { a: Id, axis: usize },
    Gelu { a: Id },
    Reshape { a: Id },
    Permute { a: Id, axes: Vec<usize> },
    Sum { a: Id },
    MaskedFill { a: Id, mask: Vec<bool> },
    Dropout { a: Id, keep_scale: Vec<f64> },
    Gather { a: Id, indices: Vec<usize> },
}

struct Node {
    value: DenseArray,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    mode: Mode,
    rng: RefCell<ChaCha8Rng>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: Id,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new(mode: Mode) -> Self {
        let seed = match mode {
            Mode::Train { seed } => seed,
            Mode::Eval => 0,
        };
        Tape { nodes: RefCell::new(Vec::new()), mode, rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)) }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        matches!(self.mode, Mode::Train { .. })
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: DenseArray, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn needs(&self, ids: &[Id]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// A differentiable input.
    pub fn param(&self, value: DenseArray) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: DenseArray) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn unary(&self, a: Id, f: impl FnOnce(&DenseArray) -> Result<DenseArray>, op: Op) -> Result<Var<'_>> {
        let value = f(&self.nodes.borrow()[a].value)?;
        let needs = self.needs(&[a]);
        Ok(self.push(value, op, needs))
    }

    fn binary(
        &self,
        a: Id,
        b: Id,
        f: impl FnOnce(&DenseArray, &DenseArray) -> Result<DenseArray>,
        op: Op,
    ) -> Result<Var<'_>> {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a].value, &nodes[b].value)?
        };
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, op, needs))
    }

    /// Adjoints of `loss` with respect to every recorded node.
    ///
    /// `loss` must hold exactly one element.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<DenseArray>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(DenseArray::ones(nodes[loss.id].value.shape()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, contribution) in adjoints(&nodes, node, &g)? {
                if !nodes[input].needs_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot => *slot = Some(contribution),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Input adjoints of one record given the adjoint `g` of its output.
fn adjoints(nodes: &[Node], node: &Node, g: &DenseArray) -> Result<Vec<(Id, DenseArray)>> {
    let val = |i: Id| &nodes[i].value;
    let needs = |i: Id| nodes[i].needs_grad;
    let out = match &node.op {
        Op::Leaf => vec![],
        Op::MatMul { a, b, ta, tb } => {
            let (ga, gb) = matmul_adjoint(val(*a), val(*b), *ta, *tb, g, needs(*a), needs(*b))?;
            let mut v = Vec::new();
            if let Some(ga) = ga {
                v.push((*a, ga));
            }
            if let Some(gb) = gb {
                v.push((*b, gb));
            }
            v
        }
        Op::Add { a, b } => vec![
            (*a, reduce_to_shape(g, val(*a).shape())),
            (*b, reduce_to_shape(g, val(*b).shape())),
        ],
        Op::Sub { a, b } => vec![
            (*a, reduce_to_shape(g, val(*a).shape())),
            (*b, reduce_to_shape(g, val(*b).shape()).map(|x| -x)),
        ],
        Op::Mul { a, b } => {
            let mut v = Vec::new();
            if needs(*a) {
                let ga = broadcast_binary(g, val(*b), |x, y| x * y)?;
                v.push((*a, reduce_to_shape(&ga, val(*a).shape())));
            }
            if needs(*b) {
                let gb = broadcast_binary(g, val(*a), |x, y| x * y)?;
                v.push((*b, reduce_to_shape(&gb, val(*b).shape())));
            }
            v
        }
        Op::Scale { a, c } => vec![(*a, g.map(|x| x * c).round())],
        Op::Softmax { a } => {
            let y = &node.value;
            let d = y.last_dim();
            let mut gx = vec![0.0; y.len()];
            for ((yr, gr), out) in y.data().chunks(d).zip(g.data().chunks(d)).zip(gx.chunks_mut(d)) {
                let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                for j in 0..d {
                    out[j] = yr[j] * (gr[j] - dot);
                }
            }
            round_to_precision(&mut gx);
            vec![(*a, DenseArray::new(y.shape(), gx)?)]
        }
        Op::LogSoftmax { a } => {
            let y = &node.value;
            let d = y.last_dim();
            let mut gx = vec![0.0; y.len()];
            for ((yr, gr), out) in y.data().chunks(d).zip(g.data().chunks(d)).zip(gx.chunks_mut(d)) {
                let total: f64 = gr.iter().sum();
                for j in 0..d {
                    out[j] = gr[j] - yr[j].exp() * total;
                }
            }
            round_to_precision(&mut gx);
            vec![(*a, DenseArray::new(y.shape(), gx)?)]
        }
        Op::LayerNorm { x, gamma, beta, normalized, inv_std } => {
            let gam = val(*gamma).data();
            let d = gam.len();
            let rows = g.len() / d;
            let mut gx = vec![0.0; g.len()];
            let mut ggamma = vec![0.0; d];
            let mut gbeta = vec![0.0; d];
            for r in 0..rows {
                let gr = &g.data()[r * d..(r + 1) * d];
                let xh = &normalized[r * d..(r + 1) * d];
                let mut mean_dxh = 0.0;
                let mut mean_dxh_xh = 0.0;
                for j in 0..d {
                    let dxh = gr[j] * gam[j];
                    mean_dxh += dxh;
                    mean_dxh_xh += dxh * xh[j];
                    ggamma[j] += gr[j] * xh[j];
                    gbeta[j] += gr[j];
                }
                mean_dxh /= d as f64;
                mean_dxh_xh /= d as f64;
                for j in 0..d {
                    gx[r * d + j] = inv_std[r] * (gr[j] * gam[j] - mean_dxh - xh[j] * mean_dxh_xh);
                }
            }
            round_to_precision(&mut gx);
            round_to_precision(&mut ggamma);
            round_to_precision(&mut gbeta);
            vec![
                (*x, DenseArray::new(val(*x).shape(), gx)?),
                (*gamma, DenseArray::new(&[d], ggamma)?),
                (*beta, DenseArray::new(&[d], gbeta)?),
            ]
        }
        Op::AvgPool { a, axis } => {
            let shape = val(*a).shape();
            let (outer, n, inner) = ops::axis_blocks(shape, *axis);
            let mut gx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                let src = &g.data()[o * inner..(o + 1) * inner];
                for j in 0..n {
                    let dst = &mut gx[(o * n + j) * inner..(o * n + j + 1) * inner];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = s / n as f64;
                    }
                }
            }
            round_to_precision(&mut gx);
            vec![(*a, DenseArray::new(shape, gx)?)]
        }
        Op::Gelu { a } => {
            let x = val(*a);
            let mut gx: Vec<f64> =
                x.data().iter().zip(g.data()).map(|(&v, &gv)| gv * ops::gelu_derivative(v)).collect();
            round_to_precision(&mut gx);
            vec![(*a, DenseArray::new(x.shape(), gx)?)]
        }
        Op::Reshape { a } => vec![(*a, g.reshape(val(*a).shape())?)],
        Op::Permute { a, axes } => vec![(*a, ops::permute(g, &ops::inverse_permutation(axes))?)],
        Op::Sum { a } => vec![(*a, DenseArray::full(val(*a).shape(), g.data()[0]))],
        Op::MaskedFill { a, mask } => {
            let gx = g.data().iter().zip(mask).map(|(&v, &m)| if m { 0.0 } else { v }).collect();
            vec![(*a, DenseArray::new(g.shape(), gx)?)]
        }
        Op::Dropout { a, keep_scale } => {
            let mut gx: Vec<f64> = g.data().iter().zip(keep_scale).map(|(v, s)| v * s).collect();
            round_to_precision(&mut gx);
            vec![(*a, DenseArray::new(g.shape(), gx)?)]
        }
        Op::Gather { a, indices } => {
            let shape = val(*a).shape();
            let c = shape[1];
            let mut gx = vec![0.0; shape[0] * c];
            for (row, (&idx, &gv)) in indices.iter().zip(g.data()).enumerate() {
                gx[row * c + idx] = gv;
            }
            vec![(*a, DenseArray::new(shape, gx)?)]
        }
    };
    Ok(out)
}

#[allow(clippy::type_complexity)]
fn matmul_adjoint(
    a: &DenseArray,
    b: &DenseArray,
    ta: bool,
    tb: bool,
    g: &DenseArray,
    want_a: bool,
    want_b: bool,
) -> Result<(Option<DenseArray>, Option<DenseArray>)> {
    let (dims, _) = matmul_dims(a.shape(), b.shape(), ta, tb)?;
    let MatmulDims { batch, m, k, n, shared_b } = dims;
    // A shared right operand with an untransposed left one is a single tall product.
    let (batch, m) = if shared_b && !ta { (1, batch * m) } else { (batch, m) };
    let mut ga = want_a.then(|| vec![0.0; a.len()]);
    let mut gb = want_b.then(|| vec![0.0; b.len()]);
    for i in 0..batch {
        let gi = &g.data()[i * m * n..(i + 1) * m * n];
        let ai = &a.data()[i * m * k..(i + 1) * m * k];
        let b_range = if shared_b { 0..k * n } else { i * k * n..(i + 1) * k * n };
        let bi = &b.data()[b_range.clone()];
        if let Some(ga) = ga.as_mut() {
            let dst = &mut ga[i * m * k..(i + 1) * m * k];
            match (ta, tb) {
                (false, false) => gemm(false, true, m, n, k, gi, bi, dst, false),
                (false, true) => gemm(false, false, m, n, k, gi, bi, dst, false),
                (true, false) => gemm(false, true, k, n, m, bi, gi, dst, false),
                (true, true) => gemm(true, true, k, n, m, bi, gi, dst, false),
            }
        }
        if let Some(gb) = gb.as_mut() {
            let dst = &mut gb[b_range];
            match (ta, tb) {
                (false, false) => gemm(true, false, k, m, n, ai, gi, dst, shared_b),
                (true, false) => gemm(false, false, k, m, n, ai, gi, dst, shared_b),
                (false, true) => gemm(true, false, n, m, k, gi, ai, dst, shared_b),
                (true, true) => gemm(true, true, n, m, k, gi, ai, dst, shared_b),
            }
        }
    }
    let ga = ga.map(|d| DenseArray::new(a.shape(), d)).transpose()?;
    let gb = gb.map(|d| DenseArray::new(b.shape(), d)).transpose()?;
    Ok((ga.map(DenseArray::round), gb.map(DenseArray::round)))
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, DenseArray> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    fn check_same_tape(&self, other: &Var<'_>) {
        assert!(std::ptr::eq(self.tape, other.tape), "variables from different tapes");
    }

    fn mm(self, other: Var<'t>, ta: bool, tb: bool) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        self.tape.binary(
            self.id,
            other.id,
            |a, b| Ok(ops::matmul_general(a, b, ta, tb)?.round()),
            Op::MatMul { a: self.id, b: other.id, ta, tb },
        )
    }

    /// Product over the last two axes; `other` may be a shared rank-2 matrix.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.mm(other, false, false)
    }

    /// `self · otherᵀ` over the last two axes.
    pub fn matmul_nt(self, other: Var<'t>) -> Result<Var<'t>> {
        self.mm(other, false, true)
    }

    /// `selfᵀ · other` over the last two axes.
    pub fn matmul_tn(self, other: Var<'t>) -> Result<Var<'t>> {
        self.mm(other, true, false)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        self.tape.binary(
            self.id,
            other.id,
            |a, b| broadcast_binary(a, b, |x, y| x + y),
            Op::Add { a: self.id, b: other.id },
        )
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        self.tape.binary(
            self.id,
            other.id,
            |a, b| broadcast_binary(a, b, |x, y| x - y),
            Op::Sub { a: self.id, b: other.id },
        )
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        self.tape.binary(
            self.id,
            other.id,
            |a, b| broadcast_binary(a, b, |x, y| x * y),
            Op::Mul { a: self.id, b: other.id },
        )
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.tape.unary(self.id, |a| Ok(a.map(|x| x * c).round()), Op::Scale { a: self.id, c })
    }

    pub fn softmax(self) -> Result<Var<'t>> {
        self.tape.unary(self.id, ops::softmax_lastaxis, Op::Softmax { a: self.id })
    }

    pub fn log_softmax(self) -> Result<Var<'t>> {
        self.tape.unary(self.id, ops::log_softmax_lastaxis, Op::LogSoftmax { a: self.id })
    }

    pub fn layernorm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let tape = self.tape;
        let (value, cache) = {
            let nodes = tape.nodes.borrow();
            ops::layernorm_with_cache(&nodes[self.id].value, &nodes[gamma.id].value, &nodes[beta.id].value, eps)?
        };
        let needs = tape.needs(&[self.id, gamma.id, beta.id]);
        let op = Op::LayerNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            normalized: cache.normalized,
            inv_std: cache.inv_std,
        };
        Ok(tape.push(value, op, needs))
    }

    pub fn avgpool(self, axis: usize) -> Result<Var<'t>> {
        self.tape.unary(self.id, |a| ops::avgpool_axis(a, axis), Op::AvgPool { a: self.id, axis })
    }

    pub fn gelu(self) -> Result<Var<'t>> {
        self.tape.unary(self.id, |a| Ok(ops::gelu(a)), Op::Gelu { a: self.id })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        self.tape.unary(self.id, |a| a.reshape(shape), Op::Reshape { a: self.id })
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        self.tape.unary(self.id, |a| ops::permute(a, axes), Op::Permute { a: self.id, axes: axes.to_vec() })
    }

    /// Sum of all elements, as a `[1]` array.
    pub fn sum(self) -> Result<Var<'t>> {
        self.tape.unary(self.id, |a| Ok(DenseArray::scalar(a.sum()).round()), Op::Sum { a: self.id })
    }

    /// Replaces entries where `mask` is true with `fill` (which may be `-inf`).
    pub fn masked_fill(self, mask: &[bool], fill: f64) -> Result<Var<'t>> {
        if mask.len() != self.value().len() {
            return dim_err(format!("mask length {} for {} elements", mask.len(), self.value().len()));
        }
        self.tape.unary(
            self.id,
            |a| {
                let data = a.data().iter().zip(mask).map(|(&v, &m)| if m { fill } else { v }).collect();
                DenseArray::new(a.shape(), data)
            },
            Op::MaskedFill { a: self.id, mask: mask.to_vec() },
        )
    }

    /// Inverted dropout drawn from the tape's seeded stream; identity in eval mode.
    pub fn dropout(self, p: f64) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Validation(format!("dropout rate {p} outside [0, 1)")));
        }
        if !self.tape.is_training() || p == 0.0 {
            return Ok(self);
        }
        let n = self.value().len();
        let keep = 1.0 / (1.0 - p);
        let keep_scale: Vec<f64> = {
            let mut rng = self.tape.rng.borrow_mut();
            (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect()
        };
        let scales = keep_scale.clone();
        self.tape.unary(
            self.id,
            move |a| {
                let data = a.data().iter().zip(&scales).map(|(v, s)| v * s).collect();
                Ok(DenseArray::new(a.shape(), data)?.round())
            },
            Op::Dropout { a: self.id, keep_scale },
        )
    }

    /// Picks `self[row, indices[row]]` from a `[rows, classes]` array.
    pub fn gather(self, indices: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 || shape[0] != indices.len() || indices.iter().any(|&i| i >= shape[1]) {
            return dim_err(format!("gather of {} indices from {shape:?}", indices.len()));
        }
        self.tape.unary(
            self.id,
            |a| {
                let c = a.shape()[1];
                let data = indices.iter().enumerate().map(|(r, &i)| a.data()[r * c + i]).collect();
                DenseArray::from_vec(data)
            },
            Op::Gather { a: self.id, indices: indices.to_vec() },
        )
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<DenseArray>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&DenseArray> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Adjoint of `v`, or zeros when no path reaches it.
    pub fn wrt(&self, v: Var<'_>) -> DenseArray {
        self.get(v).cloned().unwrap_or_else(|| DenseArray::zeros(&v.shape()))
    }
}
