//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]: the output
//! value plus a backward rule. [`Var::backward`] replays the rules in reverse
//! order. Parameters enter the tape through [`Tape::param`], keyed by the
//! address of the borrowed [`Tensor`], so a parameter used twice in one
//! forward pass maps to one node and its gradients add up. The tape keeps
//! the value seen at first registration. Parameters must stay in place
//! between the forward pass and [`Tape::write_grad`].

use std::borrow::Cow;
use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::math::{exp_expm1_unchecked, EXP_RANGE};
use crate::tensor::{
    broadcast_shape, broadcast_strides, for_each_broadcast, reduce_to_shape, repeated_block,
    strides, Tensor,
};

/// Read access to node values from inside a backward rule.
pub struct Values<'a>(&'a [Node]);

impl Values<'_> {
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.0[id.0].value
    }
}

/// Gradient sink handed to backward rules.
pub struct Grads<'a> {
    slots: &'a mut [Option<Vec<f64>>],
    nodes: &'a [Node],
}

impl Grads<'_> {
    pub fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].value.requires_grad
    }

    pub fn add(&mut self, id: NodeId, g: &[f64]) {
        if !self.wants(id) {
            return;
        }
        match &mut self.slots[id.0] {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    pub fn add_owned(&mut self, id: NodeId, g: Vec<f64>) {
        if !self.wants(id) {
            return;
        }
        match &mut self.slots[id.0] {
            Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, v)| *b += v),
            slot @ None => *slot = Some(g),
        }
    }
}

type BackwardFn = Box<dyn Fn(&Values<'_>, &[f64], &mut Grads<'_>)>;

pub struct Node {
    value: Tensor,
    backward: Option<BackwardFn>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<usize, NodeId>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
    tracking: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("tracking", &self.tracking)
            .finish()
    }
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, {:?})", self.id.0, self.shape())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Neg,
    Exp,
    Reciprocal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Softplus,
    Silu,
    Gelu,
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            grads: RefCell::new(Vec::new()),
            tracking: true,
        }
    }

    /// A tape that records values only; nothing is differentiable.
    pub fn inference() -> Self {
        Tape {
            tracking: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, backward: Option<BackwardFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, backward });
        Var {
            tape: self,
            id: NodeId(nodes.len() - 1),
        }
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        let mut t = t;
        t.requires_grad = false;
        t.grad = None;
        self.push(t, None)
    }

    /// Leaf input. Differentiable iff `t.requires_grad` and the tape tracks.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        let mut t = t;
        t.requires_grad &= self.tracking;
        t.grad = None;
        self.push(t, None)
    }

    /// Registers a parameter. Repeated calls with the same tensor return the
    /// same node.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        let key = t as *const Tensor as usize;
        if let Some(&id) = self.params.borrow().get(&key) {
            return Var { tape: self, id };
        }
        let v = self.leaf(t.clone());
        self.params.borrow_mut().insert(key, v.id);
        v
    }

    /// Adds the gradient collected for parameter `t` into `t.grad`.
    /// Returns false when `t` was not used on this tape or got no gradient.
    pub fn write_grad(&self, t: &mut Tensor) -> bool {
        let key = t as *const Tensor as usize;
        let Some(&id) = self.params.borrow().get(&key) else {
            return false;
        };
        match self.grads.borrow().get(id.0) {
            Some(Some(g)) => {
                t.accumulate_grad(g);
                true
            }
            _ => false,
        }
    }

    /// Gradient collected for parameter `t`, if any.
    pub fn param_grad(&self, t: &Tensor) -> Option<Vec<f64>> {
        let key = t as *const Tensor as usize;
        let id = *self.params.borrow().get(&key)?;
        self.grads.borrow().get(id.0)?.clone()
    }

    /// Records an operation with a hand-written backward rule. `backward`
    /// receives the output gradient and must add input gradients to the sink.
    pub fn custom<'t, F>(&'t self, inputs: &[Var<'t>], value: Tensor, backward: F) -> Var<'t>
    where
        F: Fn(&Values<'_>, &[f64], &mut Grads<'_>) + 'static,
    {
        self.record(inputs, value, |_| backward)
    }

    /// Whether an op over `inputs` will be recorded for differentiation.
    pub fn tracks(&self, inputs: &[Var<'_>]) -> bool {
        self.tracking && {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id.0].value.requires_grad)
        }
    }

    /// Like [`Tape::custom`], but the rule is built from the id the output
    /// node will get, so it can read its own forward value.
    pub fn record<'t, F>(
        &'t self,
        inputs: &[Var<'t>],
        value: Tensor,
        make: impl FnOnce(NodeId) -> F,
    ) -> Var<'t>
    where
        F: Fn(&Values<'_>, &[f64], &mut Grads<'_>) + 'static,
    {
        let needs = self.tracks(inputs);
        let mut value = value;
        value.requires_grad = needs;
        value.grad = None;
        let out = NodeId(self.len());
        self.push(value, needs.then(|| Box::new(make(out)) as BackwardFn))
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::Axis {
                axis,
                rank: base.len(),
            });
        }
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape()).collect();
        for s in &shapes[1..] {
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let widths: Vec<usize> = shapes.iter().map(|s| s[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        {
            let nodes = self.nodes.borrow();
            for o in 0..outer {
                for (p, &w) in parts.iter().zip(&widths) {
                    let d = nodes[p.id.0].value.data();
                    out.extend_from_slice(&d[o * w..(o + 1) * w]);
                }
            }
        }
        let mut shape = base.clone();
        shape[axis] = shapes.iter().map(|s| s[axis]).sum();
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        Ok(
            self.custom(parts, Tensor::from_parts(shape, out), move |_, g, grads| {
                let mut start = 0;
                for (&id, &w) in ids.iter().zip(&widths) {
                    if grads.wants(id) {
                        let mut gi = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            let base = o * total + start;
                            gi.extend_from_slice(&g[base..base + w]);
                        }
                        grads.add_owned(id, gi);
                    }
                    start += w;
                }
            }),
        )
    }

    /// Dispatches one of the elementwise operations; `b` is required for
    /// the binary ones.
    pub fn elementwise<'t>(
        &'t self,
        op: Elementwise,
        a: Var<'t>,
        b: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        let rhs = || b.ok_or_else(|| Error::invalid(format!("{op:?} needs two operands")));
        Ok(match op {
            Elementwise::Add => a.add(rhs()?)?,
            Elementwise::Sub => a.sub(rhs()?)?,
            Elementwise::Mul => a.mul(rhs()?)?,
            Elementwise::Neg => a.neg(),
            Elementwise::Exp => a.exp(),
            Elementwise::Reciprocal => a.reciprocal(),
        })
    }

    /// Runs reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id.0].value;
        if root.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        let mut slots: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if !root.requires_grad {
            *self.grads.borrow_mut() = slots;
            return Ok(());
        }
        slots[loss.id.0] = Some(vec![1.0]);
        let mut kept: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        for i in (0..=loss.id.0).rev() {
            let Some(g) = slots[i].take() else { continue };
            match &nodes[i].backward {
                Some(rule) => {
                    let values = Values(&nodes);
                    let mut sink = Grads {
                        slots: &mut slots,
                        nodes: &nodes,
                    };
                    rule(&values, &g, &mut sink);
                }
                None => kept[i] = Some(g),
            }
        }
        *self.grads.borrow_mut() = kept;
        Ok(())
    }

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads.get(v.id.0)?.as_ref()?;
        Some(Tensor::from_parts(v.shape(), g.clone()))
    }
}

fn expand(t: &Tensor, dst: &[usize]) -> Vec<f64> {
    if t.shape() == dst {
        return t.data().to_vec();
    }
    if let Some(len) = repeated_block(t.shape(), dst) {
        return t.data().repeat(dst.iter().product::<usize>() / len.max(1));
    }
    let st = broadcast_strides(t.shape(), dst);
    let src = t.data();
    let mut out = vec![0.0; dst.iter().product()];
    for_each_broadcast(dst, &st, |i, o| out[i] = src[o]);
    out
}

/// `t`'s data broadcast to `dst`, borrowed when no copy is needed.
fn expanded<'a>(t: &'a Tensor, dst: &[usize]) -> Cow<'a, [f64]> {
    if t.shape() == dst {
        Cow::Borrowed(t.data())
    } else {
        Cow::Owned(expand(t, dst))
    }
}

/// `e^z` for `z ≤ 0`, saturating below `-EXP_RANGE`.
#[inline(always)]
fn exp_nonpositive(z: f64) -> f64 {
    exp_expm1_unchecked(z.max(-EXP_RANGE)).0
}

#[inline(always)]
fn sigmoid(x: f64) -> f64 {
    let e = exp_nonpositive(-x.abs());
    let s = 1.0 / (1.0 + e);
    if x >= 0.0 {
        s
    } else {
        e * s
    }
}

/// `ln(1 + e^x)`, returning `x` itself above 30.
#[inline(always)]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + exp_nonpositive(-x.abs()).ln_1p()
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline(always)]
fn gelu_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

#[inline(always)]
fn gelu(x: f64) -> f64 {
    x * gelu_cdf(x)
}

#[inline(always)]
fn gelu_grad(x: f64) -> f64 {
    gelu_cdf(x) + x * FRAC_1_SQRT_2PI * exp_nonpositive(-0.5 * x * x)
}

#[inline(always)]
fn activation_value(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Softplus => softplus(x),
        Activation::Silu => x * sigmoid(x),
        Activation::Gelu => gelu(x),
        Activation::Relu => x.max(0.0),
        Activation::Tanh => x.tanh(),
        Activation::Sigmoid => sigmoid(x),
    }
}

#[inline(always)]
fn activation_derivative(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Softplus => sigmoid(x),
        Activation::Silu => {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        }
        Activation::Gelu => gelu_grad(x),
        Activation::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Tanh => 1.0 - x.tanh().powi(2),
        Activation::Sigmoid => {
            let s = sigmoid(x);
            s * (1.0 - s)
        }
    }
}

/// Applies `f(kind, ·)` with the `match` hoisted out of the loop.
#[inline(always)]
fn map_activation(kind: Activation, xs: &[f64], f: impl Fn(Activation, f64) -> f64) -> Vec<f64> {
    macro_rules! each {
        ($($k:ident),*) => {
            match kind {
                $(Activation::$k => xs.iter().map(|&x| f(Activation::$k, x)).collect(),)*
            }
        };
    }
    each!(Softplus, Silu, Gelu, Relu, Tanh, Sigmoid)
}

/// Scalar forward and derivative of an activation.
pub fn activation_scalar(kind: Activation, x: f64) -> (f64, f64) {
    (activation_value(kind, x), activation_derivative(kind, x))
}

fn normalize_axes(axes: &[usize], rank: usize) -> Result<Vec<bool>> {
    let mut mask = vec![false; rank];
    for &a in axes {
        if a >= rank {
            return Err(Error::Axis { axis: a, rank });
        }
        mask[a] = true;
    }
    Ok(mask)
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id.0].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn to_tensor(&self) -> Tensor {
        let mut t = self.value().clone();
        t.requires_grad = false;
        t
    }

    pub fn requires_grad(&self) -> bool {
        self.value().requires_grad
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(*self)
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    fn check_same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands live on different tapes"
        );
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        back: fn(g: f64, a: f64, b: f64) -> (f64, f64),
    ) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        let (sa, sb) = (self.shape(), other.shape());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| Error::shape(name, &sa, &sb))?;
        let data: Vec<f64> = {
            let (a, b) = (self.value(), other.value());
            let (ea, eb) = (expanded(&a, &out_shape), expanded(&b, &out_shape));
            ea.iter().zip(eb.iter()).map(|(&x, &y)| f(x, y)).collect()
        };
        let (ia, ib) = (self.id, other.id);
        let shape_c = out_shape.clone();
        Ok(self.tape.custom(
            &[self, other],
            Tensor::from_parts(out_shape, data),
            move |vals, g, grads| {
                let (a, b) = (vals.get(ia), vals.get(ib));
                let (ea, eb) = (expanded(a, &shape_c), expanded(b, &shape_c));
                let side = |pick: fn((f64, f64)) -> f64| -> Vec<f64> {
                    g.iter()
                        .zip(ea.iter().zip(eb.iter()))
                        .map(|(&g, (&x, &y))| pick(back(g, x, y)))
                        .collect()
                };
                if grads.wants(ia) {
                    let ga = side(|p| p.0);
                    grads.add_owned(
                        ia,
                        if a.shape() == shape_c.as_slice() {
                            ga
                        } else {
                            reduce_to_shape(&ga, &shape_c, a.shape())
                        },
                    );
                }
                if grads.wants(ib) {
                    let gb = side(|p| p.1);
                    grads.add_owned(
                        ib,
                        if b.shape() == shape_c.as_slice() {
                            gb
                        } else {
                            reduce_to_shape(&gb, &shape_c, b.shape())
                        },
                    );
                }
            },
        ))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, |g, _, _| (g, g))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, |g, _, _| (g, -g))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, |g, a, b| (g * b, g * a))
    }

    /// Elementwise map with a derivative expressed in terms of input `x`
    /// and output `y`.
    fn unary(self, f: impl Fn(f64) -> f64, df: fn(x: f64, y: f64) -> f64) -> Var<'t> {
        let out = self.value().map(f);
        let src = self.id;
        self.tape.record(&[self], out, |dst| {
            move |vals: &Values<'_>, g: &[f64], grads: &mut Grads<'_>| {
                let x = vals.get(src).data();
                let y = vals.get(dst).data();
                let gi: Vec<f64> = (0..g.len()).map(|i| g[i] * df(x[i], y[i])).collect();
                grads.add_owned(src, gi);
            }
        })
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(|x| -x, |_, _| -1.0)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn reciprocal(self) -> Var<'t> {
        self.unary(|x| 1.0 / x, |_, y| -y * y)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let out = self.value().map(|x| c * x);
        let src = self.id;
        self.tape.custom(&[self], out, move |_, g, grads| {
            grads.add_owned(src, g.iter().map(|v| c * v).collect());
        })
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let out = self.value().map(|x| x + c);
        let src = self.id;
        self.tape
            .custom(&[self], out, move |_, g, grads| grads.add(src, g))
    }

    pub fn activation(self, kind: Activation) -> Var<'t> {
        if kind == Activation::Gelu {
            return self.gelu_cached();
        }
        let out = {
            let v = self.value();
            Tensor::from_parts(
                v.shape().to_vec(),
                map_activation(kind, v.data(), activation_value),
            )
        };
        let src = self.id;
        self.tape.custom(&[self], out, move |vals, g, grads| {
            let mut gi = map_activation(kind, vals.get(src).data(), activation_derivative);
            gi.iter_mut().zip(g).for_each(|(d, g)| *d *= g);
            grads.add_owned(src, gi);
        })
    }

    pub fn softplus(self) -> Var<'t> {
        self.activation(Activation::Softplus)
    }

    pub fn silu(self) -> Var<'t> {
        self.activation(Activation::Silu)
    }

    pub fn gelu(self) -> Var<'t> {
        self.activation(Activation::Gelu)
    }

    fn gelu_cached(self) -> Var<'t> {
        let (out, cdf) = {
            let v = self.value();
            let cdf: Vec<f64> = v.data().iter().map(|&x| gelu_cdf(x)).collect();
            let out = v.data().iter().zip(&cdf).map(|(x, c)| x * c).collect();
            (Tensor::from_parts(v.shape().to_vec(), out), cdf)
        };
        let src = self.id;
        self.tape.custom(&[self], out, move |vals, g, grads| {
            let x = vals.get(src).data();
            let gi = x
                .iter()
                .zip(&cdf)
                .zip(g)
                .map(|((&x, &c), &g)| g * (c + x * FRAC_1_SQRT_2PI * exp_nonpositive(-0.5 * x * x)))
                .collect();
            grads.add_owned(src, gi);
        })
    }

    pub fn relu(self) -> Var<'t> {
        self.activation(Activation::Relu)
    }

    pub fn tanh(self) -> Var<'t> {
        self.activation(Activation::Tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.activation(Activation::Sigmoid)
    }

    /// Batched matrix product over the last two axes with broadcast leading
    /// axes.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let p = sb[sb.len() - 1];
        let (lead_a, lead_b) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let lead =
            broadcast_shape(lead_a, lead_b).ok_or_else(|| Error::shape("matmul", &sa, &sb))?;
        let pairs = batch_offsets(lead_a, lead_b, &lead);
        let mut out = vec![0.0; pairs.len() * m * p];
        {
            let (a, b) = (self.value(), other.value());
            for (bi, &(oa, ob)) in pairs.iter().enumerate() {
                gemm(
                    m,
                    k,
                    p,
                    &a.data()[oa * m * k..],
                    (k, 1),
                    &b.data()[ob * k * p..],
                    (p, 1),
                    &mut out[bi * m * p..],
                    (p, 1),
                    false,
                );
            }
        }
        let mut shape = lead.clone();
        shape.extend([m, p]);
        let (ia, ib) = (self.id, other.id);
        Ok(self.tape.custom(
            &[self, other],
            Tensor::from_parts(shape, out),
            move |vals, g, grads| {
                let (a, b) = (vals.get(ia), vals.get(ib));
                if grads.wants(ia) {
                    let mut ga = vec![0.0; a.numel()];
                    for (bi, &(oa, ob)) in pairs.iter().enumerate() {
                        // dA = dC · Bᵀ
                        gemm(
                            m,
                            p,
                            k,
                            &g[bi * m * p..],
                            (p, 1),
                            &b.data()[ob * k * p..],
                            (1, p),
                            &mut ga[oa * m * k..],
                            (k, 1),
                            true,
                        );
                    }
                    grads.add_owned(ia, ga);
                }
                if grads.wants(ib) {
                    let mut gb = vec![0.0; b.numel()];
                    for (bi, &(oa, ob)) in pairs.iter().enumerate() {
                        // dB = Aᵀ · dC
                        gemm(
                            k,
                            m,
                            p,
                            &a.data()[oa * m * k..],
                            (1, k),
                            &g[bi * m * p..],
                            (p, 1),
                            &mut gb[ob * k * p..],
                            (p, 1),
                            true,
                        );
                    }
                    grads.add_owned(ib, gb);
                }
            },
        ))
    }

    pub fn reduce(self, kind: Reduce, axes: &[usize], keep_dims: bool) -> Result<Var<'t>> {
        let shape = self.shape();
        let mask = normalize_axes(axes, shape.len())?;
        let kept: Vec<usize> = shape
            .iter()
            .zip(&mask)
            .map(|(&n, &m)| if m { 1 } else { n })
            .collect();
        let count: usize = shape
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(&n, _)| n)
            .product();
        let factor = match kind {
            Reduce::Sum => 1.0,
            Reduce::Mean => 1.0 / count.max(1) as f64,
        };
        let mut data = reduce_to_shape(self.value().data(), &shape, &kept);
        if factor != 1.0 {
            data.iter_mut().for_each(|v| *v *= factor);
        }
        let out_shape = if keep_dims {
            kept.clone()
        } else {
            shape
                .iter()
                .zip(&mask)
                .filter(|(_, &m)| !m)
                .map(|(&n, _)| n)
                .collect()
        };
        let src = self.id;
        Ok(self.tape.custom(
            &[self],
            Tensor::from_parts(out_shape, data),
            move |_, g, grads| {
                let gk = Tensor::from_parts(kept.clone(), g.iter().map(|v| v * factor).collect());
                grads.add_owned(src, expand(&gk, &shape));
            },
        ))
    }

    pub fn sum(self, axes: &[usize], keep_dims: bool) -> Result<Var<'t>> {
        self.reduce(Reduce::Sum, axes, keep_dims)
    }

    pub fn mean(self, axes: &[usize], keep_dims: bool) -> Result<Var<'t>> {
        self.reduce(Reduce::Mean, axes, keep_dims)
    }

    pub fn sum_all(self) -> Var<'t> {
        let axes: Vec<usize> = (0..self.value().rank()).collect();
        self.sum(&axes, false).expect("all axes are valid")
    }

    pub fn mean_all(self) -> Var<'t> {
        let axes: Vec<usize> = (0..self.value().rank()).collect();
        self.mean(&axes, false).expect("all axes are valid")
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape.to_vec())?;
        let src = self.id;
        Ok(self
            .tape
            .custom(&[self], out, move |_, g, grads| grads.add(src, g)))
    }

    /// General axis permutation; `perm[i]` is the source axis of output axis `i`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::invalid(format!(
                "bad permutation {perm:?} for shape {shape:?}"
            )));
        }
        let src_st = strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let read_st: Vec<usize> = perm.iter().map(|&p| src_st[p]).collect();
        let mut data = vec![0.0; self.value().numel()];
        {
            let v = self.value();
            let x = v.data();
            for_each_broadcast(&out_shape, &read_st, |i, o| data[i] = x[o]);
        }
        let src = self.id;
        let out_c = out_shape.clone();
        Ok(self.tape.custom(
            &[self],
            Tensor::from_parts(out_shape, data),
            move |_, g, grads| {
                let mut gi = vec![0.0; g.len()];
                for_each_broadcast(&out_c, &read_st, |i, o| gi[o] += g[i]);
                grads.add_owned(src, gi);
            },
        ))
    }

    /// Swaps two axes.
    pub fn transpose(self, a: usize, b: usize) -> Result<Var<'t>> {
        let rank = self.value().rank();
        if a >= rank || b >= rank {
            return Err(Error::Axis {
                axis: a.max(b),
                rank,
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Keeps indices `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Axis {
                axis,
                rank: shape.len(),
            });
        }
        if start > end || end > shape[axis] {
            return Err(Error::invalid(format!(
                "slice {start}..{end} out of bounds for axis {axis} of {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let (full, part) = (shape[axis] * inner, (end - start) * inner);
        let mut data = Vec::with_capacity(outer * part);
        {
            let v = self.value();
            for o in 0..outer {
                let b = o * full + start * inner;
                data.extend_from_slice(&v.data()[b..b + part]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = end - start;
        let src = self.id;
        let total: usize = shape.iter().product();
        Ok(self.tape.custom(
            &[self],
            Tensor::from_parts(out_shape, data),
            move |_, g, grads| {
                let mut gi = vec![0.0; total];
                for o in 0..outer {
                    let b = o * full + start * inner;
                    gi[b..b + part].copy_from_slice(&g[o * part..(o + 1) * part]);
                }
                grads.add_owned(src, gi);
            },
        ))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let own = self.shape();
        if broadcast_shape(&own, shape).as_deref() != Some(shape) {
            return Err(Error::shape("broadcast_to", &own, shape));
        }
        let data = expand(&self.value(), shape);
        let src = self.id;
        let dst = shape.to_vec();
        Ok(self.tape.custom(
            &[self],
            Tensor::from_parts(dst.clone(), data),
            move |_, g, grads| {
                grads.add_owned(src, reduce_to_shape(g, &dst, &own));
            },
        ))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Var<'t> {
        let shape = self.shape();
        let width = *shape.last().expect("log_softmax needs rank >= 1");
        let mut out = self.value().data().to_vec();
        for row in out.chunks_mut(width) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let src = self.id;
        self.tape
            .record(&[self], Tensor::from_parts(shape, out), |dst| {
                move |vals: &Values<'_>, g: &[f64], grads: &mut Grads<'_>| {
                    let y = vals.get(dst).data();
                    let mut gi = vec![0.0; g.len()];
                    for ((gr, yr), out) in g
                        .chunks(width)
                        .zip(y.chunks(width))
                        .zip(gi.chunks_mut(width))
                    {
                        let s: f64 = gr.iter().sum();
                        for j in 0..width {
                            out[j] = gr[j] - yr[j].exp() * s;
                        }
                    }
                    grads.add_owned(src, gi);
                }
            })
    }
}

/// Pairs of (a, b) batch offsets, in matrices, for every index of the
/// broadcast leading shape.
fn batch_offsets(lead_a: &[usize], lead_b: &[usize], lead: &[usize]) -> Vec<(usize, usize)> {
    let n: usize = lead.iter().product();
    let mut ao = vec![0; n];
    let mut bo = vec![0; n];
    for_each_broadcast(lead, &broadcast_strides(lead_a, lead), |i, o| ao[i] = o);
    for_each_broadcast(lead, &broadcast_strides(lead_b, lead), |i, o| bo[i] = o);
    ao.into_iter().zip(bo).collect()
}

/// `c (+)= a · b` with explicit (row, column) strides for every operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: usize, cc: usize, rs: usize, cs: usize| (r - 1) * rs + (cc - 1) * cs;
    if k > 0 {
        assert!(a.len() > last(m, k, rsa, csa) && b.len() > last(k, n, rsb, csb));
    }
    assert!(c.len() > last(m, n, rsc, csc));
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: every index touched by the kernel is bounded by the asserts above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}
