//! Parameterized building blocks: linear maps, layer norm, causal depthwise
//! convolution, the position-wise channel MLP, embeddings and dropout.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{gemm, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Visits every trainable tensor under a dotted name.
pub trait Parameters {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn normal_tensor<R: Rng + ?Sized>(shape: Vec<usize>, std: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    Tensor::from_fn(shape, |_| dist.sample(rng)).with_grad()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl LinearParams {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::invalid(format!(
                "linear weight must be 2-D, got {:?}",
                weight.shape()
            )));
        }
        if let Some(b) = &bias {
            if b.shape() != [weight.shape()[0]] {
                return Err(Error::shape("linear bias", weight.shape(), b.shape()));
            }
        }
        Ok(LinearParams {
            weight: weight.with_grad(),
            bias: bias.map(Tensor::with_grad),
        })
    }

    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, bias: bool, rng: &mut R) -> Self {
        LinearParams {
            weight: normal_tensor(vec![output, input], INIT_STD, rng),
            bias: bias.then(|| Tensor::zeros(vec![output]).with_grad()),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }
}

impl Parameters for LinearParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

/// `y = x · weightᵀ + bias` over the last axis of `x`.
pub fn linear<'t>(x: Var<'t>, p: &LinearParams) -> Result<Var<'t>> {
    let tape = x.tape();
    let w = tape.param(&p.weight);
    let b = p.bias.as_ref().map(|b| tape.param(b));
    linear_vars(x, w, b)
}

/// [`linear`] with the weight and bias already on the tape.
pub fn linear_vars<'t>(x: Var<'t>, w: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
    let tape = x.tape();
    let xs = x.shape();
    let ws = w.shape();
    let (out_f, in_f) = (ws[0], ws[1]);
    if xs.last() != Some(&in_f) {
        return Err(Error::shape("linear", &xs, &ws));
    }
    let rows = x.value().numel() / in_f;
    let mut y = vec![0.0; rows * out_f];
    {
        let xv = x.value();
        let wv = w.value();
        gemm(
            rows,
            in_f,
            out_f,
            xv.data(),
            (in_f, 1),
            wv.data(),
            (1, in_f),
            &mut y,
            (out_f, 1),
            false,
        );
        if let Some(b) = &b {
            let bv = b.value();
            for row in y.chunks_mut(out_f) {
                row.iter_mut().zip(bv.data()).for_each(|(y, b)| *y += b);
            }
        }
    }
    let mut shape = xs.clone();
    *shape.last_mut().unwrap() = out_f;
    let (ix, iw, ib) = (x.id(), w.id(), b.map(|b| b.id()));
    let mut inputs = vec![x, w];
    inputs.extend(b);
    Ok(tape.custom(
        &inputs,
        Tensor::from_parts(shape, y),
        move |vals, g, grads| {
            if grads.wants(ix) {
                let mut gx = vec![0.0; rows * in_f];
                gemm(
                    rows,
                    out_f,
                    in_f,
                    g,
                    (out_f, 1),
                    vals.get(iw).data(),
                    (in_f, 1),
                    &mut gx,
                    (in_f, 1),
                    false,
                );
                grads.add_owned(ix, gx);
            }
            if grads.wants(iw) {
                let mut gw = vec![0.0; out_f * in_f];
                gemm(
                    out_f,
                    rows,
                    in_f,
                    g,
                    (1, out_f),
                    vals.get(ix).data(),
                    (in_f, 1),
                    &mut gw,
                    (in_f, 1),
                    false,
                );
                grads.add_owned(iw, gw);
            }
            if let Some(ib) = ib {
                if grads.wants(ib) {
                    let mut gb = vec![0.0; out_f];
                    for row in g.chunks(out_f) {
                        gb.iter_mut().zip(row).for_each(|(b, g)| *b += g);
                    }
                    grads.add_owned(ib, gb);
                }
            }
        },
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn new(dim: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::ones(vec![dim]).with_grad(),
            beta: Tensor::zeros(vec![dim]).with_grad(),
            eps: LN_EPS,
        }
    }
}

impl Parameters for LayerNormParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

/// Normalizes each position over the channel axis with population variance.
pub fn layer_norm<'t>(x: Var<'t>, p: &LayerNormParams) -> Result<Var<'t>> {
    let tape = x.tape();
    let xs = x.shape();
    let d = p.gamma.numel();
    if xs.last() != Some(&d) {
        return Err(Error::shape("layer_norm", &xs, p.gamma.shape()));
    }
    let gamma = tape.param(&p.gamma);
    let beta = tape.param(&p.beta);
    let rows = x.value().numel() / d;
    let mut xhat = vec![0.0; rows * d];
    let mut inv_std = vec![0.0; rows];
    let mut y = vec![0.0; rows * d];
    {
        let xv = x.value();
        let (gv, bv) = (gamma.value(), beta.value());
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + p.eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                y[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
    }
    let (ix, ig, ib) = (x.id(), gamma.id(), beta.id());
    Ok(tape.custom(
        &[x, gamma, beta],
        Tensor::from_parts(xs, y),
        move |vals, g, grads| {
            let gv = vals.get(ig).data();
            if grads.wants(ix) {
                let mut gx = vec![0.0; rows * d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        m1 += dh;
                        m2 += dh * hr[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        gx[r * d + j] = inv_std[r] * (gr[j] * gv[j] - m1 - hr[j] * m2);
                    }
                }
                grads.add_owned(ix, gx);
            }
            if grads.wants(ig) || grads.wants(ib) {
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += g[r * d + j] * xhat[r * d + j];
                        gb[j] += g[r * d + j];
                    }
                }
                grads.add_owned(ig, gg);
                grads.add_owned(ib, gb);
            }
        },
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv1dParams {
    /// `[channels, kernel_size]`, one filter per channel.
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl Conv1dParams {
    pub fn new(kernel: Tensor, bias: Tensor) -> Result<Self> {
        if kernel.rank() != 2 || bias.shape() != [kernel.shape()[0]] || kernel.shape()[1] == 0 {
            return Err(Error::shape("conv1d params", kernel.shape(), bias.shape()));
        }
        Ok(Conv1dParams {
            kernel: kernel.with_grad(),
            bias: bias.with_grad(),
        })
    }

    /// Kernel entries uniform in `±1/sqrt(k)`, zero bias.
    pub fn init<R: Rng + ?Sized>(channels: usize, kernel_size: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (kernel_size as f64).sqrt();
        Conv1dParams {
            kernel: Tensor::from_fn(vec![channels, kernel_size], |_| {
                rng.random_range(-bound..bound)
            })
            .with_grad(),
            bias: Tensor::zeros(vec![channels]).with_grad(),
        }
    }

    pub fn channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[1]
    }
}

impl Parameters for Conv1dParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "kernel"), &self.kernel);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "kernel"), &mut self.kernel);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Depthwise causal convolution along the sequence axis of `[B, L, C]`
/// with `k - 1` implicit zeros on the left.
pub fn causal_conv1d<'t>(x: Var<'t>, p: &Conv1dParams) -> Result<Var<'t>> {
    let tape = x.tape();
    let xs = x.shape();
    let (c, k) = (p.channels(), p.kernel_size());
    if xs.len() != 3 || xs[2] != c {
        return Err(Error::shape("causal_conv1d", &xs, p.kernel.shape()));
    }
    let (b, l) = (xs[0], xs[1]);
    let kernel = tape.param(&p.kernel);
    let bias = tape.param(&p.bias);
    let mut y = vec![0.0; b * l * c];
    {
        let xv = x.value();
        let xd = xv.data();
        let kd = p.kernel.data();
        for bi in 0..b {
            for t in 0..l {
                let out = &mut y[(bi * l + t) * c..(bi * l + t + 1) * c];
                out.copy_from_slice(p.bias.data());
                for j in 0..k {
                    // input position t - (k - 1) + j
                    let Some(s) = (t + j).checked_sub(k - 1) else {
                        continue;
                    };
                    let row = &xd[(bi * l + s) * c..(bi * l + s + 1) * c];
                    for ch in 0..c {
                        out[ch] += kd[ch * k + j] * row[ch];
                    }
                }
            }
        }
    }
    let (ix, ik, ibias) = (x.id(), kernel.id(), bias.id());
    Ok(tape.custom(
        &[x, kernel, bias],
        Tensor::from_parts(xs, y),
        move |vals, g, grads| {
            let xd = vals.get(ix).data();
            let kd = vals.get(ik).data();
            let mut gx = vec![0.0; b * l * c];
            let mut gk = vec![0.0; c * k];
            let mut gb = vec![0.0; c];
            for bi in 0..b {
                for t in 0..l {
                    let gr = &g[(bi * l + t) * c..(bi * l + t + 1) * c];
                    gb.iter_mut().zip(gr).for_each(|(a, v)| *a += v);
                    for j in 0..k {
                        let Some(s) = (t + j).checked_sub(k - 1) else {
                            continue;
                        };
                        let base = (bi * l + s) * c;
                        for ch in 0..c {
                            gx[base + ch] += gr[ch] * kd[ch * k + j];
                            gk[ch * k + j] += gr[ch] * xd[base + ch];
                        }
                    }
                }
            }
            grads.add_owned(ix, gx);
            grads.add_owned(ik, gk);
            grads.add_owned(ibias, gb);
        },
    ))
}

/// Inverted dropout: survivors are scaled by `1 / (1 - p)` in training;
/// evaluation is the identity.
pub fn dropout<'t, R: Rng + ?Sized>(
    x: Var<'t>,
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var<'t>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!(
            "dropout probability {p} outside [0, 1)"
        )));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x);
    }
    let scale = 1.0 / (1.0 - p);
    let n = x.value().numel();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
        .collect();
    let out = {
        let v = x.value();
        Tensor::from_parts(
            v.shape().to_vec(),
            v.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        )
    };
    let src = x.id();
    Ok(x.tape().custom(&[x], out, move |_, g, grads| {
        grads.add_owned(src, g.iter().zip(&mask).map(|(g, m)| g * m).collect());
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMlpParams {
    pub up: LinearParams,
    pub down: LinearParams,
    pub dropout_p: f64,
}

impl ChannelMlpParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, dropout_p: f64, rng: &mut R) -> Self {
        ChannelMlpParams {
            up: LinearParams::init(dim, 4 * dim, true, rng),
            down: LinearParams::init(4 * dim, dim, true, rng),
            dropout_p,
        }
    }
}

impl Parameters for ChannelMlpParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.up.visit(&join(prefix, "up"), f);
        self.down.visit(&join(prefix, "down"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.up.visit_mut(&join(prefix, "up"), f);
        self.down.visit_mut(&join(prefix, "down"), f);
    }
}

/// Linear → GELU → Linear → Dropout, applied at every position.
pub fn channel_mlp<'t, R: Rng + ?Sized>(
    x: Var<'t>,
    p: &ChannelMlpParams,
    mode: Mode,
    rng: &mut R,
) -> Result<Var<'t>> {
    let h = linear(x, &p.up)?.gelu();
    let y = linear(h, &p.down)?;
    dropout(y, p.dropout_p, mode, rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub table: Tensor,
}

impl EmbeddingTable {
    pub fn init<R: Rng + ?Sized>(vocab: usize, dim: usize, rng: &mut R) -> Self {
        EmbeddingTable {
            table: normal_tensor(vec![vocab, dim], INIT_STD, rng),
        }
    }

    pub fn vocab(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }
}

impl Parameters for EmbeddingTable {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "table"), &self.table);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "table"), &mut self.table);
    }
}

/// Gathers rows of the table; the result has shape `ids_shape + [D]`.
pub fn embed<'t>(
    tape: &'t Tape,
    table: &EmbeddingTable,
    ids: &[usize],
    ids_shape: &[usize],
) -> Result<Var<'t>> {
    if ids_shape.iter().product::<usize>() != ids.len() {
        return Err(Error::invalid(format!(
            "{} ids do not fill shape {ids_shape:?}",
            ids.len()
        )));
    }
    let (v, d) = (table.vocab(), table.dim());
    if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
        return Err(Error::Index {
            what: "embedding table",
            index: bad,
            size: v,
        });
    }
    let t = tape.param(&table.table);
    let mut out = Vec::with_capacity(ids.len() * d);
    for &i in ids {
        out.extend_from_slice(&table.table.data()[i * d..(i + 1) * d]);
    }
    let mut shape = ids_shape.to_vec();
    shape.push(d);
    let ids = ids.to_vec();
    let it = t.id();
    Ok(
        tape.custom(&[t], Tensor::from_parts(shape, out), move |_, g, grads| {
            let mut gt = vec![0.0; v * d];
            for (n, &i) in ids.iter().enumerate() {
                gt[i * d..(i + 1) * d]
                    .iter_mut()
                    .zip(&g[n * d..(n + 1) * d])
                    .for_each(|(a, b)| *a += b);
            }
            grads.add_owned(it, gt);
        }),
    )
}
