use std::cell::RefCell;
use std::rc::Rc;

use crate::kernels::{self, ConvGeom};
use crate::{Result, Tensor, TensorError};

/// Records every operation of one forward pass so that [`Tape::backward`]
/// can replay them in reverse.
///
/// Nodes whose inputs are all constants are stored as constants themselves,
/// so a forward pass through frozen weights with a constant input records no
/// backward work at all.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

enum Op {
    Leaf,
    Conv2d { x: usize, w: usize, b: Option<usize>, stride: usize, pad: usize },
    Linear { x: usize, w: usize, b: Option<usize> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f32),
    Offset(usize),
    LeakyRelu(usize, f32),
    Tanh(usize),
    Softplus(usize),
    Square(usize),
    InstanceNorm { x: usize, inv_std: Vec<f32> },
    Modulate { x: usize, gamma: usize, beta: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
    Reshape(usize),
    RepeatBatch { x: usize },
    Upsample2x(usize),
    PixelShuffle { x: usize, r: usize },
    PixelUnshuffle { x: usize, r: usize },
    Separable { x: usize, rows: Rc<Tensor>, cols: Rc<Tensor> },
    Clamp { x: usize, lo: f32, hi: f32 },
    Sum(usize),
    Mean(usize),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => {
                let mut p = vec![*x, *w];
                p.extend(b.iter());
                p
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Modulate { x, gamma, beta } => vec![*x, *gamma, *beta],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Scale(x, _)
            | Op::Offset(x)
            | Op::LeakyRelu(x, _)
            | Op::Tanh(x)
            | Op::Softplus(x)
            | Op::Square(x)
            | Op::InstanceNorm { x, .. }
            | Op::Narrow { x, .. }
            | Op::Reshape(x)
            | Op::RepeatBatch { x }
            | Op::Upsample2x(x)
            | Op::PixelShuffle { x, .. }
            | Op::PixelUnshuffle { x, .. }
            | Op::Separable { x, .. }
            | Op::Clamp { x, .. }
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

/// Gradients produced by one backward pass, indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that gradients flow into.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.leaf(Rc::new(value), true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(Rc::new(value), false)
    }

    pub fn leaf(&self, value: Rc<Tensor>, requires_grad: bool) -> Var<'_> {
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    fn push_raw(&self, value: Rc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.parents().iter().any(|&p| nodes[p].requires_grad)
        };
        let op = if requires_grad { op } else { Op::Leaf };
        self.push_raw(Rc::new(value), op, requires_grad)
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse-mode sweep seeded with ones at `root` (so a non-scalar root
    /// differentiates the sum of its entries).
    /// Which linear piece every piecewise-linear op evaluated on, in tape
    /// order. Two passes with equal patterns saw no kink between them.
    pub fn branch_pattern(&self) -> Vec<u8> {
        let nodes = self.nodes.borrow();
        let mut out = Vec::new();
        for node in nodes.iter() {
            match node.op {
                Op::LeakyRelu(x, _) => out.extend(nodes[x].value.data().iter().map(|&v| u8::from(v > 0.0))),
                Op::Clamp { x, lo, hi } => out.extend(
                    nodes[x].value.data().iter().map(|&v| if v < lo { 0 } else if v > hi { 2 } else { 1 }),
                ),
                _ => {}
            }
        }
        out
    }

    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[root.id].requires_grad {
            return Gradients { grads };
        }
        grads[root.id] = Some(Tensor::ones(nodes[root.id].value.shape()));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut acc = |target: usize, delta: Tensor| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => existing.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            let val = |i: usize| -> &Tensor { &nodes[i].value };
            let rg = |i: usize| nodes[i].requires_grad;
            backward_op(&node.op, &node.value, g, val, rg, &mut acc);
        }
        Gradients { grads }
    }
}

fn backward_op<'n>(
    op: &Op,
    out: &Tensor,
    g: Tensor,
    val: impl Fn(usize) -> &'n Tensor,
    rg: impl Fn(usize) -> bool,
    acc: &mut impl FnMut(usize, Tensor),
) {
    match op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, stride, pad } => {
            let (xv, wv) = (val(*x), val(*w));
            let geom = conv_geom(xv, wv, *stride, *pad).expect("validated in forward");
            let grads = kernels::conv2d_backward(
                xv.data(),
                wv.data(),
                g.data(),
                &geom,
                rg(*x),
                rg(*w),
                b.is_some_and(&rg),
            );
            if let Some(dx) = grads.dx {
                acc(*x, Tensor::new(xv.shape(), dx).unwrap());
            }
            if let Some(dw) = grads.dw {
                acc(*w, Tensor::new(wv.shape(), dw).unwrap());
            }
            if let (Some(b), Some(db)) = (b, grads.db) {
                acc(*b, Tensor::new(&[geom.oc], db).unwrap());
            }
        }
        Op::Linear { x, w, b } => {
            let (xv, wv) = (val(*x), val(*w));
            let [n, fin] = xv.dims2().unwrap();
            let [fout, _] = wv.dims2().unwrap();
            if rg(*x) {
                // dx[n×in] = g[n×out] · w[out×in]
                let mut dx = vec![0.0; n * fin];
                kernels::gemm(n, fout, fin, g.data(), fout as isize, 1, wv.data(), fin as isize, 1, 0.0, &mut dx);
                acc(*x, Tensor::new(&[n, fin], dx).unwrap());
            }
            if rg(*w) {
                // dw[out×in] = gᵀ[out×n] · x[n×in]
                let mut dw = vec![0.0; fout * fin];
                kernels::gemm(fout, n, fin, g.data(), 1, fout as isize, xv.data(), fin as isize, 1, 0.0, &mut dw);
                acc(*w, Tensor::new(&[fout, fin], dw).unwrap());
            }
            if let Some(b) = b.filter(|b| rg(*b)) {
                let mut db = vec![0.0; fout];
                for row in g.data().chunks(fout) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(b, Tensor::new(&[fout], db).unwrap());
            }
        }
        Op::Add(a, b) => {
            if rg(*a) && rg(*b) {
                acc(*a, g.clone());
            } else if rg(*a) {
                acc(*a, g);
                return;
            }
            acc(*b, g);
        }
        Op::Sub(a, b) => {
            acc(*b, g.map(|v| -v));
            acc(*a, g);
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                acc(*a, g.zip_map(val(*b), |g, y| g * y).unwrap());
            }
            if rg(*b) {
                acc(*b, g.zip_map(val(*a), |g, x| g * x).unwrap());
            }
        }
        Op::Scale(x, s) => acc(*x, g.map(|v| v * s)),
        Op::Offset(x) | Op::Reshape(x) => {
            let shape = val(*x).shape().to_vec();
            acc(*x, g.reshape(&shape).unwrap());
        }
        Op::LeakyRelu(x, slope) => {
            acc(*x, g.zip_map(val(*x), |g, x| if x > 0.0 { g } else { g * slope }).unwrap());
        }
        Op::Tanh(x) => acc(*x, g.zip_map(out, |g, y| g * (1.0 - y * y)).unwrap()),
        Op::Softplus(x) => acc(*x, g.zip_map(val(*x), |g, x| g * sigmoid(x)).unwrap()),
        Op::Square(x) => acc(*x, g.zip_map(val(*x), |g, x| 2.0 * g * x).unwrap()),
        Op::InstanceNorm { x, inv_std } => {
            let [_, _, h, w] = out.dims4().unwrap();
            let dx = kernels::instance_norm_backward(out.data(), inv_std, g.data(), h * w);
            acc(*x, Tensor::new(val(*x).shape(), dx).unwrap());
        }
        Op::Modulate { x, gamma, beta } => {
            let xv = val(*x);
            let [n, c, h, w] = xv.dims4().unwrap();
            let hw = h * w;
            let gam = val(*gamma).data();
            if rg(*x) {
                let mut dx = g.clone();
                for (p, plane) in dx.data_mut().chunks_mut(hw).enumerate() {
                    let s = 1.0 + gam[p];
                    plane.iter_mut().for_each(|v| *v *= s);
                }
                acc(*x, dx);
            }
            if rg(*gamma) {
                let d: Vec<f32> = (0..n * c)
                    .map(|p| {
                        let gs = &g.data()[p * hw..(p + 1) * hw];
                        let xs = &xv.data()[p * hw..(p + 1) * hw];
                        gs.iter().zip(xs).map(|(a, b)| a * b).sum()
                    })
                    .collect();
                acc(*gamma, Tensor::new(&[n, c], d).unwrap());
            }
            if rg(*beta) {
                let d: Vec<f32> = g.data().chunks(hw).map(|s| s.iter().sum()).collect();
                acc(*beta, Tensor::new(&[n, c], d).unwrap());
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = kernels::split_axis(out.shape(), *axis);
            let mut offset = 0;
            for &p in parts {
                let pv = val(p);
                let len = pv.shape()[*axis];
                if rg(p) {
                    let mut d = Vec::with_capacity(pv.numel());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&g.data()[base..base + len * inner]);
                    }
                    acc(p, Tensor::new(pv.shape(), d).unwrap());
                }
                offset += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            let xv = val(*x);
            let (outer, total, inner) = kernels::split_axis(xv.shape(), *axis);
            let len = out.shape()[*axis];
            let mut d = vec![0.0; xv.numel()];
            for o in 0..outer {
                let dst = (o * total + start) * inner;
                d[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            acc(*x, Tensor::new(xv.shape(), d).unwrap());
        }
        Op::RepeatBatch { x } => {
            let xv = val(*x);
            let per = xv.numel();
            let mut d = vec![0.0; per];
            for chunk in g.data().chunks(per) {
                for (a, b) in d.iter_mut().zip(chunk) {
                    *a += b;
                }
            }
            acc(*x, Tensor::new(xv.shape(), d).unwrap());
        }
        Op::Upsample2x(x) => {
            let xv = val(*x);
            let [n, c, h, w] = xv.dims4().unwrap();
            let d = kernels::upsample2x_backward(g.data(), n * c, h, w);
            acc(*x, Tensor::new(xv.shape(), d).unwrap());
        }
        Op::PixelShuffle { x, r } => {
            let [n, c, oh, ow] = out.dims4().unwrap();
            let d = kernels::pixel_shuffle(g.data(), n, c, oh / r, ow / r, *r, true);
            acc(*x, Tensor::new(val(*x).shape(), d).unwrap());
        }
        Op::PixelUnshuffle { x, r } => {
            let [n, c, h, w] = val(*x).dims4().unwrap();
            let d = kernels::pixel_shuffle(g.data(), n, c, h / r, w / r, *r, false);
            acc(*x, Tensor::new(&[n, c, h, w], d).unwrap());
        }
        Op::Separable { x, rows, cols } => {
            let xv = val(*x);
            let [n, c, h, w] = xv.dims4().unwrap();
            let (oh, ow) = (rows.shape()[0], cols.shape()[0]);
            let d = kernels::separable_backward(g.data(), n * c, h, w, rows.data(), oh, cols.data(), ow);
            acc(*x, Tensor::new(xv.shape(), d).unwrap());
        }
        Op::Clamp { x, lo, hi } => {
            acc(*x, g.zip_map(val(*x), |g, x| if x >= *lo && x <= *hi { g } else { 0.0 }).unwrap());
        }
        Op::Sum(x) => {
            let xv = val(*x);
            acc(*x, Tensor::full(xv.shape(), g.item()));
        }
        Op::Mean(x) => {
            let xv = val(*x);
            acc(*x, Tensor::full(xv.shape(), g.item() / xv.numel() as f32));
        }
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow for large `|x|`.
pub fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn conv_geom(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    let [n, ic, h, wd] = x.dims4()?;
    let [oc, wic, kh, kw] = w.dims4()?;
    if wic != ic {
        return Err(shape_err("conv2d", format!("input has {ic} channels, weight expects {wic}")));
    }
    if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(shape_err("conv2d", format!("kernel {kh}x{kw} does not fit input {h}x{wd} with pad {pad}")));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    Ok(ConvGeom { n, ic, h, w: wd, oc, kh, kw, stride, pad, oh, ow })
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.leaf(self.value(), false)
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    /// 2-d convolution; `weight` is `[out, in, kh, kw]`, padding is symmetric.
    pub fn conv2d(&self, weight: Var<'t>, bias: Option<Var<'t>>, stride: usize, pad: usize) -> Result<Var<'t>> {
        self.same_tape(&weight);
        let (x, w) = (self.value(), weight.value());
        let geom = conv_geom(&x, &w, stride, pad)?;
        let b = match bias {
            Some(b) => {
                let bv = b.value();
                if bv.shape() != [geom.oc] {
                    return Err(shape_err("conv2d", format!("bias {:?} for {} outputs", bv.shape(), geom.oc)));
                }
                Some(bv)
            }
            None => None,
        };
        let out = kernels::conv2d_forward(x.data(), w.data(), b.as_deref().map(Tensor::data), &geom);
        let out = Tensor::new(&[geom.n, geom.oc, geom.oh, geom.ow], out)?;
        Ok(self.tape.push(out, Op::Conv2d { x: self.id, w: weight.id, b: bias.map(|b| b.id), stride, pad }))
    }

    /// `x[n×in] · wᵀ + b` with `w` shaped `[out, in]`.
    pub fn linear(&self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weight.value());
        let [n, fin] = x.dims2()?;
        let [fout, win] = w.dims2()?;
        if fin != win {
            return Err(shape_err("linear", format!("input features {fin}, weight expects {win}")));
        }
        let mut out = vec![0.0; n * fout];
        if let Some(b) = bias {
            let bv = b.value();
            if bv.shape() != [fout] {
                return Err(shape_err("linear", format!("bias {:?} for {fout} outputs", bv.shape())));
            }
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bv.data());
            }
        }
        kernels::gemm(n, fin, fout, x.data(), fin as isize, 1, w.data(), 1, fin as isize, 1.0, &mut out);
        let out = Tensor::new(&[n, fout], out)?;
        Ok(self.tape.push(out, Op::Linear { x: self.id, w: weight.id, b: bias.map(|b| b.id) }))
    }

    fn binary(&self, other: Var<'t>, name: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        a.zip_map(&b, f).map_err(|_| shape_err(name, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.binary(other, "add", |a, b| a + b)?;
        Ok(self.tape.push(out, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.binary(other, "sub", |a, b| a - b)?;
        Ok(self.tape.push(out, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.binary(other, "mul", |a, b| a * b)?;
        Ok(self.tape.push(out, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, s: f32) -> Var<'t> {
        let out = self.value().map(|v| v * s);
        self.tape.push(out, Op::Scale(self.id, s))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, s: f32) -> Var<'t> {
        let out = self.value().map(|v| v + s);
        self.tape.push(out, Op::Offset(self.id))
    }

    pub fn leaky_relu(&self, slope: f32) -> Var<'t> {
        let out = self.value().map(|v| if v > 0.0 { v } else { v * slope });
        self.tape.push(out, Op::LeakyRelu(self.id, slope))
    }

    pub fn tanh(&self) -> Var<'t> {
        let out = self.value().map(f32::tanh);
        self.tape.push(out, Op::Tanh(self.id))
    }

    pub fn softplus(&self) -> Var<'t> {
        let out = self.value().map(softplus);
        self.tape.push(out, Op::Softplus(self.id))
    }

    pub fn square(&self) -> Var<'t> {
        let out = self.value().map(|v| v * v);
        self.tape.push(out, Op::Square(self.id))
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> Var<'t> {
        let out = self.value().map(|v| v.clamp(lo, hi));
        self.tape.push(out, Op::Clamp { x: self.id, lo, hi })
    }

    /// Normalise every (n, c) plane to zero mean and unit variance.
    pub fn instance_norm(&self, eps: f32) -> Result<Var<'t>> {
        let x = self.value();
        let [n, c, h, w] = x.dims4()?;
        let (out, inv_std) = kernels::instance_norm_forward(x.data(), n * c, h * w, eps);
        let out = Tensor::new(x.shape(), out)?;
        Ok(self.tape.push(out, Op::InstanceNorm { x: self.id, inv_std }))
    }

    /// Per-channel style modulation `x·(1 + γ) + β` with `γ, β` shaped `[n, c]`.
    pub fn modulate(&self, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
        let (x, gv, bv) = (self.value(), gamma.value(), beta.value());
        let [n, c, h, w] = x.dims4()?;
        if gv.shape() != [n, c] || bv.shape() != [n, c] {
            return Err(shape_err(
                "modulate",
                format!("features [{n}, {c}, ..] with gamma {:?} and beta {:?}", gv.shape(), bv.shape()),
            ));
        }
        let hw = h * w;
        let mut out = x.as_ref().clone();
        for (p, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let (s, o) = (1.0 + gv.data()[p], bv.data()[p]);
            plane.iter_mut().for_each(|v| *v = *v * s + o);
        }
        Ok(self.tape.push(out, Op::Modulate { x: self.id, gamma: gamma.id, beta: beta.id }))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| TensorError::InvalidArgument("concat of nothing".into()))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(shape_err("concat", format!("{s:?} vs {base:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = kernels::split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let out = Tensor::new(&shape, out)?;
        Ok(first.tape.push(out, Op::Concat { parts: parts.iter().map(|p| p.id).collect(), axis }))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err("narrow", format!("{start}..{} on axis {axis} of {shape:?}", start + len)));
        }
        let (outer, total, inner) = kernels::split_axis(shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * total + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut new_shape = shape.to_vec();
        new_shape[axis] = len;
        let out = Tensor::new(&new_shape, out)?;
        Ok(self.tape.push(out, Op::Narrow { x: self.id, axis, start }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().as_ref().clone().reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape(self.id)))
    }

    /// Tile a batch-1 tensor `n` times along the batch axis.
    pub fn repeat_batch(&self, n: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.shape().first() != Some(&1) {
            return Err(shape_err("repeat_batch", format!("expected batch 1, got {:?}", x.shape())));
        }
        let mut shape = x.shape().to_vec();
        shape[0] = n;
        let out = Tensor::new(&shape, x.data().repeat(n))?;
        Ok(self.tape.push(out, Op::RepeatBatch { x: self.id }))
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2x(&self) -> Result<Var<'t>> {
        let x = self.value();
        let [n, c, h, w] = x.dims4()?;
        let out = Tensor::new(&[n, c, 2 * h, 2 * w], kernels::upsample2x(x.data(), n * c, h, w))?;
        Ok(self.tape.push(out, Op::Upsample2x(self.id)))
    }

    /// `(N, C·r², H, W) → (N, C, rH, rW)`.
    pub fn pixel_shuffle(&self, r: usize) -> Result<Var<'t>> {
        let x = self.value();
        let [n, c, h, w] = x.dims4()?;
        if r == 0 || c % (r * r) != 0 {
            return Err(shape_err("pixel_shuffle", format!("{c} channels not divisible by {r}²")));
        }
        let c_out = c / (r * r);
        let out = Tensor::new(&[n, c_out, h * r, w * r], kernels::pixel_shuffle(x.data(), n, c_out, h, w, r, false))?;
        Ok(self.tape.push(out, Op::PixelShuffle { x: self.id, r }))
    }

    /// Inverse of [`Var::pixel_shuffle`]: `(N, C, rH, rW) → (N, C·r², H, W)`.
    pub fn pixel_unshuffle(&self, r: usize) -> Result<Var<'t>> {
        let x = self.value();
        let [n, c, h, w] = x.dims4()?;
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(shape_err("pixel_unshuffle", format!("{h}x{w} not divisible by {r}")));
        }
        let out = Tensor::new(
            &[n, c * r * r, h / r, w / r],
            kernels::pixel_shuffle(x.data(), n, c, h / r, w / r, r, true),
        )?;
        Ok(self.tape.push(out, Op::PixelUnshuffle { x: self.id, r }))
    }

    /// Apply `rows · plane · colsᵀ` to every plane; `rows` is `[oh, h]` and
    /// `cols` is `[ow, w]`. Any separable linear resampler fits this form.
    pub fn separable(&self, rows: Rc<Tensor>, cols: Rc<Tensor>) -> Result<Var<'t>> {
        let x = self.value();
        let [n, c, h, w] = x.dims4()?;
        let [oh, rh] = rows.dims2()?;
        let [ow, cw] = cols.dims2()?;
        if rh != h || cw != w {
            return Err(shape_err("separable", format!("plane {h}x{w} with matrices {rh} and {cw} wide")));
        }
        let out = kernels::separable(x.data(), n * c, h, w, rows.data(), oh, cols.data(), ow);
        let out = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.tape.push(out, Op::Separable { x: self.id, rows, cols }))
    }

    pub fn sum(&self) -> Var<'t> {
        let out = Tensor::scalar(self.value().sum_f64() as f32);
        self.tape.push(out, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let out = Tensor::scalar(self.value().mean_f64() as f32);
        self.tape.push(out, Op::Mean(self.id))
    }
}
