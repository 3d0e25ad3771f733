//! Tape-based reverse-mode differentiation over the handful of ops the
//! reconstruction and prompt networks need.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and `backward` is a single reverse sweep.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::learncore::params::GroupKind;
use crate::tensor::{Scalar, Tensor};

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Add {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Mul(Var, Var),
    PadRight {
        x: Var,
        extra: usize,
    },
    Windows {
        x: Var,
        offsets: Vec<usize>,
    },
    Mean(Var),
    Mse(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
}

/// Gradients keyed by parameter group, then tensor name.
pub type Gradients<T> = BTreeMap<GroupKind, BTreeMap<String, Tensor<T>>>;

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(GroupKind, String, Var)>,
    bound: HashMap<(GroupKind, String), Var>,
    scope: String,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            bound: HashMap::new(),
            scope: String::new(),
        }
    }

    /// Label used in non-finite errors raised by subsequent ops.
    pub fn set_scope(&mut self, scope: impl Into<String>) {
        self.scope = scope.into();
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, what: &str) -> Result<Var> {
        if !value.is_finite() {
            let name = if self.scope.is_empty() {
                what.to_string()
            } else {
                format!("{}.{what}", self.scope)
            };
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Input, "input")
    }

    /// Binds a named parameter. Binding the same (group, name) twice returns
    /// the first node.
    pub fn param(&mut self, group: GroupKind, name: &str, t: &Tensor<T>) -> Result<Var> {
        let key = (group, name.to_string());
        if let Some(&v) = self.bound.get(&key) {
            return Ok(v);
        }
        let v = self.push(t.clone(), Op::Param, name)?;
        self.bound.insert(key, v);
        self.params.push((group, name.to_string(), v));
        Ok(v)
    }

    pub fn bound_groups(&self) -> BTreeSet<GroupKind> {
        self.params.iter().map(|(g, _, _)| *g).collect()
    }

    /// Same-size 2D convolution with zero padding. `x` is N×Ci×H×W, `w` is
    /// Co×Ci×k×k (k odd), `b` is Co.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        let (n, ci, h, wd) = dims4(&xs, "conv2d input")?;
        let (co, wci, kh, kw) = dims4(&ws, "conv2d weight")?;
        if wci != ci || kh != kw || kh % 2 == 0 {
            return Err(Error::shape("conv2d weight", &[co, ci, kh, kh], &ws));
        }
        if bs != [co] {
            return Err(Error::shape("conv2d bias", &[co], &bs));
        }
        let k = kh;
        let pad = k / 2;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let plane = h * wd;
        let mut out = vec![T::zero(); n * co * plane];
        for s in 0..n {
            for o in 0..co {
                let dst = &mut out[(s * co + o) * plane..(s * co + o + 1) * plane];
                dst.fill(bv[o]);
                for i in 0..ci {
                    let src = &xv[(s * ci + i) * plane..(s * ci + i + 1) * plane];
                    for ky in 0..k {
                        for kx in 0..k {
                            let wt = wv[((o * ci + i) * k + ky) * k + kx];
                            let (r0, r1) = valid_range(h, ky, pad);
                            let (c0, c1) = valid_range(wd, kx, pad);
                            for r in r0..r1 {
                                let sr = r + ky - pad;
                                let d = &mut dst[r * wd + c0..r * wd + c1];
                                let sv = &src[sr * wd + c0 + kx - pad..sr * wd + c1 + kx - pad];
                                for (dv, &xv) in d.iter_mut().zip(sv) {
                                    *dv = *dv + wt * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, co, h, wd], out)?;
        self.push(value, Op::Conv2d { x, w, b }, "conv2d")
    }

    /// Normalises each pixel across the channel axis of an N×C×H×W tensor,
    /// then applies a per-channel affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (n, c, h, w) = dims4(&xs, "layer_norm input")?;
        self.value(gamma).ensure_shape(&[c], "layer_norm gamma")?;
        self.value(beta).ensure_shape(&[c], "layer_norm beta")?;
        let plane = h * w;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut xhat = vec![0.0f64; xv.len()];
        let mut rstd = vec![0.0f64; n * plane];
        for s in 0..n {
            for p in 0..plane {
                let idx = |ch: usize| (s * c + ch) * plane + p;
                let mean = (0..c).map(|ch| xv[idx(ch)].f64()).sum::<f64>() / c as f64;
                let var = (0..c)
                    .map(|ch| {
                        let d = xv[idx(ch)].f64() - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / c as f64;
                let r = 1.0 / (var + LN_EPS).sqrt();
                rstd[s * plane + p] = r;
                for ch in 0..c {
                    let xh = (xv[idx(ch)].f64() - mean) * r;
                    xhat[idx(ch)] = xh;
                    out[idx(ch)] = T::of(xh * gv[ch].f64() + bv[ch].f64());
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let out = src
            .data()
            .iter()
            .map(|&v| {
                let v = v.f64();
                let t = (GELU_K * (v + GELU_C * v * v * v)).tanh();
                T::of(0.5 * v * (1.0 + t))
            })
            .collect();
        let value = Tensor::new(src.shape().to_vec(), out)?;
        self.push(value, Op::Gelu(x), "gelu")
    }

    /// Elementwise sum. `b` may have a leading extent of 1 and is then
    /// broadcast over `a`'s leading axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        let broadcast = if sa == sb {
            false
        } else if !sa.is_empty() && sb.len() == sa.len() && sb[0] == 1 && sb[1..] == sa[1..] {
            true
        } else {
            return Err(Error::shape("add", &sa, &sb));
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out: Vec<T> = if broadcast {
            let inner = bv.len();
            av.iter()
                .enumerate()
                .map(|(i, &x)| x + bv[i % inner.max(1)])
                .collect()
        } else {
            av.iter().zip(bv).map(|(&x, &y)| x + y).collect()
        };
        let value = Tensor::new(sa, out)?;
        self.push(value, Op::Add { a, b, broadcast }, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(Error::shape("mul", &sa, sb));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(sa, out)?;
        self.push(value, Op::Mul(a, b), "mul")
    }

    /// Zero-pads the last axis by `extra` columns on the right.
    pub fn pad_right(&mut self, x: Var, extra: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let Some(&w) = shape.last() else {
            return Err(Error::invalid("pad_right on a scalar"));
        };
        let rows = self.value(x).len() / w.max(1);
        let nw = w + extra;
        let mut out = vec![T::zero(); rows * nw];
        if w > 0 {
            for (r, src) in self.value(x).data().chunks_exact(w).enumerate() {
                out[r * nw..r * nw + w].copy_from_slice(src);
            }
        }
        let mut ns = shape;
        *ns.last_mut().unwrap() = nw;
        let value = Tensor::new(ns, out)?;
        self.push(value, Op::PadRight { x, extra }, "pad_right")
    }

    /// Extracts one width-`W` window per offset from an N×1×H×(W+Δ) tensor,
    /// producing N×B×H×W with `W = width − max(offsets)`.
    pub fn windows(&mut self, x: Var, offsets: &[usize]) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (n, one, h, yw) = dims4(&xs, "windows input")?;
        if one != 1 {
            return Err(Error::shape("windows input", &[n, 1, h, yw], &xs));
        }
        let maxo = offsets.iter().copied().max().unwrap_or(0);
        if offsets.is_empty() || maxo >= yw {
            return Err(Error::invalid(format!(
                "window offsets {offsets:?} exceed width {yw}"
            )));
        }
        let w = yw - maxo;
        let bands = offsets.len();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * bands * h * w];
        for s in 0..n {
            for (bnd, &off) in offsets.iter().enumerate() {
                for r in 0..h {
                    let src = &xv[(s * h + r) * yw + off..(s * h + r) * yw + off + w];
                    let dst = ((s * bands + bnd) * h + r) * w;
                    out[dst..dst + w].copy_from_slice(src);
                }
            }
        }
        let value = Tensor::new(vec![n, bands, h, w], out)?;
        self.push(
            value,
            Op::Windows {
                x,
                offsets: offsets.to_vec(),
            },
            "windows",
        )
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        if src.is_empty() {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let m = src.data().iter().map(|v| v.f64()).sum::<f64>() / src.len() as f64;
        self.push(Tensor::scalar(T::of(m)), Op::Mean(x), "mean")
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let loss = mse_value(self.value(a), self.value(b))?;
        self.push(Tensor::scalar(T::of(loss)), Op::Mse(a, b), "mse")
    }

    /// Reverse sweep from the scalar `loss`. Only parameters in `groups`
    /// receive gradients; every bound parameter of a requested group gets an
    /// entry (zeros if unreachable).
    pub fn backward(&self, loss: Var, groups: &[GroupKind]) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward loss", &[], self.value(loss).shape()));
        }
        let bound = self.bound_groups();
        for g in groups {
            if !bound.contains(g) {
                return Err(Error::UnknownGroup(g.to_string()));
            }
        }
        let wanted: BTreeSet<GroupKind> = groups.iter().copied().collect();

        let mut needs = vec![false; self.nodes.len()];
        for (g, _, v) in &self.params {
            if wanted.contains(g) {
                needs[v.0] = true;
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !needs[i] {
                needs[i] = inputs(&node.op).iter().any(|v| needs[v.0]);
            }
        }

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !needs[i] {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop(i, &gy, &needs, &mut grads);
            if matches!(self.nodes[i].op, Op::Param) {
                grads[i] = Some(gy);
            }
        }

        let mut out: Gradients<T> = BTreeMap::new();
        for g in &wanted {
            out.insert(*g, BTreeMap::new());
        }
        for (g, name, v) in &self.params {
            if let Some(slot) = out.get_mut(g) {
                let shape = self.value(*v).shape().to_vec();
                let t = match grads[v.0].take() {
                    Some(data) => Tensor::new(shape, data)?,
                    None => Tensor::zeros(&shape),
                };
                slot.insert(name.clone(), t);
            }
        }
        Ok(out)
    }

    fn backprop(&self, i: usize, gy: &[T], needs: &[bool], grads: &mut [Option<Vec<T>>]) {
        match &self.nodes[i].op {
            Op::Input | Op::Param => {}
            Op::Conv2d { x, w, b } => {
                let xs = self.value(*x).shape();
                let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let ws = self.value(*w).shape();
                let (co, k) = (ws[0], ws[2]);
                let pad = k / 2;
                let plane = h * wd;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if needs[b.0] {
                    let db = grad_slot(grads, *b, co);
                    for s in 0..n {
                        for o in 0..co {
                            let sum: f64 = gy[(s * co + o) * plane..(s * co + o + 1) * plane]
                                .iter()
                                .map(|v| v.f64())
                                .sum();
                            db[o] = db[o] + T::of(sum);
                        }
                    }
                }
                if needs[w.0] {
                    let dw = grad_slot(grads, *w, wv.len());
                    for o in 0..co {
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let (r0, r1) = valid_range(h, ky, pad);
                                    let (c0, c1) = valid_range(wd, kx, pad);
                                    let mut sum = 0.0f64;
                                    for s in 0..n {
                                        let g = &gy[(s * co + o) * plane..];
                                        let src = &xv[(s * ci + c) * plane..];
                                        for r in r0..r1 {
                                            let sr = r + ky - pad;
                                            let gr = &g[r * wd + c0..r * wd + c1];
                                            let xr = &src
                                                [sr * wd + c0 + kx - pad..sr * wd + c1 + kx - pad];
                                            let mut part = T::zero();
                                            for (&a, &bb) in gr.iter().zip(xr) {
                                                part = part + a * bb;
                                            }
                                            sum += part.f64();
                                        }
                                    }
                                    let idx = ((o * ci + c) * k + ky) * k + kx;
                                    dw[idx] = dw[idx] + T::of(sum);
                                }
                            }
                        }
                    }
                }
                if needs[x.0] {
                    let dx = grad_slot(grads, *x, xv.len());
                    for s in 0..n {
                        for o in 0..co {
                            let g = &gy[(s * co + o) * plane..(s * co + o + 1) * plane];
                            for c in 0..ci {
                                let dst = &mut dx[(s * ci + c) * plane..(s * ci + c + 1) * plane];
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let wt = wv[((o * ci + c) * k + ky) * k + kx];
                                        let (r0, r1) = valid_range(h, ky, pad);
                                        let (c0, c1) = valid_range(wd, kx, pad);
                                        for r in r0..r1 {
                                            let sr = r + ky - pad;
                                            let d = &mut dst
                                                [sr * wd + c0 + kx - pad..sr * wd + c1 + kx - pad];
                                            for (dv, &gv) in
                                                d.iter_mut().zip(&g[r * wd + c0..r * wd + c1])
                                            {
                                                *dv = *dv + wt * gv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let xs = self.value(*x).shape();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let plane = h * w;
                let gv = self.value(*gamma).data();
                if needs[gamma.0] {
                    let dg = grad_slot(grads, *gamma, c);
                    for ch in 0..c {
                        let mut sum = 0.0;
                        for s in 0..n {
                            let base = (s * c + ch) * plane;
                            for p in 0..plane {
                                sum += gy[base + p].f64() * xhat[base + p];
                            }
                        }
                        dg[ch] = dg[ch] + T::of(sum);
                    }
                }
                if needs[beta.0] {
                    let db = grad_slot(grads, *beta, c);
                    for ch in 0..c {
                        let mut sum = 0.0;
                        for s in 0..n {
                            let base = (s * c + ch) * plane;
                            sum += gy[base..base + plane].iter().map(|v| v.f64()).sum::<f64>();
                        }
                        db[ch] = db[ch] + T::of(sum);
                    }
                }
                if needs[x.0] {
                    let dx = grad_slot(grads, *x, n * c * plane);
                    let mut dxh = vec![0.0f64; c];
                    for s in 0..n {
                        for p in 0..plane {
                            let idx = |ch: usize| (s * c + ch) * plane + p;
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for ch in 0..c {
                                let d = gy[idx(ch)].f64() * gv[ch].f64();
                                dxh[ch] = d;
                                m1 += d;
                                m2 += d * xhat[idx(ch)];
                            }
                            m1 /= c as f64;
                            m2 /= c as f64;
                            let r = rstd[s * plane + p];
                            for ch in 0..c {
                                let v = r * (dxh[ch] - m1 - xhat[idx(ch)] * m2);
                                dx[idx(ch)] = dx[idx(ch)] + T::of(v);
                            }
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let dx = grad_slot(grads, *x, xv.len());
                for ((d, &v), &g) in dx.iter_mut().zip(xv).zip(gy) {
                    let v = v.f64();
                    let t = (GELU_K * (v + GELU_C * v * v * v)).tanh();
                    let dt = (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * v * v);
                    *d = *d + T::of(g.f64() * (0.5 * (1.0 + t) + 0.5 * v * dt));
                }
            }
            Op::Add { a, b, broadcast } => {
                if needs[a.0] {
                    let da = grad_slot(grads, *a, gy.len());
                    for (d, &g) in da.iter_mut().zip(gy) {
                        *d = *d + g;
                    }
                }
                if needs[b.0] {
                    let nb = self.value(*b).len();
                    let db = grad_slot(grads, *b, nb);
                    if *broadcast {
                        for chunk in gy.chunks_exact(nb.max(1)) {
                            for (d, &g) in db.iter_mut().zip(chunk) {
                                *d = *d + g;
                            }
                        }
                    } else {
                        for (d, &g) in db.iter_mut().zip(gy) {
                            *d = *d + g;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data().to_vec();
                if needs[a.0] {
                    let da = grad_slot(grads, *a, av.len());
                    for ((d, &g), &y) in da.iter_mut().zip(gy).zip(&bv) {
                        *d = *d + g * y;
                    }
                }
                if needs[b.0] {
                    let db = grad_slot(grads, *b, bv.len());
                    for ((d, &g), &y) in db.iter_mut().zip(gy).zip(&av) {
                        *d = *d + g * y;
                    }
                }
            }
            Op::PadRight { x, extra } => {
                let xv = self.value(*x);
                let w = *xv.shape().last().unwrap();
                let nw = w + extra;
                let dx = grad_slot(grads, *x, xv.len());
                if w > 0 {
                    for (r, d) in dx.chunks_exact_mut(w).enumerate() {
                        for (dv, &g) in d.iter_mut().zip(&gy[r * nw..r * nw + w]) {
                            *dv = *dv + g;
                        }
                    }
                }
            }
            Op::Windows { x, offsets } => {
                let xs = self.value(*x).shape();
                let (n, h, yw) = (xs[0], xs[2], xs[3]);
                let w = yw - offsets.iter().max().unwrap();
                let bands = offsets.len();
                let dx = grad_slot(grads, *x, n * h * yw);
                for s in 0..n {
                    for (bnd, &off) in offsets.iter().enumerate() {
                        for r in 0..h {
                            let src = ((s * bands + bnd) * h + r) * w;
                            let dst = (s * h + r) * yw + off;
                            for (d, &g) in dx[dst..dst + w].iter_mut().zip(&gy[src..src + w]) {
                                *d = *d + g;
                            }
                        }
                    }
                }
            }
            Op::Mean(x) => {
                let len = self.value(*x).len();
                let g = T::of(gy[0].f64() / len as f64);
                let dx = grad_slot(grads, *x, len);
                for d in dx.iter_mut() {
                    *d = *d + g;
                }
            }
            Op::Mse(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let scale = 2.0 * gy[0].f64() / av.len() as f64;
                if needs[a.0] {
                    let da = grad_slot(grads, *a, av.len());
                    for ((d, &x), &y) in da.iter_mut().zip(av).zip(bv) {
                        *d = *d + T::of(scale * (x.f64() - y.f64()));
                    }
                }
                if needs[b.0] {
                    let db = grad_slot(grads, *b, bv.len());
                    for ((d, &x), &y) in db.iter_mut().zip(av).zip(bv) {
                        *d = *d - T::of(scale * (x.f64() - y.f64()));
                    }
                }
            }
        }
    }
}

fn grad_slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Input | Op::Param => vec![],
        Op::Conv2d { x, w, b } => vec![*x, *w, *b],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Gelu(x) | Op::Mean(x) => vec![*x],
        Op::PadRight { x, .. } | Op::Windows { x, .. } => vec![*x],
        Op::Add { a, b, .. } => vec![*a, *b],
        Op::Mul(a, b) | Op::Mse(a, b) => vec![*a, *b],
    }
}

fn dims4(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [a, b, c, d] => Ok((a, b, c, d)),
        _ => Err(Error::invalid(format!(
            "{what} must be rank 4, got shape {shape:?}"
        ))),
    }
}

/// Output rows `r` for which `r + k − pad` lies inside `0..len`.
#[inline]
fn valid_range(len: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (len + pad).saturating_sub(k).min(len);
    (lo, hi.max(lo))
}

/// Mean squared difference accumulated in f64.
pub fn mse_value<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mse", a.shape(), b.shape()));
    }
    if a.is_empty() {
        return Err(Error::invalid("mse of empty tensors"));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.f64() - y.f64();
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}
