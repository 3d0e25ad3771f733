//! Desk-scale reconstruction backbone with adaptor slots, and the
//! mask-conditioned prompt network.
//!
//! Backbone: 3×3 embedding, `B` residual blocks
//! `h ← h + conv3(gelu(conv3(adapt(LN(h)))))`, 1×1 head to Nλ bands.
//! An adaptor is `z ← z + conv1(gelu(conv1(z)))` and sits behind every LN.
//!
//! Prompt: `conv3 → GELU → conv3 → conv1` over the mask, zero-padded on the
//! right to the measurement width.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learncore::graph::{mse_value, Graph, Var};
use crate::learncore::params::{GroupKind, ParamGroup, ParamSet};
use crate::optics::{CodedAperture, DispersionModel, Measurement};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub blocks: usize,
    pub channels: usize,
    pub adaptor_hidden: usize,
    pub bands: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.channels == 0 || self.adaptor_hidden == 0 || self.bands == 0 {
            return Err(Error::invalid(format!(
                "backbone dims must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn backbone_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (c, nb) = (self.channels, self.bands);
        let mut out = vec![
            ("embed.weight".to_string(), vec![c, nb, 3, 3]),
            ("embed.bias".to_string(), vec![c]),
        ];
        for b in 0..self.blocks {
            out.push((format!("block{b}.norm.gamma"), vec![c]));
            out.push((format!("block{b}.norm.beta"), vec![c]));
            out.push((format!("block{b}.conv1.weight"), vec![c, c, 3, 3]));
            out.push((format!("block{b}.conv1.bias"), vec![c]));
            out.push((format!("block{b}.conv2.weight"), vec![c, c, 3, 3]));
            out.push((format!("block{b}.conv2.bias"), vec![c]));
        }
        out.push(("head.weight".to_string(), vec![nb, c, 1, 1]));
        out.push(("head.bias".to_string(), vec![nb]));
        out
    }

    /// One adaptor per normalisation layer.
    pub fn adaptor_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (c, hid) = (self.channels, self.adaptor_hidden);
        let mut out = Vec::new();
        for b in 0..self.blocks {
            out.push((format!("block{b}.adaptor.down.weight"), vec![hid, c, 1, 1]));
            out.push((format!("block{b}.adaptor.down.bias"), vec![hid]));
            out.push((format!("block{b}.adaptor.up.weight"), vec![c, hid, 1, 1]));
            out.push((format!("block{b}.adaptor.up.bias"), vec![c]));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub channels: usize,
}

impl PromptConfig {
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let c = self.channels;
        vec![
            ("conv1.weight".to_string(), vec![c, 1, 3, 3]),
            ("conv1.bias".to_string(), vec![c]),
            ("conv2.weight".to_string(), vec![c, c, 3, 3]),
            ("conv2.bias".to_string(), vec![c]),
            ("head.weight".to_string(), vec![1, c, 1, 1]),
            ("head.bias".to_string(), vec![1]),
        ]
    }
}

/// Everything needed to run the reconstruction pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub backbone: BackboneConfig,
    pub prompt: PromptConfig,
    pub dispersion: DispersionModel,
}

fn check_layout<T: Scalar>(group: &ParamGroup<T>, layout: &[(String, Vec<usize>)]) -> Result<()> {
    if group.len() != layout.len() {
        return Err(Error::invalid(format!(
            "group {} has {} tensors, expected {}",
            group.kind(),
            group.len(),
            layout.len()
        )));
    }
    for (name, shape) in layout {
        group.get(name)?.ensure_shape(shape, name)?;
    }
    Ok(())
}

fn uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| ((rng.random::<f64>() * 2.0 - 1.0) * bound) as f32)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// Uniform(±1/√fan_in) for conv weights and biases; LN γ=1, β=0.
fn init_layout(kind: GroupKind, layout: &[(String, Vec<usize>)], rng: &mut Rng) -> ParamGroup {
    let mut g = ParamGroup::new(kind);
    let mut fan_in = 1usize;
    for (name, shape) in layout {
        let t = if name.ends_with(".gamma") {
            Tensor::full(shape, 1.0)
        } else if name.ends_with(".beta") {
            Tensor::zeros(shape)
        } else if name.ends_with(".weight") {
            fan_in = shape[1..].iter().product();
            uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
        } else {
            uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
        };
        g.insert(name.clone(), t).expect("layout names are unique");
    }
    g
}

pub fn init_backbone(cfg: &BackboneConfig, rng: &mut Rng) -> ParamGroup {
    init_layout(GroupKind::Backbone, &cfg.backbone_layout(), rng)
}

/// Adaptors start as the identity: the `up` projection is zero.
pub fn init_adaptors(cfg: &BackboneConfig, rng: &mut Rng) -> ParamGroup {
    let mut g = init_layout(GroupKind::Adaptor, &cfg.adaptor_layout(), rng);
    for (name, t) in g.iter_mut() {
        if name.contains(".up.") {
            t.data_mut().fill(0.0);
        }
    }
    g
}

pub fn init_prompt(cfg: &PromptConfig, rng: &mut Rng) -> ParamGroup {
    init_layout(GroupKind::Prompt, &cfg.layout(), rng)
}

fn conv<T: Scalar>(g: &mut Graph<T>, group: &ParamGroup<T>, prefix: &str, x: Var) -> Result<Var> {
    let kind = group.kind();
    let w = g.param(
        kind,
        &format!("{prefix}.weight"),
        group.get(&format!("{prefix}.weight"))?,
    )?;
    let b = g.param(
        kind,
        &format!("{prefix}.bias"),
        group.get(&format!("{prefix}.bias"))?,
    )?;
    g.set_scope(format!("{kind}.{prefix}"));
    g.conv2d(x, w, b)
}

/// Backbone on an N×Nλ×H×W graph input, with adaptors when `adaptors` is given.
pub fn backbone_forward<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &BackboneConfig,
    theta: &ParamGroup<T>,
    adaptors: Option<&ParamGroup<T>>,
    input: Var,
) -> Result<Var> {
    cfg.validate()?;
    check_layout(theta, &cfg.backbone_layout())?;
    if let Some(eps) = adaptors {
        check_layout(eps, &cfg.adaptor_layout())?;
    }
    let s = g.value(input).shape();
    if s.len() != 4 || s[1] != cfg.bands {
        return Err(Error::shape(
            "backbone input",
            &[s.first().copied().unwrap_or(1), cfg.bands, 0, 0],
            s,
        ));
    }
    let mut h = conv(g, theta, "embed", input)?;
    for b in 0..cfg.blocks {
        let gamma = g.param(
            GroupKind::Backbone,
            &format!("block{b}.norm.gamma"),
            theta.get(&format!("block{b}.norm.gamma"))?,
        )?;
        let beta = g.param(
            GroupKind::Backbone,
            &format!("block{b}.norm.beta"),
            theta.get(&format!("block{b}.norm.beta"))?,
        )?;
        g.set_scope(format!("backbone.block{b}.norm"));
        let mut z = g.layer_norm(h, gamma, beta)?;
        if let Some(eps) = adaptors {
            let d = conv(g, eps, &format!("block{b}.adaptor.down"), z)?;
            let d = g.gelu(d)?;
            let u = conv(g, eps, &format!("block{b}.adaptor.up"), d)?;
            z = g.add(z, u)?;
        }
        let u = conv(g, theta, &format!("block{b}.conv1"), z)?;
        let u = g.gelu(u)?;
        let u = conv(g, theta, &format!("block{b}.conv2"), u)?;
        g.set_scope(format!("backbone.block{b}"));
        h = g.add(h, u)?;
    }
    conv(g, theta, "head", h)
}

/// Prompt for `mask` as a 1×1×H×(W+pad) graph node.
pub fn prompt_graph<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &PromptConfig,
    phi: &ParamGroup<T>,
    mask: &CodedAperture,
    pad: usize,
) -> Result<Var> {
    check_layout(phi, &cfg.layout())?;
    let m: Tensor<T> = mask.to_tensor().cast();
    let m = g.input(m.reshape(vec![1, 1, mask.height(), mask.width()])?)?;
    let p = conv(g, phi, "conv1", m)?;
    let p = g.gelu(p)?;
    let p = conv(g, phi, "conv2", p)?;
    let p = conv(g, phi, "head", p)?;
    g.pad_right(p, pad)
}

/// Φ(φ; M): an H×(W+Δ) additive prompt that depends only on the mask.
pub fn prompt_forward(
    cfg: &PromptConfig,
    phi: &ParamGroup,
    mask: &CodedAperture,
    disp: &DispersionModel,
    bands: usize,
) -> Result<Tensor<f32>> {
    let mut g = Graph::<f32>::new();
    let v = prompt_graph(&mut g, cfg, phi, mask, disp.spread(bands))?;
    let t = g.value(v).clone();
    let w = t.shape()[3];
    t.reshape(vec![mask.height(), w])
}

/// Aligned measurement `Y + Φ(φ; M)`.
pub fn apply_prompt(y: &Measurement, prompt: &Tensor<f32>) -> Result<Measurement> {
    prompt.ensure_shape(&[y.height(), y.width()], "prompt vs measurement")?;
    let values = y
        .values()
        .iter()
        .zip(prompt.data())
        .map(|(a, b)| a + b)
        .collect();
    Measurement::new(y.height(), y.width(), values)
}

/// Mean squared error over all elements.
pub fn mse_loss(estimate: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64> {
    mse_value(estimate, target)
}

/// Full pipeline on a batch of measurements sharing one mask: optional
/// prompt, shift-back to Nλ windows, backbone (with adaptors if present in
/// `params`). Returns the N×Nλ×H×W reconstruction node.
pub fn pipeline_forward<T: Scalar>(
    g: &mut Graph<T>,
    spec: &ModelSpec,
    params: &ParamSet<T>,
    mask: &CodedAperture,
    ys: &[Measurement],
) -> Result<Var> {
    let bands = spec.backbone.bands;
    let spread = spec.dispersion.spread(bands);
    let Some(first) = ys.first() else {
        return Err(Error::invalid("empty measurement batch"));
    };
    let (h, yw) = (first.height(), first.width());
    if mask.height() != h || mask.width() + spread != yw {
        return Err(Error::shape(
            "mask vs measurement",
            &[h, yw - spread.min(yw)],
            &[mask.height(), mask.width()],
        ));
    }
    let mut data = Vec::with_capacity(ys.len() * h * yw);
    for y in ys {
        if y.height() != h || y.width() != yw {
            return Err(Error::shape(
                "measurement batch",
                &[h, yw],
                &[y.height(), y.width()],
            ));
        }
        data.extend(y.values().iter().map(|&v| T::of(v as f64)));
    }
    let mut x = g.input(Tensor::new(vec![ys.len(), 1, h, yw], data)?)?;
    if let Some(phi) = params.get(GroupKind::Prompt) {
        let p = prompt_graph(g, &spec.prompt, phi, mask, spread)?;
        g.set_scope("apply_prompt");
        x = g.add(x, p)?;
    }
    g.set_scope("shift_back");
    let init = g.windows(x, &spec.dispersion.offsets(bands))?;
    let theta = params.require(GroupKind::Backbone)?;
    backbone_forward(
        g,
        &spec.backbone,
        theta,
        params.get(GroupKind::Adaptor),
        init,
    )
}

/// Batch of cubes as an N×Nλ×H×W target tensor.
pub fn planar_batch<T: Scalar>(cubes: &[&crate::optics::HyperspectralCube]) -> Result<Tensor<T>> {
    let Some(first) = cubes.first() else {
        return Err(Error::invalid("empty cube batch"));
    };
    let (h, w, n) = (first.height(), first.width(), first.bands());
    let mut data = Vec::with_capacity(cubes.len() * h * w * n);
    for c in cubes {
        if (c.height(), c.width(), c.bands()) != (h, w, n) {
            return Err(Error::shape(
                "cube batch",
                &[h, w, n],
                &[c.height(), c.width(), c.bands()],
            ));
        }
        data.extend(c.to_planar().into_iter().map(|v| T::of(v as f64)));
    }
    Tensor::new(vec![cubes.len(), n, h, w], data)
}

/// Backbone on a single H×W×Nλ initialisation, returning H×W×Nλ.
pub fn reconstruct(
    cfg: &BackboneConfig,
    theta: &ParamGroup,
    adaptors: Option<&ParamGroup>,
    y_init: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let [h, w, n] = *y_init.shape() else {
        return Err(Error::invalid(format!(
            "y_init must be H×W×Nλ, got {:?}",
            y_init.shape()
        )));
    };
    let plane = h * w;
    let mut planar = vec![0.0f32; plane * n];
    for (p, px) in y_init.data().chunks_exact(n).enumerate() {
        for (b, &v) in px.iter().enumerate() {
            planar[b * plane + p] = v;
        }
    }
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::new(vec![1, n, h, w], planar)?)?;
    let out = backbone_forward(&mut g, cfg, theta, adaptors, x)?;
    Ok(unplanar(g.value(out).data(), n, h, w))
}

/// Nλ×H×W planar block back to H×W×Nλ.
pub fn unplanar(planar: &[f32], bands: usize, h: usize, w: usize) -> Tensor<f32> {
    let plane = h * w;
    let mut out = vec![0.0f32; plane * bands];
    for b in 0..bands {
        for p in 0..plane {
            out[p * bands + b] = planar[b * plane + p];
        }
    }
    Tensor::new(vec![h, w, bands], out).expect("sizes match")
}
