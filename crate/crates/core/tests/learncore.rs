use std::collections::BTreeMap;

use fedhp_core::learncore::graph::Graph;
use fedhp_core::learncore::model::{planar_batch, unplanar};
use fedhp_core::learncore::*;
use fedhp_core::optics::{
    sample_mask, CodedAperture, DispersionModel, HyperspectralCube, MaskDistribution, Measurement,
};
use fedhp_core::rng::substream;
use fedhp_core::tensor::Tensor;
use rand::Rng as _;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = substream(seed, 77);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random::<f32>()).collect(),
    )
    .unwrap()
}

fn tiny_cfg() -> BackboneConfig {
    BackboneConfig {
        blocks: 1,
        channels: 4,
        adaptor_hidden: 3,
        bands: 3,
    }
}

/// Perturb a freshly initialised group so no tensor is exactly zero.
fn jitter(group: &mut ParamGroup, seed: u64) {
    let mut rng = substream(seed, 99);
    for (_, t) in group.iter_mut() {
        for v in t.data_mut() {
            *v += (rng.random::<f32>() - 0.5) * 0.2;
        }
    }
}

// ---------- loop-based forward oracle ----------

fn o_conv(x: &[Vec<Vec<f64>>], w: &Tensor<f32>, b: &Tensor<f32>) -> Vec<Vec<Vec<f64>>> {
    let s = w.shape();
    let (co, ci, k) = (s[0], s[1], s[2]);
    let h = x[0].len();
    let wd = x[0][0].len();
    let pad = (k / 2) as i64;
    let mut out = vec![vec![vec![0.0; wd]; h]; co];
    for o in 0..co {
        for r in 0..h {
            for c in 0..wd {
                let mut acc = b.data()[o] as f64;
                for i in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let rr = r as i64 + ky as i64 - pad;
                            let cc = c as i64 + kx as i64 - pad;
                            if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < wd {
                                acc += w.data()[((o * ci + i) * k + ky) * k + kx] as f64
                                    * x[i][rr as usize][cc as usize];
                            }
                        }
                    }
                }
                out[o][r][c] = acc;
            }
        }
    }
    out
}

fn o_gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
}

fn o_ln(x: &[Vec<Vec<f64>>], g: &Tensor<f32>, b: &Tensor<f32>) -> Vec<Vec<Vec<f64>>> {
    let c = x.len();
    let mut out = x.to_vec();
    for r in 0..x[0].len() {
        for col in 0..x[0][0].len() {
            let mean: f64 = (0..c).map(|i| x[i][r][col]).sum::<f64>() / c as f64;
            let var: f64 = (0..c).map(|i| (x[i][r][col] - mean).powi(2)).sum::<f64>() / c as f64;
            for i in 0..c {
                out[i][r][col] = (x[i][r][col] - mean) / (var + 1e-5).sqrt() * g.data()[i] as f64
                    + b.data()[i] as f64;
            }
        }
    }
    out
}

fn add3(a: &[Vec<Vec<f64>>], b: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<f64>>> {
    a.iter()
        .zip(b)
        .map(|(p, q)| {
            p.iter()
                .zip(q)
                .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
                .collect()
        })
        .collect()
}

fn map3(a: &[Vec<Vec<f64>>], f: fn(f64) -> f64) -> Vec<Vec<Vec<f64>>> {
    a.iter()
        .map(|p| {
            p.iter()
                .map(|r| r.iter().map(|&x| f(x)).collect())
                .collect()
        })
        .collect()
}

fn oracle_backbone(
    cfg: &BackboneConfig,
    theta: &ParamGroup,
    eps: Option<&ParamGroup>,
    y_init: &Tensor<f32>,
) -> Vec<f64> {
    let [h, w, n] = *y_init.shape() else { panic!() };
    let x: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|b| {
            (0..h)
                .map(|r| {
                    (0..w)
                        .map(|c| y_init.data()[(r * w + c) * n + b] as f64)
                        .collect()
                })
                .collect()
        })
        .collect();
    let t = |k: &str| theta.get(k).unwrap();
    let mut hcur = o_conv(&x, t("embed.weight"), t("embed.bias"));
    for b in 0..cfg.blocks {
        let mut z = o_ln(
            &hcur,
            t(&format!("block{b}.norm.gamma")),
            t(&format!("block{b}.norm.beta")),
        );
        if let Some(e) = eps {
            let e = |k: String| e.get(&k).unwrap();
            let d = o_conv(
                &z,
                e(format!("block{b}.adaptor.down.weight")),
                e(format!("block{b}.adaptor.down.bias")),
            );
            let d = map3(&d, o_gelu);
            let u = o_conv(
                &d,
                e(format!("block{b}.adaptor.up.weight")),
                e(format!("block{b}.adaptor.up.bias")),
            );
            z = add3(&z, &u);
        }
        let u = o_conv(
            &z,
            t(&format!("block{b}.conv1.weight")),
            t(&format!("block{b}.conv1.bias")),
        );
        let u = map3(&u, o_gelu);
        let u = o_conv(
            &u,
            t(&format!("block{b}.conv2.weight")),
            t(&format!("block{b}.conv2.bias")),
        );
        hcur = add3(&hcur, &u);
    }
    let out = o_conv(&hcur, t("head.weight"), t("head.bias"));
    let mut flat = vec![0.0; h * w * n];
    for b in 0..n {
        for r in 0..h {
            for c in 0..w {
                flat[(r * w + c) * n + b] = out[b][r][c];
            }
        }
    }
    flat
}

#[test]
fn backbone_matches_loop_oracle() {
    let cfg = tiny_cfg();
    let mut rng = substream(11, 0);
    let theta = init_backbone(&cfg, &mut rng);
    let mut eps = init_adaptors(&cfg, &mut rng);
    jitter(&mut eps, 3);
    let y = rand_tensor(&[8, 8, 3], 5);
    for adapt in [None, Some(&eps)] {
        let got = reconstruct(&cfg, &theta, adapt, &y).unwrap();
        let want = oracle_backbone(&cfg, &theta, adapt, &y);
        assert_eq!(got.shape(), &[8, 8, 3]);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
}

#[test]
fn zero_input_and_zero_head_gives_zero_output() {
    let cfg = tiny_cfg();
    let mut theta = init_backbone(&cfg, &mut substream(1, 0));
    theta.get_mut("head.weight").unwrap().data_mut().fill(0.0);
    theta.get_mut("head.bias").unwrap().data_mut().fill(0.0);
    let out = reconstruct(&cfg, &theta, None, &Tensor::zeros(&[8, 8, 3])).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_initialised_adaptors_are_identity() {
    let cfg = BackboneConfig {
        blocks: 2,
        channels: 8,
        adaptor_hidden: 4,
        bands: 4,
    };
    let mut rng = substream(2, 0);
    let theta = init_backbone(&cfg, &mut rng);
    let eps = init_adaptors(&cfg, &mut rng);
    for seed in 0..3 {
        let y = rand_tensor(&[16, 16, 4], seed);
        let plain = reconstruct(&cfg, &theta, None, &y).unwrap();
        let adapted = reconstruct(&cfg, &theta, Some(&eps), &y).unwrap();
        assert_eq!(plain, adapted);
    }
}

#[test]
fn backbone_rejects_bad_shapes() {
    let cfg = tiny_cfg();
    let theta = init_backbone(&cfg, &mut substream(1, 0));
    assert!(reconstruct(&cfg, &theta, None, &Tensor::zeros(&[8, 8, 2])).is_err());
    let other = BackboneConfig { channels: 5, ..cfg };
    assert!(reconstruct(&other, &theta, None, &Tensor::zeros(&[8, 8, 3])).is_err());
}

#[test]
fn non_finite_activation_names_the_tensor() {
    let cfg = tiny_cfg();
    let mut theta = init_backbone(&cfg, &mut substream(1, 0));
    theta.get_mut("block0.conv1.bias").unwrap().data_mut()[0] = f32::MAX;
    theta
        .get_mut("block0.conv1.weight")
        .unwrap()
        .data_mut()
        .fill(f32::MAX);
    let err = reconstruct(&cfg, &theta, None, &rand_tensor(&[8, 8, 3], 1)).unwrap_err();
    match err {
        fedhp_core::Error::NonFinite(name) => assert!(name.contains("block0"), "{name}"),
        other => panic!("unexpected {other}"),
    }
}

// ---------- prompt ----------

fn bern_mask(seed: u64, h: usize, w: usize) -> CodedAperture {
    sample_mask(
        &MaskDistribution::Bernoulli { p: 0.5 },
        h,
        w,
        &mut substream(seed, 1),
    )
    .unwrap()
}

#[test]
fn prompt_shape_and_zero_head() {
    let pc = PromptConfig { channels: 4 };
    let disp = DispersionModel::new(2, 0);
    let mut phi = init_prompt(&pc, &mut substream(3, 0));
    let mask = bern_mask(1, 16, 16);
    let p = prompt_forward(&pc, &phi, &mask, &disp, 4).unwrap();
    assert_eq!(p.shape(), &[16, 22]);
    // padded region is zero
    for r in 0..16 {
        assert!(p.data()[r * 22 + 16..r * 22 + 22].iter().all(|&v| v == 0.0));
    }

    phi.get_mut("head.weight").unwrap().data_mut().fill(0.0);
    phi.get_mut("head.bias").unwrap().data_mut().fill(0.0);
    let p = prompt_forward(&pc, &phi, &mask, &disp, 4).unwrap();
    assert!(p.data().iter().all(|&v| v == 0.0));
    let y = Measurement::new(16, 22, rand_tensor(&[16, 22], 4).into_data()).unwrap();
    assert_eq!(apply_prompt(&y, &p).unwrap(), y);
}

#[test]
fn prompt_depends_on_mask() {
    let pc = PromptConfig { channels: 4 };
    let disp = DispersionModel::new(2, 0);
    let phi = init_prompt(&pc, &mut substream(3, 0));
    for i in 0..10 {
        let a = prompt_forward(&pc, &phi, &bern_mask(2 * i, 16, 16), &disp, 4).unwrap();
        let b = prompt_forward(&pc, &phi, &bern_mask(2 * i + 1, 16, 16), &disp, 4).unwrap();
        let diff = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f32::max);
        assert!(diff > 0.0);
    }
    let small = bern_mask(0, 8, 8);
    let p = prompt_forward(&pc, &phi, &small, &disp, 4).unwrap();
    assert_eq!(p.shape(), &[8, 14]);
}

#[test]
fn apply_prompt_cases() {
    let yv = rand_tensor(&[3, 5], 8);
    let y = Measurement::new(3, 5, yv.data().to_vec()).unwrap();
    let neg = Tensor::new(vec![3, 5], yv.data().iter().map(|v| -v).collect()).unwrap();
    assert!(apply_prompt(&y, &neg)
        .unwrap()
        .values()
        .iter()
        .all(|&v| v == 0.0));
    let p = rand_tensor(&[3, 5], 9);
    let out = apply_prompt(&y, &p).unwrap();
    for i in 0..15 {
        assert_eq!(out.values()[i], yv.data()[i] + p.data()[i]);
    }
    assert!(apply_prompt(&y, &Tensor::zeros(&[3, 4])).is_err());
}

// ---------- loss and backward ----------

#[test]
fn mse_loss_cases() {
    let a = rand_tensor(&[4, 4], 1);
    assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
    let shifted = Tensor::new(vec![4, 4], a.data().iter().map(|v| v + 0.1).collect()).unwrap();
    assert!((mse_loss(&shifted, &a).unwrap() - 0.01).abs() < 1e-7);
    let b = rand_tensor(&[4, 4], 2);
    let mut oracle = 0.0f64;
    for i in 0..16 {
        oracle += (a.data()[i] as f64 - b.data()[i] as f64).powi(2);
    }
    assert!((mse_loss(&a, &b).unwrap() - oracle / 16.0).abs() < 1e-7);
    assert!(mse_loss(&a, &Tensor::zeros(&[2, 8])).is_err());
}

#[test]
fn square_gradient_is_six_at_three() {
    let mut g = Graph::<f64>::new();
    let w = g
        .param(GroupKind::Backbone, "w", &Tensor::scalar(3.0))
        .unwrap();
    let sq = g.mul(w, w).unwrap();
    let loss = g.mean(sq).unwrap();
    let grads = g.backward(loss, &[GroupKind::Backbone]).unwrap();
    assert_eq!(grads[&GroupKind::Backbone]["w"].data(), &[6.0]);
}

#[test]
fn mse_gradient_is_scaled_residual() {
    let mut g = Graph::<f64>::new();
    let x = Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
    let t = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
    let xv = g.param(GroupKind::Prompt, "x", &x).unwrap();
    let tv = g.input(t.clone()).unwrap();
    let l = g.mse(xv, tv).unwrap();
    let grads = g.backward(l, &[GroupKind::Prompt]).unwrap();
    let d = grads[&GroupKind::Prompt]["x"].data().to_vec();
    for i in 0..4 {
        assert_eq!(d[i], 2.0 * (x.data()[i] - t.data()[i]) / 4.0);
    }
}

#[test]
fn backward_rejects_unbound_group() {
    let mut g = Graph::<f32>::new();
    let w = g
        .param(GroupKind::Backbone, "w", &Tensor::scalar(1.0))
        .unwrap();
    let l = g.mean(w).unwrap();
    assert!(matches!(
        g.backward(l, &[GroupKind::Adaptor]),
        Err(fedhp_core::Error::UnknownGroup(_))
    ));
}

fn desk_spec(h: usize) -> (ModelSpec, usize) {
    let spec = ModelSpec {
        backbone: BackboneConfig {
            blocks: 2,
            channels: 8,
            adaptor_hidden: 4,
            bands: 4,
        },
        prompt: PromptConfig { channels: 4 },
        dispersion: DispersionModel::new(2, 0),
    };
    (spec, h)
}

fn desk_problem(
    seed: u64,
) -> (
    ModelSpec,
    ParamSet,
    CodedAperture,
    Vec<Measurement>,
    HyperspectralCube,
) {
    let (spec, h) = desk_spec(16);
    let mut rng = substream(seed, 0);
    let theta = init_backbone(&spec.backbone, &mut rng);
    let mut eps = init_adaptors(&spec.backbone, &mut rng);
    jitter(&mut eps, seed);
    let phi = init_prompt(&spec.prompt, &mut rng);
    let params = ParamSet::new().with(theta).with(eps).with(phi);
    let mask = bern_mask(seed, h, h);
    let cube = HyperspectralCube::new(h, h, 4, rand_tensor(&[h, h, 4], seed).into_data()).unwrap();
    let y = fedhp_core::optics::encode(
        &cube,
        &mask,
        &spec.dispersion,
        &fedhp_core::optics::NoiseModel::None,
        &mut rng,
    )
    .unwrap();
    (spec, params, mask, vec![y], cube)
}

#[test]
fn freezing_contract_only_requested_groups_get_gradients() {
    let (spec, params, mask, ys, cube) = desk_problem(4);
    let mut g = Graph::<f32>::new();
    let out = pipeline_forward(&mut g, &spec, &params, &mask, &ys).unwrap();
    let target = g.input(planar_batch(&[&cube]).unwrap()).unwrap();
    let loss = g.mse(out, target).unwrap();
    let gp = g.backward(loss, &[GroupKind::Prompt]).unwrap();
    assert_eq!(
        gp.keys().copied().collect::<Vec<_>>(),
        vec![GroupKind::Prompt]
    );
    let ga = g.backward(loss, &[GroupKind::Adaptor]).unwrap();
    assert_eq!(
        ga.keys().copied().collect::<Vec<_>>(),
        vec![GroupKind::Adaptor]
    );
    assert!(ga[&GroupKind::Adaptor].values().any(|t| t.sq_norm() > 0.0));

    // optimizer step on the prompt leaves the other groups bitwise intact
    let mut p2 = params.clone();
    let mut st = OptimizerState::new(p2.get(GroupKind::Prompt).unwrap());
    adam_step(
        p2.get_mut(GroupKind::Prompt).unwrap(),
        &gp[&GroupKind::Prompt],
        &mut st,
        1e-3,
    )
    .unwrap();
    for k in [GroupKind::Backbone, GroupKind::Adaptor] {
        assert!(p2.get(k).unwrap().bit_identical(params.get(k).unwrap()));
    }
    assert!(!p2
        .get(GroupKind::Prompt)
        .unwrap()
        .bit_identical(params.get(GroupKind::Prompt).unwrap()));
}

#[test]
fn perfect_reconstruction_has_zero_gradients() {
    let mut g = Graph::<f32>::new();
    let x = rand_tensor(&[1, 2, 3, 3], 3);
    let w = g
        .param(GroupKind::Backbone, "w", &Tensor::zeros(&[2, 2, 1, 1]))
        .unwrap();
    let mut eye = Tensor::zeros(&[2, 2, 1, 1]);
    eye.data_mut()[0] = 1.0;
    eye.data_mut()[3] = 1.0;
    let w2 = g.param(GroupKind::Backbone, "eye", &eye).unwrap();
    let b = g
        .param(GroupKind::Backbone, "b", &Tensor::zeros(&[2]))
        .unwrap();
    let xi = g.input(x.clone()).unwrap();
    let y = g.conv2d(xi, w2, b).unwrap();
    let zero = g.conv2d(xi, w, b).unwrap();
    let y = g.add(y, zero).unwrap();
    let t = g.input(x).unwrap();
    let loss = g.mse(y, t).unwrap();
    let grads = g.backward(loss, &[GroupKind::Backbone]).unwrap();
    assert!(grads[&GroupKind::Backbone]
        .values()
        .all(|t| t.data().iter().all(|&v| v == 0.0)));
}

fn pipeline_loss(
    spec: &ModelSpec,
    mask: &CodedAperture,
    ys: &[Measurement],
    cube: &HyperspectralCube,
) -> impl Fn(&mut Graph<f64>, &ParamSet<f64>) -> fedhp_core::Result<Var> {
    let spec = *spec;
    let mask = mask.clone();
    let ys = ys.to_vec();
    let target: Tensor<f64> = planar_batch(&[cube]).unwrap();
    move |g, p| {
        let out = pipeline_forward(g, &spec, p, &mask, &ys)?;
        let t = g.input(target.clone())?;
        g.mse(out, t)
    }
}

#[test]
fn linear_model_gradients_are_exact() {
    let x: Tensor<f64> = rand_tensor(&[2, 3, 5, 5], 4).cast();
    let mut grp = ParamGroup::<f64>::new(GroupKind::Backbone);
    grp.insert("w", rand_tensor(&[2, 3, 3, 3], 5).cast())
        .unwrap();
    grp.insert("b", rand_tensor(&[2], 6).cast()).unwrap();
    let params = ParamSet::new().with(grp);
    let report = grad_check(
        &params,
        &[GroupKind::Backbone],
        &GradCheckOptions::default(),
        |g, p| {
            let grp = p.require(GroupKind::Backbone)?;
            let w = g.param(GroupKind::Backbone, "w", grp.get("w")?)?;
            let b = g.param(GroupKind::Backbone, "b", grp.get("b")?)?;
            let xi = g.input(x.clone())?;
            let y = g.conv2d(xi, w, b)?;
            g.mean(y)
        },
    )
    .unwrap();
    assert!(report.max_rel_error() <= 1e-8, "{report:?}");
}

#[test]
fn tiny_backbone_gradients_match_finite_differences() {
    let cfg = tiny_cfg();
    let mut rng = substream(21, 0);
    let theta = init_backbone(&cfg, &mut rng);
    let mut eps = init_adaptors(&cfg, &mut rng);
    jitter(&mut eps, 1);
    let x: Tensor<f64> = rand_tensor(&[1, 3, 8, 8], 2).cast();
    let t: Tensor<f64> = rand_tensor(&[1, 3, 8, 8], 3).cast();
    let params = ParamSet::new().with(theta).with(eps).cast::<f64>();
    let report = grad_check(
        &params,
        &[GroupKind::Backbone, GroupKind::Adaptor],
        &GradCheckOptions::default(),
        |g, p| {
            let xi = g.input(x.clone())?;
            let out = backbone_forward(
                g,
                &cfg,
                p.require(GroupKind::Backbone)?,
                p.get(GroupKind::Adaptor),
                xi,
            )?;
            let ti = g.input(t.clone())?;
            g.mse(out, ti)
        },
    )
    .unwrap();
    for (k, c) in &report.groups {
        let size = params.get(*k).unwrap().param_count();
        assert_eq!(c.coordinates, size.min(50), "{k}");
        assert!(c.max_rel_error <= 1e-3, "{k}: {c:?}");
    }
}

#[test]
fn prompt_gradients_match_finite_differences() {
    let (spec, params, mask, ys, cube) = desk_problem(6);
    let report = grad_check(
        &params.cast(),
        &[GroupKind::Prompt],
        &GradCheckOptions {
            seed: 3,
            ..Default::default()
        },
        pipeline_loss(&spec, &mask, &ys, &cube),
    )
    .unwrap();
    assert!(report.max_rel_error() <= 1e-3, "{report:?}");
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let (spec, mut params, mask, ys, cube) = desk_problem(8);
        let mut st = OptimizerState::new(params.get(GroupKind::Adaptor).unwrap());
        for _ in 0..5 {
            let mut g = Graph::<f32>::new();
            let out = pipeline_forward(&mut g, &spec, &params, &mask, &ys).unwrap();
            let t = g.input(planar_batch(&[&cube]).unwrap()).unwrap();
            let l = g.mse(out, t).unwrap();
            let gr = g.backward(l, &[GroupKind::Adaptor]).unwrap();
            adam_step(
                params.get_mut(GroupKind::Adaptor).unwrap(),
                &gr[&GroupKind::Adaptor],
                &mut st,
                1e-2,
            )
            .unwrap();
        }
        params
    };
    let a = run();
    let b = run();
    for k in GroupKind::ALL {
        assert!(a.get(k).unwrap().bit_identical(b.get(k).unwrap()));
    }
}

#[test]
fn unplanar_inverts_planar() {
    let cube = HyperspectralCube::new(3, 4, 2, rand_tensor(&[3, 4, 2], 1).into_data()).unwrap();
    let back = unplanar(&cube.to_planar(), 2, 3, 4);
    assert_eq!(back, cube.to_tensor());
    let _ = BTreeMap::<u8, u8>::new();
}
