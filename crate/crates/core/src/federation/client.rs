use std::collections::BTreeMap;

use rand::Rng as _;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::learncore::{
    adam_step, pipeline_forward, planar_batch, Graph, GroupKind, LrSchedule, ModelSpec,
    OptimizerState, ParamGroup, ParamSet,
};
use crate::optics::{encode_with, ClientMasks, HyperspectralCube, MaskPlacement, NoiseModel};
use crate::rng::{client_stream, Rng};
use crate::tensor::Tensor;

/// Everything a training step needs besides the client itself.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainContext {
    pub spec: ModelSpec,
    pub noise: NoiseModel,
    pub placement: MaskPlacement,
    pub batch_size: usize,
}

impl TrainContext {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            spec: cfg.model_spec(),
            noise: cfg.optics.noise,
            placement: cfg.optics.mask_placement,
            batch_size: cfg.training.batch_size,
        }
    }
}

/// One participant: its private cubes and masks, its copies of the three
/// parameter groups, one Adam state per group and its own random stream.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub data: Vec<HyperspectralCube>,
    pub masks: ClientMasks,
    pub backbone: ParamGroup,
    pub adaptors: ParamGroup,
    pub prompt: ParamGroup,
    pub optimizers: BTreeMap<GroupKind, OptimizerState>,
    /// SCAFFOLD control variate `c_i`.
    pub control: Option<ParamGroup>,
    pub rng: Rng,
}

impl ClientState {
    pub fn new(
        id: usize,
        data: Vec<HyperspectralCube>,
        masks: ClientMasks,
        backbone: ParamGroup,
        adaptors: ParamGroup,
        prompt: ParamGroup,
        seed: u64,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Config(format!("client {id} has no training cubes")));
        }
        if masks.masks.is_empty() {
            return Err(Error::Config(format!("client {id} has no coded apertures")));
        }
        let optimizers = [&backbone, &adaptors, &prompt]
            .into_iter()
            .map(|g| (g.kind(), OptimizerState::new(g)))
            .collect();
        Ok(Self {
            id,
            data,
            masks,
            backbone,
            adaptors,
            prompt,
            optimizers,
            control: None,
            rng: client_stream(seed, id),
        })
    }

    pub fn size(&self) -> usize {
        self.data.len()
    }

    pub fn group(&self, kind: GroupKind) -> &ParamGroup {
        match kind {
            GroupKind::Backbone => &self.backbone,
            GroupKind::Prompt => &self.prompt,
            GroupKind::Adaptor => &self.adaptors,
        }
    }

    fn group_mut(&mut self, kind: GroupKind) -> &mut ParamGroup {
        match kind {
            GroupKind::Backbone => &mut self.backbone,
            GroupKind::Prompt => &mut self.prompt,
            GroupKind::Adaptor => &mut self.adaptors,
        }
    }

    fn param_set(&self, uses: &[GroupKind]) -> ParamSet {
        uses.iter()
            .fold(ParamSet::new(), |set, &k| set.with(self.group(k).clone()))
    }
}

/// Per-iteration training losses and the summed learning rate of a stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageReport {
    pub losses: Vec<f64>,
    pub lr_sum: f64,
}

/// Gradient rewrite applied between `backward` and the optimizer step.
type Adjust<'a> = &'a dyn Fn(&ParamGroup, &mut BTreeMap<String, Tensor<f32>>);

/// `iters` Adam steps on group `kind` of `client`. Each step draws one of the
/// client's masks uniformly, a batch of cubes uniformly with replacement,
/// encodes them and regresses the cubes through the groups in `uses`.
fn train_stage(
    client: &mut ClientState,
    ctx: &TrainContext,
    uses: &[GroupKind],
    kind: GroupKind,
    iters: usize,
    schedule: LrSchedule,
    adjust: Option<Adjust<'_>>,
) -> Result<StageReport> {
    let mut report = StageReport::default();
    for _ in 0..iters {
        let k = client.rng.random_range(0..client.masks.masks.len());
        let picks: Vec<usize> = (0..ctx.batch_size)
            .map(|_| client.rng.random_range(0..client.data.len()))
            .collect();
        let mask = &client.masks.masks[k];
        let mut ys = Vec::with_capacity(picks.len());
        for &i in &picks {
            ys.push(encode_with(
                &client.data[i],
                mask,
                &ctx.spec.dispersion,
                ctx.placement,
                &ctx.noise,
                &mut client.rng,
            )?);
        }
        let cubes: Vec<&HyperspectralCube> = picks.iter().map(|&i| &client.data[i]).collect();
        let target = planar_batch::<f32>(&cubes)?;

        let params = client.param_set(uses);
        let mut g = Graph::<f32>::new();
        let out = pipeline_forward(&mut g, &ctx.spec, &params, mask, &ys)?;
        g.set_scope("loss");
        let t = g.input(target)?;
        let loss = g.mse(out, t)?;
        report.losses.push(g.value(loss).data()[0] as f64);
        let mut grads = g
            .backward(loss, &[kind])?
            .remove(&kind)
            .ok_or_else(|| Error::UnknownGroup(kind.to_string()))?;
        if let Some(adjust) = adjust {
            adjust(client.group(kind), &mut grads);
        }

        let mut state = client
            .optimizers
            .remove(&kind)
            .ok_or_else(|| Error::UnknownGroup(kind.to_string()))?;
        let lr = schedule.rate(state.step);
        let step = adam_step(client.group_mut(kind), &grads, &mut state, lr);
        client.optimizers.insert(kind, state);
        step?;
        report.lr_sum += lr;
    }
    Ok(report)
}

/// Plain local training of the whole backbone.
pub fn train_backbone(
    client: &mut ClientState,
    iters: usize,
    ctx: &TrainContext,
    schedule: LrSchedule,
) -> Result<StageReport> {
    train_stage(
        client,
        ctx,
        &[GroupKind::Backbone],
        GroupKind::Backbone,
        iters,
        schedule,
        None,
    )
}

/// Trains the client's backbone on its own encoded data for `iters` steps and
/// freezes it. Returns the frozen backbone θ_c^p.
pub fn pretrain_client(
    client: &mut ClientState,
    iters: usize,
    ctx: &TrainContext,
    schedule: LrSchedule,
) -> Result<(ParamGroup, StageReport)> {
    client.backbone.set_trainable(true);
    let report = train_backbone(client, iters, ctx, schedule)?;
    client.backbone.set_trainable(false);
    Ok((client.backbone.clone(), report))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FedhpReport {
    pub prompt: StageReport,
    pub adaptor: StageReport,
}

/// Two-stage FedHP update on a frozen backbone. Stage 1 starts the local
/// prompt from `global` (when given) and trains only the prompt; stage 2
/// trains only the adaptors. Returns the local prompt φ_c; the adaptors stay
/// on the client.
pub fn local_update_fedhp(
    client: &mut ClientState,
    global: Option<&ParamGroup>,
    prompt_iters: usize,
    adaptor_iters: usize,
    ctx: &TrainContext,
    schedules: (LrSchedule, LrSchedule),
) -> Result<(ParamGroup, FedhpReport)> {
    if client.backbone.trainable() {
        return Err(Error::invalid(format!(
            "client {} backbone must be pre-trained and frozen",
            client.id
        )));
    }
    if let Some(global) = global {
        if !global.same_layout(&client.prompt) || global.kind() != GroupKind::Prompt {
            return Err(Error::invalid(
                "global prompt does not match the local prompt layout",
            ));
        }
        client.prompt = global.clone();
    }
    let uses = [GroupKind::Backbone, GroupKind::Prompt, GroupKind::Adaptor];

    client.prompt.set_trainable(true);
    client.adaptors.set_trainable(false);
    let prompt = train_stage(
        client,
        ctx,
        &uses,
        GroupKind::Prompt,
        prompt_iters,
        schedules.0,
        None,
    )?;

    client.prompt.set_trainable(false);
    client.adaptors.set_trainable(true);
    let adaptor = train_stage(
        client,
        ctx,
        &uses,
        GroupKind::Adaptor,
        adaptor_iters,
        schedules.1,
        None,
    )?;

    Ok((client.prompt.clone(), FedhpReport { prompt, adaptor }))
}

fn take_global(client: &mut ClientState, global: &ParamGroup) -> Result<()> {
    if !global.same_layout(&client.backbone) || global.kind() != GroupKind::Backbone {
        return Err(Error::invalid(
            "global model does not match the local backbone layout",
        ));
    }
    client.backbone = global.clone();
    client.backbone.set_trainable(true);
    Ok(())
}

/// `iters` local steps on the whole backbone starting from `global`.
pub fn local_update_fedavg(
    client: &mut ClientState,
    global: &ParamGroup,
    iters: usize,
    ctx: &TrainContext,
    schedule: LrSchedule,
) -> Result<(ParamGroup, StageReport)> {
    take_global(client, global)?;
    let report = train_backbone(client, iters, ctx, schedule)?;
    Ok((client.backbone.clone(), report))
}

/// FedAvg with the proximal term `(μ/2)·‖θ − θ_G‖²` added to the local loss.
/// With `μ = 0` the gradients are left untouched.
pub fn local_update_fedprox(
    client: &mut ClientState,
    global: &ParamGroup,
    iters: usize,
    mu: f64,
    ctx: &TrainContext,
    schedule: LrSchedule,
) -> Result<(ParamGroup, StageReport)> {
    take_global(client, global)?;
    let anchor = global.clone();
    let prox = move |theta: &ParamGroup, grads: &mut BTreeMap<String, Tensor<f32>>| {
        add_proximal(theta, &anchor, mu, grads)
    };
    let adjust: Option<Adjust<'_>> = (mu > 0.0).then_some(&prox as Adjust<'_>);
    let report = train_stage(
        client,
        ctx,
        &[GroupKind::Backbone],
        GroupKind::Backbone,
        iters,
        schedule,
        adjust,
    )?;
    Ok((client.backbone.clone(), report))
}

/// Adds `μ·(θ − θ_G)` to every gradient.
pub fn add_proximal(
    theta: &ParamGroup,
    anchor: &ParamGroup,
    mu: f64,
    grads: &mut BTreeMap<String, Tensor<f32>>,
) {
    for (name, g) in grads.iter_mut() {
        let (Ok(p), Ok(a)) = (theta.get(name), anchor.get(name)) else {
            continue;
        };
        for ((gv, &pv), &av) in g.data_mut().iter_mut().zip(p.data()).zip(a.data()) {
            *gv = (*gv as f64 + mu * (pv as f64 - av as f64)) as f32;
        }
    }
}

/// A zero-valued group with the same layout as `like`.
pub fn zeros_like(like: &ParamGroup) -> ParamGroup {
    let mut g = ParamGroup::new(like.kind());
    for (name, t) in like.iter() {
        g.insert(name.clone(), Tensor::zeros(t.shape()))
            .expect("names are unique in the source group");
    }
    g
}

/// Option-II control-variate refresh:
/// `c_i⁺ = c_i − c + (θ_G − θ_c) / lr_sum`, where `lr_sum` is the sum of the
/// learning rates of the local steps (S·lr for a constant rate).
pub fn control_variate_update(
    local: &ParamGroup,
    server: &ParamGroup,
    global: &ParamGroup,
    trained: &ParamGroup,
    lr_sum: f64,
) -> Result<ParamGroup> {
    if lr_sum <= 0.0 {
        return Ok(local.clone());
    }
    let mut out = ParamGroup::new(local.kind());
    for (name, ci) in local.iter() {
        let (c, g, t) = (server.get(name)?, global.get(name)?, trained.get(name)?);
        let data = ci
            .data()
            .iter()
            .zip(c.data())
            .zip(g.data().iter().zip(t.data()))
            .map(|((&ci, &c), (&g, &t))| {
                (ci as f64 - c as f64 + (g as f64 - t as f64) / lr_sum) as f32
            })
            .collect();
        out.insert(name.clone(), Tensor::new(ci.shape().to_vec(), data)?)?;
    }
    Ok(out)
}

/// SCAFFOLD local update. Each step uses `g + c − c_i`; the correction is
/// only applied where it is non-zero. Returns θ_c and `Δc = c_i⁺ − c_i`.
pub fn local_update_scaffold(
    client: &mut ClientState,
    global: &ParamGroup,
    server_control: &ParamGroup,
    iters: usize,
    ctx: &TrainContext,
    schedule: LrSchedule,
) -> Result<(ParamGroup, ParamGroup, StageReport)> {
    take_global(client, global)?;
    if !server_control.same_layout(&client.backbone) {
        return Err(Error::invalid(
            "server control variate does not match the backbone",
        ));
    }
    let local = client
        .control
        .take()
        .unwrap_or_else(|| zeros_like(&client.backbone));
    let mut correction = BTreeMap::new();
    for (name, c) in server_control.iter() {
        let ci = local.get(name)?;
        let diff: Vec<f64> = c
            .data()
            .iter()
            .zip(ci.data())
            .map(|(&c, &ci)| c as f64 - ci as f64)
            .collect();
        if diff.iter().any(|&d| d != 0.0) {
            correction.insert(name.clone(), diff);
        }
    }
    let correct = |_: &ParamGroup, grads: &mut BTreeMap<String, Tensor<f32>>| {
        for (name, diff) in &correction {
            if let Some(g) = grads.get_mut(name) {
                for (gv, &d) in g.data_mut().iter_mut().zip(diff) {
                    if d != 0.0 {
                        *gv = (*gv as f64 + d) as f32;
                    }
                }
            }
        }
    };
    let adjust: Option<Adjust<'_>> = (!correction.is_empty()).then_some(&correct as Adjust<'_>);
    let report = train_stage(
        client,
        ctx,
        &[GroupKind::Backbone],
        GroupKind::Backbone,
        iters,
        schedule,
        adjust,
    );
    let report = match report {
        Ok(r) => r,
        Err(e) => {
            client.control = Some(local);
            return Err(e);
        }
    };
    let updated = control_variate_update(
        &local,
        server_control,
        global,
        &client.backbone,
        report.lr_sum,
    )?;
    let mut delta = ParamGroup::new(local.kind());
    for (name, new) in updated.iter() {
        let old = local.get(name)?;
        let data = new
            .data()
            .iter()
            .zip(old.data())
            .map(|(&n, &o)| (n as f64 - o as f64) as f32)
            .collect();
        delta.insert(name.clone(), Tensor::new(new.shape().to_vec(), data)?)?;
    }
    client.control = Some(updated);
    Ok((client.backbone.clone(), delta, report))
}

/// A single virtual client holding every client's cubes and masks (in client
/// order), trained on the union. With one client it is that client.
pub fn joint_client(clients: &[ClientState], init: &ParamGroup, seed: u64) -> Result<ClientState> {
    let first = clients
        .first()
        .ok_or_else(|| Error::invalid("joint training needs at least one client"))?;
    let data = clients
        .iter()
        .flat_map(|c| c.data.iter().cloned())
        .collect();
    let mut masks = first.masks.clone();
    masks.masks = clients
        .iter()
        .flat_map(|c| c.masks.masks.iter().cloned())
        .collect();
    let mut backbone = init.clone();
    backbone.set_trainable(true);
    ClientState::new(
        0,
        data,
        masks,
        backbone,
        first.adaptors.clone(),
        first.prompt.clone(),
        seed,
    )
}

/// Centralised training on the union of all clients' data and masks.
pub fn train_centralized_joint(
    clients: &[ClientState],
    init: &ParamGroup,
    iters: usize,
    ctx: &TrainContext,
    schedule: LrSchedule,
    seed: u64,
) -> Result<(ParamGroup, StageReport)> {
    let mut joint = joint_client(clients, init, seed)?;
    let report = train_backbone(&mut joint, iters, ctx, schedule)?;
    Ok((joint.backbone, report))
}
