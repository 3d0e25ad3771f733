use rand::Rng as _;
use rayon::prelude::*;

use crate::config::{Algorithm, ExperimentConfig};
use crate::dataio::{
    build_dataset, split_dataset, Checkpoint, CheckpointWriter, Dataset, Manifest, TensorRole,
};
use crate::error::{Error, Result};
use crate::federation::client::{
    joint_client, local_update_fedavg, local_update_fedhp, local_update_fedprox,
    local_update_scaffold, pretrain_client, train_backbone, zeros_like, ClientState, TrainContext,
};
use crate::federation::history::{MaskKind, MetricsHistory, MetricsRecord, Split};
use crate::federation::server::{aggregate, update_server_control, Message, Party, ServerState};
use crate::learncore::{
    init_adaptors, init_backbone, init_prompt, mse_loss, pipeline_forward, planar_batch, unplanar,
    Graph, GroupKind, ParamGroup, ParamSet,
};
use crate::metrics::quality;
use crate::optics::{
    encode_with, make_scenario, sample_mask, ClientMasks, CodedAperture, HyperspectralCube,
    Scenario, ScenarioSpec,
};
use crate::rng::{
    substream, Rng, STREAM_EVAL, STREAM_EVAL_NOISE_BASE, STREAM_INIT_ADAPTOR, STREAM_INIT_BACKBONE,
    STREAM_INIT_PROMPT, STREAM_SCENARIO, STREAM_SERVER, STREAM_TRIAL_BASE,
};

/// Parameter initialisations shared by every client.
#[derive(Clone, Debug)]
pub struct InitialParams {
    pub backbone: ParamGroup,
    pub adaptors: ParamGroup,
    /// Output layer zeroed, so the initial prompt adds nothing.
    pub prompt: ParamGroup,
}

/// A validated config with its data, masks and initial parameters
/// materialised. Everything is a pure function of the config.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub ctx: TrainContext,
    pub dataset: Dataset,
    pub partition: Vec<Vec<usize>>,
    pub scenario: Scenario,
    /// Fresh masks per client, drawn from that client's distribution.
    pub unseen: Vec<Vec<CodedAperture>>,
    pub init: InitialParams,
}

impl Experiment {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let (h, w) = (config.data.height, config.data.width);
        let dataset = build_dataset(&config.data, seed)?;
        let partition = split_dataset(dataset.train.len(), config.scenario.clients, seed)?;
        let scenario = make_scenario(
            &config.scenario,
            h,
            w,
            &mut substream(seed, STREAM_SCENARIO),
        )?;
        let unseen = unseen_masks(
            &config.scenario,
            h,
            w,
            config.training.eval_masks,
            &mut substream(seed, STREAM_EVAL),
        )?;
        let spec = config.model_spec();
        let mut prompt = init_prompt(&spec.prompt, &mut substream(seed, STREAM_INIT_PROMPT));
        for name in ["head.weight", "head.bias"] {
            if let Some(t) = prompt.get_mut(name) {
                t.data_mut().fill(0.0);
            }
        }
        let init = InitialParams {
            backbone: init_backbone(&spec.backbone, &mut substream(seed, STREAM_INIT_BACKBONE)),
            adaptors: init_adaptors(&spec.backbone, &mut substream(seed, STREAM_INIT_ADAPTOR)),
            prompt,
        };
        Ok(Self {
            config: config.clone(),
            ctx: TrainContext::from_config(config),
            dataset,
            partition,
            scenario,
            unseen,
            init,
        })
    }

    /// Fresh client states: private cube shards, scenario masks, initial
    /// parameters and per-client random streams.
    pub fn clients(&self) -> Result<Vec<ClientState>> {
        self.partition
            .iter()
            .zip(&self.scenario.clients)
            .enumerate()
            .map(|(c, (idx, masks))| {
                let data = idx.iter().map(|&i| self.dataset.train[i].clone()).collect();
                ClientState::new(
                    c,
                    data,
                    masks.clone(),
                    self.init.backbone.clone(),
                    self.init.adaptors.clone(),
                    self.init.prompt.clone(),
                    self.config.seed,
                )
            })
            .collect()
    }

    pub fn test_cubes(&self) -> Vec<&HyperspectralCube> {
        self.dataset
            .test
            .iter()
            .take(self.config.training.eval_cubes)
            .collect()
    }
}

/// `count` masks per client from each client's scenario distribution, one
/// substream per client under a base seed drawn from `rng`.
pub fn unseen_masks(
    spec: &ScenarioSpec,
    height: usize,
    width: usize,
    count: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<CodedAperture>>> {
    let base: u64 = rng.random();
    (0..spec.clients)
        .map(|c| {
            let mut stream = substream(base, c as u64);
            (0..count)
                .map(|_| sample_mask(spec.distribution(c), height, width, &mut stream))
                .collect()
        })
        .collect()
}

/// Order in which the clients of one round run their local updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Schedule {
    Ascending,
    Descending,
    #[default]
    Parallel,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub schedule: Schedule,
    /// Frozen backbones to install instead of pre-training (prompt
    /// algorithms only), one per client.
    pub pretrained: Option<Vec<ParamGroup>>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub algorithm: Algorithm,
    pub history: MetricsHistory,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    /// The virtual union client of centralised joint training.
    pub joint: Option<ClientState>,
    /// Every message exchanged, in round order.
    pub transcript: Vec<Message>,
}

impl RunOutcome {
    /// The model client `c` deploys.
    pub fn client_model(&self, c: usize) -> ParamSet {
        deployed_model(
            self.algorithm,
            &self.clients[c],
            &self.server,
            self.joint.as_ref(),
        )
    }
}

fn deployed_model(
    algorithm: Algorithm,
    client: &ClientState,
    server: &ServerState,
    joint: Option<&ClientState>,
) -> ParamSet {
    match algorithm {
        Algorithm::Fedhp => ParamSet::new()
            .with(client.backbone.clone())
            .with(client.adaptors.clone())
            .with(server.prompt.clone()),
        Algorithm::LocalOnly => ParamSet::new()
            .with(client.backbone.clone())
            .with(client.adaptors.clone())
            .with(client.prompt.clone()),
        Algorithm::Fedavg | Algorithm::Fedprox | Algorithm::Scaffold => {
            ParamSet::new().with(server.model.clone().expect("baseline server holds a model"))
        }
        Algorithm::Joint => ParamSet::new().with(
            joint
                .expect("joint run holds a union client")
                .backbone
                .clone(),
        ),
    }
}

/// Band-averaged quality of one model over cubes × masks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalStats {
    pub psnr: f64,
    pub ssim: f64,
    pub loss: f64,
}

/// Encodes every cube with every mask, reconstructs, and averages PSNR, SSIM
/// (peak 1) and MSE over all (mask, cube) pairs.
pub fn evaluate_model(
    ctx: &TrainContext,
    params: &ParamSet,
    cubes: &[&HyperspectralCube],
    masks: &[CodedAperture],
    rng: &mut Rng,
) -> Result<EvalStats> {
    if cubes.is_empty() || masks.is_empty() {
        return Err(Error::invalid(
            "evaluation needs at least one cube and one mask",
        ));
    }
    let (mut psnr, mut ssim, mut loss) = (0.0, 0.0, 0.0);
    for mask in masks {
        let ys = cubes
            .iter()
            .map(|c| {
                encode_with(
                    c,
                    mask,
                    &ctx.spec.dispersion,
                    ctx.placement,
                    &ctx.noise,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::<f32>::new();
        let out = pipeline_forward(&mut g, &ctx.spec, params, mask, &ys)?;
        let est = g.value(out);
        let target = planar_batch::<f32>(cubes)?;
        loss += mse_loss(est, &target)?;
        let per = est.len() / cubes.len();
        for (i, cube) in cubes.iter().enumerate() {
            let x = unplanar(
                &est.data()[i * per..(i + 1) * per],
                cube.bands(),
                cube.height(),
                cube.width(),
            );
            let q = quality(&x, &cube.to_tensor(), 1.0)?;
            psnr += q.psnr;
            ssim += q.ssim;
        }
    }
    let pairs = (masks.len() * cubes.len()) as f64;
    Ok(EvalStats {
        psnr: psnr / pairs,
        ssim: ssim / pairs,
        loss: loss / masks.len() as f64,
    })
}

fn eval_noise(seed: u64, client: usize) -> Rng {
    substream(seed, STREAM_EVAL_NOISE_BASE + client as u64)
}

/// The four history rows of one client: train/test cubes × seen/unseen masks.
fn evaluate_client(
    exp: &Experiment,
    round: usize,
    client: &ClientState,
    params: &ParamSet,
) -> Result<Vec<MetricsRecord>> {
    let n = exp.config.training.eval_cubes;
    let train: Vec<&HyperspectralCube> = client.data.iter().take(n).collect();
    let test = exp.test_cubes();
    let mut rows = Vec::with_capacity(4);
    for (split, cubes) in [(Split::Train, &train), (Split::Test, &test)] {
        for (kind, masks) in [
            (MaskKind::Seen, &client.masks.masks),
            (MaskKind::Unseen, &exp.unseen[client.id]),
        ] {
            let s = evaluate_model(
                &exp.ctx,
                params,
                cubes,
                masks,
                &mut eval_noise(exp.config.seed, client.id),
            )?;
            rows.push(MetricsRecord {
                round,
                client: client.id,
                split,
                mask_kind: kind,
                psnr_db: s.psnr,
                ssim: s.ssim,
                loss: s.loss,
            });
        }
    }
    Ok(rows)
}

/// Runs `f` on the selected clients in the requested order and returns the
/// results in ascending client order. The first failing client (ascending)
/// determines the error.
fn for_clients<R, F>(
    clients: &mut [ClientState],
    selected: &[usize],
    schedule: Schedule,
    round: usize,
    f: F,
) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(&mut ClientState) -> Result<R> + Sync,
{
    let mut refs: Vec<&mut ClientState> = clients
        .iter_mut()
        .filter(|c| selected.contains(&c.id))
        .collect();
    let run = |c: &mut &mut ClientState| f(c).map_err(|e| e.at_stage(round, c.id));
    let results: Vec<Result<R>> = match schedule {
        Schedule::Ascending => refs.iter_mut().map(run).collect(),
        Schedule::Descending => {
            let mut r: Vec<_> = refs.iter_mut().rev().map(run).collect();
            r.reverse();
            r
        }
        Schedule::Parallel => refs.par_iter_mut().map(run).collect(),
    };
    results.into_iter().collect()
}

fn message(
    round: usize,
    from: Party,
    to: Party,
    payload: Vec<(TensorRole, ParamGroup)>,
) -> Message {
    Message {
        round,
        from,
        to,
        payload,
    }
}

pub fn run_federation(config: &ExperimentConfig) -> Result<RunOutcome> {
    run_with(&Experiment::new(config)?, &RunOptions::default())
}

/// Pre-training (prompt algorithms), then `T` rounds of select → broadcast →
/// local update → aggregate → evaluate.
pub fn run_with(exp: &Experiment, opts: &RunOptions) -> Result<RunOutcome> {
    let mut fed = Federation::start(exp, opts)?;
    while fed.round() < exp.config.training.rounds {
        fed.step()?;
    }
    Ok(fed.finish())
}

/// Round-by-round driver. `start` pre-trains (prompt algorithms) and sets up
/// the server; each `step` runs one round and appends its history rows.
pub struct Federation<'a> {
    exp: &'a Experiment,
    schedule: Schedule,
    state: RunOutcome,
}

impl<'a> Federation<'a> {
    pub fn start(exp: &'a Experiment, opts: &RunOptions) -> Result<Self> {
        let cfg = &exp.config;
        let tc = &cfg.training;
        let ctx = exp.ctx;
        let algorithm = cfg.algorithm;
        let mut clients = exp.clients()?;
        let sizes: Vec<usize> = clients.iter().map(ClientState::size).collect();
        let mut server = ServerState::new(
            &sizes,
            cfg.participants(),
            exp.init.prompt.clone(),
            substream(cfg.seed, STREAM_SERVER),
        )?;
        let mut joint = None;
        let all: Vec<usize> = (0..clients.len()).collect();

        match algorithm {
            Algorithm::Fedhp | Algorithm::LocalOnly => match &opts.pretrained {
                Some(backbones) => {
                    if backbones.len() != clients.len() {
                        return Err(Error::invalid(format!(
                            "{} pre-trained backbones for {} clients",
                            backbones.len(),
                            clients.len()
                        )));
                    }
                    for (c, b) in clients.iter_mut().zip(backbones) {
                        if !b.same_layout(&c.backbone) {
                            return Err(Error::invalid("pre-trained backbone layout mismatch")
                                .at_stage(0, c.id));
                        }
                        c.backbone = b.clone();
                        c.backbone.set_trainable(false);
                    }
                }
                None => {
                    for_clients(&mut clients, &all, opts.schedule, 0, |c| {
                        pretrain_client(c, tc.pretrain_iters, &ctx, tc.backbone_schedule())
                            .map(|_| ())
                    })?;
                }
            },
            Algorithm::Fedavg | Algorithm::Fedprox | Algorithm::Scaffold => {
                server.model = Some(exp.init.backbone.clone());
                if algorithm == Algorithm::Scaffold {
                    server.control = Some(zeros_like(&exp.init.backbone));
                }
            }
            Algorithm::Joint => {
                joint = Some(joint_client(&clients, &exp.init.backbone, cfg.seed)?);
            }
        }

        Ok(Self {
            exp,
            schedule: opts.schedule,
            state: RunOutcome {
                algorithm,
                history: MetricsHistory::default(),
                server,
                clients,
                joint,
                transcript: Vec::new(),
            },
        })
    }

    /// Rounds completed so far.
    pub fn round(&self) -> usize {
        self.state.server.round
    }

    pub fn state(&self) -> &RunOutcome {
        &self.state
    }

    pub fn finish(self) -> RunOutcome {
        self.state
    }

    /// One round: select, broadcast, local updates, aggregate, evaluate.
    /// Returns the rows appended to the history.
    pub fn step(&mut self) -> Result<&[MetricsRecord]> {
        let exp = self.exp;
        let tc = &exp.config.training;
        let ctx = exp.ctx;
        let schedule = self.schedule;
        let RunOutcome {
            algorithm,
            history,
            server,
            clients,
            joint,
            transcript,
        } = &mut self.state;
        let algorithm = *algorithm;
        let round = server.round;
        let sizes: Vec<usize> = clients.iter().map(ClientState::size).collect();
        let all: Vec<usize> = (0..clients.len()).collect();
        let before = history.records.len();
        let selected = if algorithm == Algorithm::Joint {
            all.clone()
        } else {
            server.select()
        };
        let uploads: Vec<Vec<(TensorRole, ParamGroup)>> = match algorithm {
            Algorithm::Fedhp | Algorithm::LocalOnly => {
                let global = (algorithm == Algorithm::Fedhp).then(|| server.prompt.clone());
                let prompts = for_clients(clients, &selected, schedule, round, |c| {
                    local_update_fedhp(
                        c,
                        global.as_ref(),
                        tc.prompt_iters,
                        tc.adaptor_iters,
                        &ctx,
                        (tc.prompt_schedule(), tc.adaptor_schedule()),
                    )
                    .map(|(p, _)| p)
                })?;
                if let Some(global) = global {
                    let contrib: Vec<_> = prompts
                        .iter()
                        .zip(&selected)
                        .map(|(p, &c)| (p, sizes[c]))
                        .collect();
                    server.prompt =
                        aggregate(&contrib).map_err(|e| e.at_stage(round, selected[0]))?;
                    for &c in &selected {
                        transcript.push(message(
                            round,
                            Party::Server,
                            Party::Client(c),
                            vec![(TensorRole::Param, global.clone())],
                        ));
                    }
                    prompts
                        .into_iter()
                        .map(|p| vec![(TensorRole::Param, p)])
                        .collect()
                } else {
                    Vec::new()
                }
            }
            Algorithm::Fedavg | Algorithm::Fedprox | Algorithm::Scaffold => {
                let global = server.model.clone().expect("baseline model initialised");
                let control = server.control.clone();
                let results =
                    for_clients(clients, &selected, schedule, round, |c| match algorithm {
                        Algorithm::Fedavg => local_update_fedavg(
                            c,
                            &global,
                            tc.local_iters,
                            &ctx,
                            tc.backbone_schedule(),
                        )
                        .map(|(m, _)| (m, None)),
                        Algorithm::Fedprox => local_update_fedprox(
                            c,
                            &global,
                            tc.local_iters,
                            tc.prox_mu,
                            &ctx,
                            tc.backbone_schedule(),
                        )
                        .map(|(m, _)| (m, None)),
                        _ => local_update_scaffold(
                            c,
                            &global,
                            control.as_ref().expect("scaffold control initialised"),
                            tc.local_iters,
                            &ctx,
                            tc.backbone_schedule(),
                        )
                        .map(|(m, d, _)| (m, Some(d))),
                    })?;
                let contrib: Vec<_> = results
                    .iter()
                    .zip(&selected)
                    .map(|((m, _), &c)| (m, sizes[c]))
                    .collect();
                server.model =
                    Some(aggregate(&contrib).map_err(|e| e.at_stage(round, selected[0]))?);
                if let Some(control) = &control {
                    let deltas: Vec<&ParamGroup> =
                        results.iter().filter_map(|(_, d)| d.as_ref()).collect();
                    server.control = Some(
                        update_server_control(control, &deltas, clients.len())
                            .map_err(|e| e.at_stage(round, selected[0]))?,
                    );
                }
                for &c in &selected {
                    let mut payload = vec![(TensorRole::Param, global.clone())];
                    if let Some(control) = &control {
                        payload.push((TensorRole::ControlVariate, control.clone()));
                    }
                    transcript.push(message(round, Party::Server, Party::Client(c), payload));
                }
                results
                    .into_iter()
                    .map(|(m, d)| {
                        let mut payload = vec![(TensorRole::Param, m)];
                        if let Some(d) = d {
                            payload.push((TensorRole::ControlVariate, d));
                        }
                        payload
                    })
                    .collect()
            }
            Algorithm::Joint => {
                let j = joint.as_mut().expect("joint client initialised");
                train_backbone(j, tc.local_iters, &ctx, tc.backbone_schedule())
                    .map_err(|e| e.at_stage(round, 0))?;
                Vec::new()
            }
        };
        for (payload, &c) in uploads.into_iter().zip(&selected) {
            transcript.push(message(round, Party::Client(c), Party::Server, payload));
        }

        let rows = selected
            .par_iter()
            .map(|&c| {
                let params = deployed_model(algorithm, &clients[c], &server, joint.as_ref());
                evaluate_client(exp, round, &clients[c], &params).map_err(|e| e.at_stage(round, c))
            })
            .collect::<Vec<Result<Vec<MetricsRecord>>>>();
        for r in rows {
            history.records.extend(r?);
        }
        server.round += 1;
        Ok(&history.records[before..])
    }
}

fn client_owner(c: usize) -> String {
    format!("client{c}")
}

fn add_masks(
    w: &mut CheckpointWriter,
    owner: &str,
    group: &str,
    masks: &[CodedAperture],
) -> Result<()> {
    for (k, m) in masks.iter().enumerate() {
        w.add(
            owner,
            group,
            &format!("m{k}"),
            TensorRole::Mask,
            &m.to_tensor(),
        )?;
    }
    Ok(())
}

/// Writes the final state of a run: server groups, every client's groups,
/// optimizer moments, control variates and masks.
pub fn save_checkpoint(
    outcome: &RunOutcome,
    exp: &Experiment,
    dir: &std::path::Path,
) -> Result<Manifest> {
    let mut w = CheckpointWriter::new(dir, outcome.server.round, exp.config.hash())?;
    let uses_prompt = outcome.algorithm.uses_prompt();
    if outcome.algorithm == Algorithm::Fedhp {
        w.add_group("server", &outcome.server.prompt)?;
    }
    if let Some(m) = &outcome.server.model {
        w.add_group("server", m)?;
    }
    if let Some(c) = &outcome.server.control {
        for (name, t) in c.iter() {
            w.add("server", "backbone", name, TensorRole::ControlVariate, t)?;
        }
    }
    for client in &outcome.clients {
        let owner = client_owner(client.id);
        if uses_prompt {
            for kind in GroupKind::ALL {
                w.add_group(&owner, client.group(kind))?;
            }
        }
        for (kind, state) in &client.optimizers {
            if state.step > 0 {
                w.add_optimizer(&owner, *kind, state)?;
            }
        }
        if let Some(c) = &client.control {
            for (name, t) in c.iter() {
                w.add(&owner, "backbone", name, TensorRole::ControlVariate, t)?;
            }
        }
        add_masks(&mut w, &owner, "masks", &client.masks.masks)?;
        add_masks(&mut w, &owner, "unseen", &exp.unseen[client.id])?;
    }
    if let Some(j) = &outcome.joint {
        w.add_group("joint", &j.backbone)?;
        if let Some(state) = j.optimizers.get(&GroupKind::Backbone) {
            w.add_optimizer("joint", GroupKind::Backbone, state)?;
        }
    }
    w.finish()
}

/// The deployed model of every client, read back from a run checkpoint.
pub fn models_from_checkpoint(ckpt: &Checkpoint, exp: &Experiment) -> Result<Vec<ParamSet>> {
    if ckpt.manifest.config_hash != exp.config.hash() {
        return Err(Error::Config(
            "checkpoint was written under a different config".into(),
        ));
    }
    (0..exp.config.scenario.clients)
        .map(|c| {
            let owner = client_owner(c);
            Ok(match exp.config.algorithm {
                Algorithm::Fedhp => ParamSet::new()
                    .with(ckpt.group(&owner, GroupKind::Backbone)?)
                    .with(ckpt.group(&owner, GroupKind::Adaptor)?)
                    .with(ckpt.group("server", GroupKind::Prompt)?),
                Algorithm::LocalOnly => ParamSet::new()
                    .with(ckpt.group(&owner, GroupKind::Backbone)?)
                    .with(ckpt.group(&owner, GroupKind::Adaptor)?)
                    .with(ckpt.group(&owner, GroupKind::Prompt)?),
                Algorithm::Fedavg | Algorithm::Fedprox | Algorithm::Scaffold => {
                    ParamSet::new().with(ckpt.group("server", GroupKind::Backbone)?)
                }
                Algorithm::Joint => ParamSet::new().with(ckpt.group("joint", GroupKind::Backbone)?),
            })
        })
        .collect()
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrialRow {
    /// `None` for the all-client row.
    pub client: Option<usize>,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
}

/// Test-split quality on freshly sampled masks, re-drawn for every trial
/// from the trial-indexed stream. One row per client plus the client mean.
pub fn evaluate_trials(
    exp: &Experiment,
    models: &[ParamSet],
    trials: usize,
) -> Result<Vec<TrialRow>> {
    if trials == 0 {
        return Err(Error::invalid("trials must be >= 1"));
    }
    let cfg = &exp.config;
    if models.len() != cfg.scenario.clients {
        return Err(Error::invalid(format!(
            "{} models for {} clients",
            models.len(),
            cfg.scenario.clients
        )));
    }
    let test = exp.test_cubes();
    let per_trial = (0..trials)
        .into_par_iter()
        .map(|t| {
            let masks = unseen_masks(
                &cfg.scenario,
                cfg.data.height,
                cfg.data.width,
                cfg.training.eval_masks,
                &mut substream(cfg.seed, STREAM_TRIAL_BASE + t as u64),
            )?;
            models
                .iter()
                .enumerate()
                .map(|(c, m)| {
                    evaluate_model(&exp.ctx, m, &test, &masks[c], &mut eval_noise(cfg.seed, c))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let row = |client: Option<usize>, pick: &dyn Fn(&[EvalStats]) -> (f64, f64)| {
        let (p, s): (Vec<f64>, Vec<f64>) = per_trial.iter().map(|t| pick(t)).unzip();
        let (psnr_mean, psnr_std) = mean_std(&p);
        let (ssim_mean, ssim_std) = mean_std(&s);
        TrialRow {
            client,
            psnr_mean,
            psnr_std,
            ssim_mean,
            ssim_std,
        }
    };
    let mut rows: Vec<TrialRow> = (0..models.len())
        .map(|c| row(Some(c), &|t| (t[c].psnr, t[c].ssim)))
        .collect();
    rows.push(row(None, &|t| {
        let n = t.len() as f64;
        (
            t.iter().map(|s| s.psnr).sum::<f64>() / n,
            t.iter().map(|s| s.ssim).sum::<f64>() / n,
        )
    }));
    Ok(rows)
}

/// Seen-mask versus fresh-mask test PSNR of a backbone trained on a single
/// mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub seen_psnr: f64,
    pub unseen_psnr: Vec<f64>,
}

impl ProbeResult {
    /// Mean PSNR lost when moving from the training mask to fresh masks.
    pub fn drop_db(&self) -> f64 {
        self.seen_psnr - mean_std(&self.unseen_psnr).0
    }
}

/// Trains one backbone for `iters` steps on all training cubes under one
/// mask drawn from the first scenario distribution, then evaluates the test
/// cubes under that mask and under `fresh` new masks from the same law.
pub fn overfitting_probe(
    config: &ExperimentConfig,
    iters: usize,
    fresh: usize,
) -> Result<ProbeResult> {
    config.validate()?;
    let seed = config.seed;
    let (h, w) = (config.data.height, config.data.width);
    let dataset = build_dataset(&config.data, seed)?;
    let dist = config.scenario.distributions[0].clone();
    let mask = sample_mask(&dist, h, w, &mut substream(seed, STREAM_SCENARIO))?;
    let mut eval_rng = substream(seed, STREAM_EVAL);
    let fresh_masks = (0..fresh)
        .map(|_| sample_mask(&dist, h, w, &mut eval_rng))
        .collect::<Result<Vec<_>>>()?;
    let spec = config.model_spec();
    let mut backbone = init_backbone(&spec.backbone, &mut substream(seed, STREAM_INIT_BACKBONE));
    backbone.set_trainable(true);
    let adaptors = init_adaptors(&spec.backbone, &mut substream(seed, STREAM_INIT_ADAPTOR));
    let prompt = init_prompt(&spec.prompt, &mut substream(seed, STREAM_INIT_PROMPT));
    let masks = ClientMasks {
        distribution_index: 0,
        distribution: dist,
        masks: vec![mask.clone()],
    };
    let mut client = ClientState::new(
        0,
        dataset.train.clone(),
        masks,
        backbone,
        adaptors,
        prompt,
        seed,
    )?;
    let ctx = TrainContext::from_config(config);
    train_backbone(
        &mut client,
        iters,
        &ctx,
        config.training.backbone_schedule(),
    )?;
    let params = ParamSet::new().with(client.backbone.clone());
    let test: Vec<&HyperspectralCube> = dataset.test.iter().collect();
    let seen = evaluate_model(&ctx, &params, &test, &[mask], &mut eval_noise(seed, 0))?;
    let unseen = fresh_masks
        .iter()
        .map(|m| {
            evaluate_model(
                &ctx,
                &params,
                &test,
                std::slice::from_ref(m),
                &mut eval_noise(seed, 0),
            )
            .map(|s| s.psnr)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbeResult {
        seen_psnr: seen.psnr,
        unseen_psnr: unseen,
    })
}
