use rand::seq::index::sample;
use serde::Serialize;
use serde_json::json;

use crate::config::Algorithm;
use crate::dataio::TensorRole;
use crate::error::{Error, Result};
use crate::learncore::{GroupKind, ModelSpec, ParamGroup};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Server-side state. `model` and `control` exist only for the whole-model
/// baselines; `prompt` is the global prompt φ_G.
#[derive(Clone, Debug)]
pub struct ServerState {
    pub round: usize,
    pub participation: usize,
    /// `N_c / ΣN` over all clients.
    pub weights: Vec<f64>,
    pub prompt: ParamGroup,
    pub model: Option<ParamGroup>,
    pub control: Option<ParamGroup>,
    pub rng: Rng,
}

impl ServerState {
    pub fn new(
        sizes: &[usize],
        participation: usize,
        prompt: ParamGroup,
        rng: Rng,
    ) -> Result<Self> {
        if participation == 0 || participation > sizes.len() {
            return Err(Error::invalid(format!(
                "participation {participation} outside 1..={}",
                sizes.len()
            )));
        }
        Ok(Self {
            round: 0,
            participation,
            weights: weights(sizes)?,
            prompt,
            model: None,
            control: None,
            rng,
        })
    }

    pub fn clients(&self) -> usize {
        self.weights.len()
    }

    /// Client ids taking part this round, ascending. Full participation
    /// consumes no randomness.
    pub fn select(&mut self) -> Vec<usize> {
        let n = self.clients();
        if self.participation == n {
            return (0..n).collect();
        }
        let mut ids = sample(&mut self.rng, n, self.participation).into_vec();
        ids.sort_unstable();
        ids
    }
}

/// Aggregation weights `N_c / ΣN`, computed in f64.
pub fn weights(sizes: &[usize]) -> Result<Vec<f64>> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::invalid(
            "aggregation needs a positive total dataset size",
        ));
    }
    Ok(sizes.iter().map(|&n| n as f64 / total as f64).collect())
}

/// `Σ (N_c/ΣN)·φ_c`, reduced in the order given (callers pass ascending
/// client ids) with f64 accumulators.
pub fn aggregate(contributions: &[(&ParamGroup, usize)]) -> Result<ParamGroup> {
    let Some(&(first, _)) = contributions.first() else {
        return Err(Error::invalid("nothing to aggregate"));
    };
    for (g, _) in contributions {
        if !g.same_layout(first) || g.kind() != first.kind() {
            return Err(Error::invalid("contributions have different layouts"));
        }
    }
    let sizes: Vec<usize> = contributions.iter().map(|&(_, n)| n).collect();
    let alpha = weights(&sizes)?;
    let mut out = ParamGroup::new(first.kind());
    out.set_trainable(first.trainable());
    for (name, t) in first.iter() {
        let mut acc = vec![0.0f64; t.len()];
        for ((g, _), &a) in contributions.iter().zip(&alpha) {
            for (s, &v) in acc.iter_mut().zip(g.get(name)?.data()) {
                *s += a * v as f64;
            }
        }
        let data = acc.into_iter().map(|v| v as f32).collect();
        out.insert(name.clone(), Tensor::new(t.shape().to_vec(), data)?)?;
    }
    Ok(out)
}

/// `c ← c + (1/C)·Σ Δc_i` over the participating clients, ascending.
pub fn update_server_control(
    control: &ParamGroup,
    deltas: &[&ParamGroup],
    clients: usize,
) -> Result<ParamGroup> {
    let mut out = ParamGroup::new(control.kind());
    for (name, c) in control.iter() {
        let mut acc: Vec<f64> = c.data().iter().map(|&v| v as f64).collect();
        for d in deltas {
            for (s, &v) in acc.iter_mut().zip(d.get(name)?.data()) {
                *s += v as f64 / clients as f64;
            }
        }
        let data = acc.into_iter().map(|v| v as f32).collect();
        out.insert(name.clone(), Tensor::new(c.shape().to_vec(), data)?)?;
    }
    Ok(out)
}

/// Parameters moved per round.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CommCost {
    pub upload_per_client: usize,
    pub download_per_client: usize,
    pub participants: usize,
}

impl CommCost {
    pub fn upload_per_round(&self) -> usize {
        self.upload_per_client * self.participants
    }

    pub fn download_per_round(&self) -> usize {
        self.download_per_client * self.participants
    }
}

fn layout_count(layout: &[(String, Vec<usize>)]) -> usize {
    layout
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Exact per-round parameter counts. FedHP moves |φ|, FedAvg and FedProx
/// move |θ|, SCAFFOLD moves θ and its control variate. Local-only and joint
/// training exchange no parameters.
pub fn comm_cost(algorithm: Algorithm, spec: &ModelSpec, participants: usize) -> CommCost {
    let phi = layout_count(&spec.prompt.layout());
    let theta = layout_count(&spec.backbone.backbone_layout());
    let per = match algorithm {
        Algorithm::Fedhp => phi,
        Algorithm::Fedavg | Algorithm::Fedprox => theta,
        Algorithm::Scaffold => 2 * theta,
        Algorithm::Joint | Algorithm::LocalOnly => 0,
    };
    CommCost {
        upload_per_client: per,
        download_per_client: per,
        participants,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Party {
    Server,
    Client(usize),
}

/// One server↔client exchange: the tensors that cross the wire.
#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub round: usize,
    pub from: Party,
    pub to: Party,
    pub payload: Vec<(TensorRole, ParamGroup)>,
}

impl Message {
    pub fn param_count(&self) -> usize {
        self.payload.iter().map(|(_, g)| g.param_count()).sum()
    }

    pub fn carries(&self, kind: GroupKind) -> bool {
        self.payload.iter().any(|(_, g)| g.kind() == kind)
    }

    /// Wire form of the message.
    pub fn to_json(&self) -> serde_json::Value {
        let payload: Vec<_> = self
            .payload
            .iter()
            .map(|(role, g)| {
                let tensors: Vec<_> = g
                    .iter()
                    .map(|(name, t)| json!({"name": name, "shape": t.shape(), "values": t.data()}))
                    .collect();
                json!({"group": g.kind(), "role": role, "tensors": tensors})
            })
            .collect();
        json!({"round": self.round, "from": self.from, "to": self.to, "payload": payload})
    }
}
