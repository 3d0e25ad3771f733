use rand::Rng as _;

use crate::error::Result;
use crate::federation::run::Experiment;
use crate::learncore::{
    grad_check, init_prompt, pipeline_forward, planar_batch, GradCheckOptions, GradCheckReport,
    GroupKind, ParamSet,
};
use crate::optics::encode_with;
use crate::rng::{substream, STREAM_GRADCHECK, STREAM_INIT_PROMPT};

/// Gradient check of the full reconstruction pipeline (prompt, backbone and
/// adaptors) on one batch of the experiment's training data under client
/// 0's first mask.
///
/// Zero-initialised layers would make most gradients vanish, so the prompt
/// keeps its random head and the adaptor weights are jittered.
pub fn pipeline_grad_check(exp: &Experiment, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let seed = exp.config.seed;
    let spec = exp.ctx.spec;
    let mut rng = substream(seed, STREAM_GRADCHECK);

    let mut adaptors = exp.init.adaptors.clone();
    for (_, t) in adaptors.iter_mut() {
        for v in t.data_mut() {
            *v += (rng.random::<f32>() - 0.5) * 0.2;
        }
    }
    let prompt = init_prompt(&spec.prompt, &mut substream(seed, STREAM_INIT_PROMPT));
    let params: ParamSet<f64> = ParamSet::new()
        .with(exp.init.backbone.clone())
        .with(adaptors)
        .with(prompt)
        .cast();

    let batch = exp.ctx.batch_size.min(exp.dataset.train.len());
    let cubes: Vec<_> = exp.dataset.train[..batch].iter().collect();
    let mask = exp.scenario.clients[0].masks[0].clone();
    let ys = cubes
        .iter()
        .map(|c| {
            encode_with(
                c,
                &mask,
                &spec.dispersion,
                exp.ctx.placement,
                &exp.ctx.noise,
                &mut rng,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let target = planar_batch::<f64>(&cubes)?;

    grad_check(
        &params,
        &[GroupKind::Backbone, GroupKind::Prompt, GroupKind::Adaptor],
        opts,
        |g, p| {
            let out = pipeline_forward(g, &spec, p, &mask, &ys)?;
            let t = g.input(target.clone())?;
            g.mse(out, t)
        },
    )
}
