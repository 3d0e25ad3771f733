//! Differentiable tensor core: the tape, the three parameter groups, the
//! desk-scale networks, Adam and the step learning-rate schedule.

pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod optim;
pub mod params;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use model::{
    apply_prompt, backbone_forward, init_adaptors, init_backbone, init_prompt, mse_loss,
    pipeline_forward, planar_batch, prompt_forward, reconstruct, unplanar, BackboneConfig,
    ModelSpec, PromptConfig,
};
pub use optim::{adam_step, AdamConfig, LrSchedule, OptimizerState};
pub use params::{GroupKind, ParamGroup, ParamSet};
