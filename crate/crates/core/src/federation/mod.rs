//! Federated training: client pre-training, the two-stage prompt/adaptor
//! update, prompt aggregation, the whole-model baselines and the round driver.

pub mod check;
pub mod client;
pub mod history;
pub mod run;
pub mod server;

pub use check::pipeline_grad_check;
pub use client::{
    add_proximal, control_variate_update, joint_client, local_update_fedavg, local_update_fedhp,
    local_update_fedprox, local_update_scaffold, pretrain_client, train_backbone,
    train_centralized_joint, zeros_like, ClientState, FedhpReport, StageReport, TrainContext,
};
pub use history::{sig6, MaskKind, MetricsHistory, MetricsRecord, Split, CSV_HEADER};
pub use run::{
    evaluate_model, evaluate_trials, mean_std, models_from_checkpoint, overfitting_probe,
    run_federation, run_with, save_checkpoint, unseen_masks, EvalStats, Experiment, Federation,
    InitialParams, ProbeResult, RunOptions, RunOutcome, Schedule, TrialRow,
};
pub use server::{
    aggregate, comm_cost, update_server_control, weights, CommCost, Message, Party, ServerState,
};
