//! End-to-end runs: per-frame execution in every fusion mode, message
//! accounting, toy training, ablations and sweeps, and metric files.

pub mod config;
pub mod frame;
pub mod harness;
pub mod model;
pub mod output;
pub mod train;

pub use config::{FusionMode, RunConfig, RunSettings, Source, Toggles};
pub use frame::{
    forward, message_volume, run_frame, AgentFrame, Episode, FrameMetrics, FrameResult, MapDump, Outgoing, Timing,
    Volume, DETECTION_RECORD_BYTES, POINT_RECORD_BYTES,
};
pub use harness::{ablation_run, evaluate, sweep, AblationRow, Suite, SuiteMetrics, SweepAxis, SweepRecord, Variant};
pub use model::{Architecture, Model};
pub use output::{Format, Provenance};
pub use train::{
    loss_and_gradients, total_loss, toy_config, training_config, train_toy, Optimizer, TrainConfig, TrainReport, TOY_LR, TOY_SEED, TOY_STEPS,
};
