//! End-to-end composition of the camera and network stages, two-phase
//! training, evaluation and the gradient-check suite.

mod model;
pub mod suite;
mod train;

pub use model::{
    ChannelMeanStage, Forward, Pipeline, PipelineConfig, SensorConfig, StepLoss, Switches, DEFAULT_GAMMA_INIT,
};
pub use train::{train, EpochRecord, NullObserver, TrainObserver, TrainOutcome, TrainSchedule};
