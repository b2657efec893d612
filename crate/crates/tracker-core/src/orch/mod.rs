//! Experiment orchestration: configuration, episode collection, replay,
//! training loops (serial and threaded), evaluation runs, and artifacts.

use thiserror::Error;

pub mod buffer;
pub mod config;
pub mod episode;
pub mod evalrun;
pub mod report;
pub mod runner;
pub mod verbs;

pub use buffer::ReplayBuffer;
pub use config::Config;
pub use episode::{build_batch, collect_episode, Episode};
pub use evalrun::{direction_agreement, eval_policy, mean_mse};
pub use report::{Manifest, MetricsWriter};
pub use runner::{load_models, run_finetune, run_training, FinetuneOutcome, TrainOutcome};

#[derive(Debug, Error)]
pub enum OrchError {
    #[error("config: {0}")]
    Config(String),
    #[error("replay: {0}")]
    Buffer(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Plant(#[from] crate::plant::PlantError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error(transparent)]
    Trajectory(#[from] crate::trajectory::TrajectoryError),
    #[error(transparent)]
    Reward(#[from] crate::reward::RewardError),
    #[error(transparent)]
    Pid(#[from] crate::pid::PidError),
}
