//! Library side of the `mdner` command: configuration, the training and
//! evaluation pipeline, and one function per subcommand.

pub mod commands;
pub mod config;
pub mod pipeline;

pub use commands::{cmd_eval, cmd_gridsearch, cmd_synth, cmd_tag, cmd_train, Baseline, TagTarget};
pub use config::ExperimentConfig;
