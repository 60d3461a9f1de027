//! Alternating minimax training with an inverse-decay learning rate,
//! validation-monitored checkpointing and resumable state.

mod adam;
mod checkpoint;
mod config;
mod run;
mod schedule;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{rebuild_model, Checkpoint, TrainState, CHECKPOINT_VERSION};
pub use config::TrainConfig;
pub use run::{
    append_log, materialize, train, train_loop, train_step, LogRecord, RunOptions, SampleValidator, TrainOutcome,
    Validator,
};
pub use schedule::lr_schedule;
