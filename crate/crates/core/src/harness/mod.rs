//! Training, evaluation and export driver behind the `sta` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod model;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{parse_synth_config, Aggregator, EvalSampling, RunConfig};
pub use model::{ClipOptions, InputKind, Model};
pub use train::{
    embed_split, evaluate_model, init_training, train, train_epoch, EpochRecord, TrainState,
};
