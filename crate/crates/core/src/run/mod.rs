//! End-to-end runs: configuration, the model wrapper, training, evaluation,
//! checkpoints and ablations.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod model;
pub mod train;

pub use ablation::{ablate_depth, ablate_graph, ablation_csv, AblationRow};
pub use checkpoint::{Checkpoint, CheckpointMeta, Manifest};
pub use config::{grid, DataFormat, RunConfig};
pub use model::{HotVae, ModelSpec, TrainForward};
pub use train::{
    evaluate, label_graph, loss_log_csv, model_spec, prepare, prepare_dataset, train, train_with,
    EpochRecord, Evaluation, Prepared, TrainOutcome,
};
