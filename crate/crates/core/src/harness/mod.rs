//! Miniature two-modality tracker on synthetic data: configuration, data
//! generation, model wiring, training, evaluation and ablation.

pub mod config;
pub mod data;
pub mod gradcheck;
pub mod model;
pub mod train;

pub use config::{Dims, RunConfig, Toggles};
pub use data::{Dataset, Degradation, Sample};
pub use model::{patch_embed, Prepared, Structure, TrackerModel};
pub use train::{ablate, evaluate, train, AblationRow, MetricsRecord, TrainOutcome};
