//! Minimal CPU neural-network stack: tensors, layer kernels, a reverse-mode
//! tape, the position-prediction model, its loss and the training loop.

pub mod checkpoint;
pub mod graph;
pub mod loss;
pub mod model;
pub mod ops;
pub mod params;
pub mod tensor;
pub mod train;

pub use checkpoint::{Checkpoint, EpochMetrics};
pub use model::{build_model, Backbone, HeadArch, Init, Model, ModelConfig, LAST_HIDDEN};
pub use tensor::Tensor;
pub use train::{evaluate, train, LabelledSet, TrainConfig};
