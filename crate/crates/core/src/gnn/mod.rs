//! Noisy gated graph network, its training loop and the EdgeRand baseline.

pub mod checkpoint;
pub mod edgerand;
pub mod model;
pub mod params;
pub mod train;

pub use checkpoint::Checkpoint;
pub use edgerand::{edgerand_perturb, edgerand_spec};
pub use model::{backward, forward, ForwardConfig, GraphInput, LossKind, StepNoise, Trace};
pub use params::{Adam, ModelDims, ModelParams};
pub use train::{evaluate, train, train_from, LogRecord, Sample, TrainConfig, TrainOutcome, TrainingData};
