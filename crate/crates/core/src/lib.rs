//! One shared Transformer backbone for several remote-sensing sensors.
//!
//! Each sensor gets its own patch embedder and reconstruction decoder; the
//! encoder in between is shared. The crate covers the tensor/autodiff kernel,
//! synthetic multi-sensor data, masked-image-modeling pretraining, linear
//! probing, and the on-disk formats for datasets and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod modality;
pub mod model;
pub mod probe;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use config::{ConfigError, ProbeSettings, RunConfig};
pub use dataset::{Dataset, DatasetError, LabelKind};
pub use modality::{builtin_modalities, ModalityError, ModalityRegistry, ModalitySpec};
pub use model::{ModelConfig, ModelError, OfaNet, TokenSequence};
pub use probe::{ProbeConfig, ProbeError, ProbeReport, TaskKind};
pub use rng::Key;
pub use synth::{SegMask, SynthError, SynthGenerator, SynthSample};
pub use tensor::{Gradients, Scalar, Tape, Tensor, TensorError, Var};
pub use trainer::{LossRecord, TrainConfig, TrainError};
