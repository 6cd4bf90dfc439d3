//! Sequential recommendation with an ID-based user model steering a frozen
//! language backbone through per-layer virtual tokens.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine, the ID
//! model, the backbone, the adapter, training, checkpoints and metrics.

pub mod adapter;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod id_model;
pub mod init;
pub mod optim;
pub mod stack;
pub mod tensor;
pub mod trainer;

pub use adapter::{Adapter, AdapterConfig};
pub use backbone::{Backbone, BackboneConfig, PromptTemplate, Vocabulary};
pub use checkpoint::Checkpoint;
pub use dataset::{ExperimentData, ItemCatalog, ItemId, UserSequence};
pub use error::{Error, Result};
pub use eval::{Metrics, Scorer};
pub use id_model::{IdModel, IdModelConfig, PretrainConfig};
pub use stack::{ModelStack, StackConfig};
pub use tensor::Tensor;
pub use trainer::{TrainConfig, TrainReport};
