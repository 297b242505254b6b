//! The differentiable tagger and the machinery it runs on.

pub mod checkpoint;
pub mod config;
pub mod embeddings;
pub mod model;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{Architecture, ModelConfig, NormPlacement};
pub use embeddings::{load_embeddings, EmbeddingTable};
pub use model::{sinusoidal_positions, CharVocab, TagDistribution, Tagger};
pub use params::{ParamId, ParamSet};
pub use tape::{Gradients, Graph, NodeId, LOG_EPS};
pub use tensor::Tensor;
