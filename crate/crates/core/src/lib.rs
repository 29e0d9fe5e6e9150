//! Training-free open-set recognition: virtual open-set classes from an LLM,
//! generated image galleries, and a fused text and gallery alignment score.

pub mod backends;
pub mod config;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod gallery;
pub mod llm;
pub mod model;
pub mod pipeline;
pub mod scoring;
pub mod store;

pub use error::{Error, Result};
pub use model::{canonicalize, ClassLabel, ClassRegistry, EmbeddingVector, ImageData, Origin};
