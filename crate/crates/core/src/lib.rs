//! Cross-modal place recognition from text descriptions to multi-view
//! images, operating on precomputed token embeddings.

pub mod ablation;
pub mod ccca;
pub mod cli;
pub mod dataset;
pub mod descriptor;
pub mod error;
pub mod image_aggregator;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod provenance;
pub mod report;
pub mod retrieval;
pub mod text_head;
pub mod trainer;

pub use descriptor::Descriptor;
pub use error::{Error, Result};
