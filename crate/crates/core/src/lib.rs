//! High-resolution image sub-partitioning with global-semantic weight
//! allocation.
//!
//! The pipeline crops an image onto the closest predefined grid of
//! fixed-size tiles plus a whole-image thumbnail, encodes each tile with a
//! small ViT-style encoder, compacts tokens 4-to-1 with a pixel shuffle,
//! and then weights every tile's embeddings by how much attention the
//! global image's cls token pays to it. An analysis harness ranks tiles by
//! cosine similarity against the global image and measures what removing
//! the top/second-top/bottom ranked tiles costs in allocated weight mass.

pub mod allocator;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod imaging;
pub mod jsonfmt;
pub mod params;
pub mod pipeline;
pub mod tape;
pub mod tensor;
pub mod tiler;

pub use allocator::{GswaConfig, Strategy, WeightVector};
pub use encoder::{EmbeddingSet, EncoderConfig, ShuffledEmbeddingSet};
pub use error::{Error, Result};
pub use imaging::ImageTensor;
pub use params::ParamStore;
pub use pipeline::{AnalysisReport, PipelineConfig, RankBy, RemovalSetting};
pub use tensor::Tensor;
pub use tiler::{CropPlan, TileBatch};
