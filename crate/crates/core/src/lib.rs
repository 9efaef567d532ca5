//! Multimodal cell-typing models over paired gene/morphology embeddings.
//!
//! * [`dataset`]: the CellPack format, seeded splits and a synthetic generator.
//! * [`tensor`], [`graph`], [`nn`], [`optim`], [`gradcheck`]: a small
//!   reverse-mode autodiff stack with transformer building blocks and AdamW.
//! * [`fusion`]: transformer classifiers over per-cell token sequences.
//! * [`contrastive`]: InfoNCE alignment of the two modalities.
//! * [`analysis`]: metrics, k-means, PCA, enrichment and ARI.

pub mod analysis;
pub mod contrastive;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod io_util;
pub mod nn;
pub mod optim;
pub mod params;
pub mod seed;
pub mod tensor;

pub use analysis::{ClassMetrics, ClusterResult, ConfusionMatrix, EnrichmentTable};
pub use contrastive::{AlignConfig, ProjectionHead, ProjectionHeads};
pub use dataset::{CellDataset, CellRecord, SynthConfig};
pub use error::{Error, ErrorKind, Result};
pub use fusion::{FusionConfig, ModelVariant, TokenSequence, TrainedClassifier};
pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamWConfig, AdamWState};
pub use params::{ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
