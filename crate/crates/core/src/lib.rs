//! Paralleled deep convolutional networks (PDCNN) for binary image-quality
//! classification, written from scratch.
//!
//! A PDCNN runs several convolutional branches of different depths on the
//! same input, concatenates their final feature maps, and classifies the
//! result with one shared fully connected layer. This crate contains the
//! layers with hand-written backward passes, the declarative architecture
//! family and its parallel composition, SGD training, the data pipeline with
//! rotation and crop/flip augmentation, the greedy branch-selection search,
//! and the filter-variance and convergence-time diagnostics.

pub mod arch;
pub mod data;
pub mod diag;
pub mod error;
pub mod gradcheck;
pub mod kv;
pub mod layers;
pub mod model;
pub mod optim;
pub mod search;
pub mod tensor;

pub use arch::{
    build_arch, build_pdcnn, param_count, shape_check, ArchConfig, ArchitectureSpec, LayerKind, LayerSpec, PdcnnSpec,
};
pub use data::{Dataset, ManifestRecord, Sample};
pub use error::{Error, Result};
pub use model::Network;
pub use optim::{SgdConfig, TrainCurve};
pub use search::{greedy_pdcnn_search, SearchTrace};
pub use tensor::{Rng, Tensor};
