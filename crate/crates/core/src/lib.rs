//! Graph-based approximate nearest-neighbor search with build-time
//! reductions (PCA, antihub subsampling), k-means entry-point selection and
//! a TPE tuner over the reduction settings.

pub mod antihub;
pub mod dataset;
pub mod distance;
pub mod entrypoint;
pub mod error;
pub mod graph;
pub mod index_file;
mod knn;
pub mod metrics;
mod nndescent;
pub mod pca;
pub mod pipeline;
pub mod tuner;

pub use dataset::{brute_force_knn, generate_synthetic, generate_with_queries, load_fvecs, save_fvecs, NeighborList, VectorSet};
pub use error::{Error, Result};
pub use graph::{build_index, GraphIndex, SearchParams};
pub use pipeline::{Pipeline, PipelineParams, StageOrder};
