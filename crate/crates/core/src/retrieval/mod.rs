//! Exact vector index, the multi-stage retrieval pipeline and logistic score
//! fusion.

mod fusion;
mod index;
mod pipeline;

pub use fusion::{
    fusion_fit, FusionModel, FUSION_FEATURES, FUSION_ITERATIONS, FUSION_L2, FUSION_LR,
};
pub use index::{FlatIndex, Hit};
pub use pipeline::{
    candidate_subgraph, graph_adjusted_candidates, retrieve, RetrievalResult, RetrieveOptions,
};
