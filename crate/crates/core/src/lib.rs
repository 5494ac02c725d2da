//! Query-aware graph retrieval.
//!
//! Chunks of each episode are linked into a multi-relational graph
//! ([`graph`]). Candidate chunks from an exact cosine index are rescored by
//! an edge-aware graph attention encoder with query-guided pooling
//! ([`gnn`]), trained in two stages ([`training`]), and the index, graph and
//! model scores are fused by logistic regression ([`retrieval`]).

pub mod autodiff;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod eval;
pub mod gnn;
pub mod graph;
pub mod retrieval;
pub mod synthetic;
pub mod training;
pub mod workflow;

pub use corpus::{
    label_chunk_relevance, load_corpus, load_queries, Chunk, ChunkRef, Corpus, Query, QueryType,
    Segment,
};
pub use embed::{cosine_similarity, normalize, toy_embed, EmbeddingMatrix};
pub use error::{Error, Result};
pub use graph::{BatchedGraph, EdgeKind, EpisodeGraph};
