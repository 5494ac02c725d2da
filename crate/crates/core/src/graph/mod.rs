//! Per-episode multi-relational chunk graphs.
//!
//! Nodes are chunks in seq order. Edges are directed and typed: sequential
//! edges link temporally adjacent chunks in both directions, semantic edges
//! point from a chunk to its most cosine-similar peers. A node pair may carry
//! one edge of each type.

mod adjust;
mod batch;
mod build;
mod cache;
mod subgraph;

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::hash::BuildHasher;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adjust::{graph_score, graph_score_adjust, AdjustedScore, ChunkKey};
pub use batch::{to_batched_graph, BatchedGraph};
pub use build::{build_corpus_graphs, build_episode_graph, DEFAULT_TAU, DEFAULT_TOP_K};
pub use cache::{CacheKey, GraphCache};
pub use subgraph::{extract_ego_subgraph, query_aware_subgraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Sequential,
    Semantic,
}

impl EdgeKind {
    /// Row of the edge-type embedding table.
    pub fn type_id(self) -> usize {
        match self {
            EdgeKind::Sequential => 0,
            EdgeKind::Semantic => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub kind: EdgeKind,
    pub weight: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub chunk_id: String,
    pub seq_index: usize,
    pub start_time: f64,
    pub end_time: f64,
    pub embedding: Vec<f32>,
}

/// Directed multigraph over the chunks of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeGraph {
    episode_id: String,
    nodes: Vec<GraphNode>,
    edges: Vec<Edge>,
    out_edges: Vec<Vec<usize>>,
    in_edges: Vec<Vec<usize>>,
}

impl EpisodeGraph {
    /// Assembles a graph from raw parts. Rejects self-loops and dangling
    /// endpoints.
    pub fn from_parts(
        episode_id: impl Into<String>,
        nodes: Vec<GraphNode>,
        edges: Vec<Edge>,
    ) -> Result<Self> {
        let n = nodes.len();
        let mut out_edges = vec![Vec::new(); n];
        let mut in_edges = vec![Vec::new(); n];
        for (i, e) in edges.iter().enumerate() {
            if e.src >= n || e.dst >= n {
                return Err(Error::UnknownNode(format!(
                    "edge {}->{} in a {n}-node graph",
                    e.src, e.dst
                )));
            }
            if e.src == e.dst {
                return Err(Error::InvalidData(format!("self-loop on node {}", e.src)));
            }
            out_edges[e.src].push(i);
            in_edges[e.dst].push(i);
        }
        Ok(Self {
            episode_id: episode_id.into(),
            nodes,
            edges,
            out_edges,
            in_edges,
        })
    }

    pub fn episode_id(&self) -> &str {
        &self.episode_id
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn node_index(&self, chunk_id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.chunk_id == chunk_id)
    }

    pub fn outgoing(&self, node: usize) -> impl Iterator<Item = &Edge> {
        self.out_edges[node].iter().map(move |&i| &self.edges[i])
    }

    pub fn incoming(&self, node: usize) -> impl Iterator<Item = &Edge> {
        self.in_edges[node].iter().map(move |&i| &self.edges[i])
    }

    /// Distinct successors of `node`, ascending.
    pub fn successors(&self, node: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self.outgoing(node).map(|e| e.dst).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Distinct nodes adjacent to `node` in either direction, ascending.
    pub fn undirected_neighbors(&self, node: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .outgoing(node)
            .map(|e| e.dst)
            .chain(self.incoming(node).map(|e| e.src))
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Induced subgraph on `keep`. Nodes keep their relative (seq) order.
    pub fn induced(&self, keep: &[usize]) -> Result<EpisodeGraph> {
        let mut sorted = keep.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut remap = vec![usize::MAX; self.nodes.len()];
        for (new, &old) in sorted.iter().enumerate() {
            if old >= self.nodes.len() {
                return Err(Error::UnknownNode(old.to_string()));
            }
            remap[old] = new;
        }
        let nodes = sorted.iter().map(|&i| self.nodes[i].clone()).collect();
        let edges = self
            .edges
            .iter()
            .filter(|e| remap[e.src] != usize::MAX && remap[e.dst] != usize::MAX)
            .map(|e| Edge {
                src: remap[e.src],
                dst: remap[e.dst],
                ..*e
            })
            .collect();
        EpisodeGraph::from_parts(self.episode_id.clone(), nodes, edges)
    }

    pub fn edge_records(&self) -> impl Iterator<Item = EdgeRecord> + '_ {
        self.edges.iter().map(|e| EdgeRecord {
            src: self.nodes[e.src].chunk_id.clone(),
            dst: self.nodes[e.dst].chunk_id.clone(),
            kind: e.kind,
            weight: e.weight,
        })
    }

    /// Writes the debugging edge dump, one JSON object per edge.
    pub fn write_edge_dump(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for rec in self.edge_records() {
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Line of the edge dump file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub src: String,
    pub dst: String,
    #[serde(rename = "type")]
    pub kind: EdgeKind,
    pub weight: f32,
}

/// Lookup of episode graphs by episode id.
pub trait GraphSource {
    fn episode_graph(&self, episode_id: &str) -> Option<&EpisodeGraph>;
}

impl<S: BuildHasher> GraphSource for HashMap<String, EpisodeGraph, S> {
    fn episode_graph(&self, episode_id: &str) -> Option<&EpisodeGraph> {
        self.get(episode_id)
    }
}

impl GraphSource for BTreeMap<String, EpisodeGraph> {
    fn episode_graph(&self, episode_id: &str) -> Option<&EpisodeGraph> {
        self.get(episode_id)
    }
}

impl<S: BuildHasher> GraphSource for HashMap<String, Arc<EpisodeGraph>, S> {
    fn episode_graph(&self, episode_id: &str) -> Option<&EpisodeGraph> {
        self.get(episode_id).map(Arc::as_ref)
    }
}

/// Episode graphs stored in corpus episode order (sorted by episode id).
#[derive(Debug, Clone, Default)]
pub struct EpisodeGraphs {
    graphs: Vec<Arc<EpisodeGraph>>,
}

impl EpisodeGraphs {
    pub fn new(mut graphs: Vec<Arc<EpisodeGraph>>) -> Self {
        graphs.sort_by(|a, b| a.episode_id.cmp(&b.episode_id));
        Self { graphs }
    }

    pub fn get(&self, episode: usize) -> &EpisodeGraph {
        &self.graphs[episode]
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &EpisodeGraph> {
        self.graphs.iter().map(Arc::as_ref)
    }
}

impl GraphSource for EpisodeGraphs {
    fn episode_graph(&self, episode_id: &str) -> Option<&EpisodeGraph> {
        self.graphs
            .binary_search_by(|g| g.episode_id.as_str().cmp(episode_id))
            .ok()
            .map(|i| self.graphs[i].as_ref())
    }
}
