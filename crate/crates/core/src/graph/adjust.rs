use std::cmp::Ordering;

use crate::error::{Error, Result};

use super::{EdgeKind, EpisodeGraph, GraphSource};

/// Globally unique chunk identity.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ChunkKey {
    pub episode_id: String,
    pub chunk_id: String,
}

impl ChunkKey {
    pub fn new(episode_id: impl Into<String>, chunk_id: impl Into<String>) -> Self {
        Self {
            episode_id: episode_id.into(),
            chunk_id: chunk_id.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjustedScore {
    pub key: ChunkKey,
    pub idx_score: f32,
    pub graph_score: f32,
    pub combined: f32,
}

/// Mean weight of the outgoing semantic edges of `node`, 0.0 when it has
/// none.
pub fn graph_score(g: &EpisodeGraph, node: usize) -> f32 {
    let (sum, n) = g
        .outgoing(node)
        .filter(|e| e.kind == EdgeKind::Semantic)
        .fold((0.0f64, 0usize), |(s, n), e| {
            (s + f64::from(e.weight), n + 1)
        });
    if n == 0 {
        0.0
    } else {
        (sum / n as f64) as f32
    }
}

/// Mixes index similarity with semantic-edge support:
/// `combined = alpha * idx_score + (1 - alpha) * graph_score`.
///
/// Output is sorted by combined score descending, then index score
/// descending, then chunk id and episode id ascending.
pub fn graph_score_adjust<G: GraphSource + ?Sized>(
    results: &[(ChunkKey, f32)],
    graphs: &G,
    alpha: f32,
) -> Result<Vec<AdjustedScore>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidData(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    let mut out = Vec::with_capacity(results.len());
    for (key, idx_score) in results {
        let g = graphs
            .episode_graph(&key.episode_id)
            .ok_or_else(|| Error::MissingGraph(key.episode_id.clone()))?;
        let node = g
            .node_index(&key.chunk_id)
            .ok_or_else(|| Error::UnknownChunk(key.chunk_id.clone()))?;
        let gs = graph_score(g, node);
        out.push(AdjustedScore {
            key: key.clone(),
            idx_score: *idx_score,
            graph_score: gs,
            combined: alpha * idx_score + (1.0 - alpha) * gs,
        });
    }
    out.sort_by(compare_adjusted);
    Ok(out)
}

fn compare_adjusted(a: &AdjustedScore, b: &AdjustedScore) -> Ordering {
    b.combined
        .total_cmp(&a.combined)
        .then(b.idx_score.total_cmp(&a.idx_score))
        .then_with(|| a.key.chunk_id.cmp(&b.key.chunk_id))
        .then_with(|| a.key.episode_id.cmp(&b.key.episode_id))
}
