use std::sync::Arc;

use rayon::prelude::*;

use crate::corpus::{Chunk, Corpus};
use crate::embed::cosine_similarity;
use crate::error::{Error, Result};

use super::{CacheKey, Edge, EdgeKind, EpisodeGraph, EpisodeGraphs, GraphCache, GraphNode};

/// Semantic edge similarity threshold.
pub const DEFAULT_TAU: f32 = 0.6;
/// Semantic neighbors kept per node.
pub const DEFAULT_TOP_K: usize = 5;

/// Builds the multi-relational graph of one episode.
///
/// `chunks` must be in seq order. Sequential edges (weight 1.0) join
/// consecutive chunks in both directions. Each node then gets directed
/// semantic edges to its `k` most similar peers whose similarity strictly
/// exceeds `tau`; ties are broken by lower node index.
pub fn build_episode_graph(chunks: &[Chunk], tau: f32, k: usize) -> Result<EpisodeGraph> {
    let first = chunks.first().ok_or(Error::EmptyEpisode)?;
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::InvalidData(format!(
            "tau must lie in [0, 1), got {tau}"
        )));
    }
    let mut nodes = Vec::with_capacity(chunks.len());
    for c in chunks {
        if c.episode_id != first.episode_id {
            return Err(Error::InvalidData(format!(
                "chunk {:?} belongs to episode {:?}, expected {:?}",
                c.chunk_id, c.episode_id, first.episode_id
            )));
        }
        nodes.push(GraphNode {
            chunk_id: c.chunk_id.clone(),
            seq_index: c.seq_index,
            start_time: c.start_time,
            end_time: c.end_time,
            embedding: c.embedding()?.to_vec(),
        });
    }
    let n = nodes.len();

    let mut edges = Vec::new();
    for i in 1..n {
        for (src, dst) in [(i - 1, i), (i, i - 1)] {
            edges.push(Edge {
                src,
                dst,
                kind: EdgeKind::Sequential,
                weight: 1.0,
            });
        }
    }

    let mut sim = vec![0.0f32; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let s = cosine_similarity(&nodes[i].embedding, &nodes[j].embedding)?;
            sim[i * n + j] = s;
            sim[j * n + i] = s;
        }
    }
    for i in 0..n {
        let mut cands: Vec<(usize, f32)> = (0..n)
            .filter(|&j| j != i && sim[i * n + j] > tau)
            .map(|j| (j, sim[i * n + j]))
            .collect();
        cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        cands.truncate(k);
        edges.extend(cands.into_iter().map(|(j, w)| Edge {
            src: i,
            dst: j,
            kind: EdgeKind::Semantic,
            weight: w,
        }));
    }

    EpisodeGraph::from_parts(first.episode_id.clone(), nodes, edges)
}

/// Graphs for every episode of `corpus`, built in parallel through `cache`.
pub fn build_corpus_graphs(
    corpus: &Corpus,
    tau: f32,
    k: usize,
    cache: &GraphCache,
) -> Result<EpisodeGraphs> {
    let graphs = corpus
        .episodes
        .par_iter()
        .map(|ep| {
            cache.get_or_build(CacheKey::new(ep.id.clone(), tau, k), || {
                build_episode_graph(&ep.chunks, tau, k)
            })
        })
        .collect::<Result<Vec<Arc<EpisodeGraph>>>>()?;
    Ok(EpisodeGraphs::new(graphs))
}
