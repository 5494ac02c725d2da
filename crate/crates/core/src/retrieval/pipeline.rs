use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{ChunkRef, Corpus};
use crate::error::{Error, Result};
use crate::gnn::{score_candidates, ModelParams};
use crate::graph::{
    extract_ego_subgraph, graph_score_adjust, query_aware_subgraph, ChunkKey, EpisodeGraph,
    EpisodeGraphs,
};

use super::{FlatIndex, FusionModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrieveOptions {
    pub k_candidates: usize,
    pub alpha: f32,
    pub ego_radius: usize,
    pub subgraph_depth: usize,
    pub sim_threshold: f32,
    pub top_n: usize,
    /// Intersect each ego-subgraph with the query-aware expansion.
    pub query_aware: bool,
}

impl Default for RetrieveOptions {
    fn default() -> Self {
        Self {
            k_candidates: 50,
            alpha: 0.5,
            ego_radius: 1,
            subgraph_depth: 2,
            sim_threshold: 0.6,
            top_n: 5,
            query_aware: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    #[serde(skip)]
    pub chunk: ChunkRef,
    pub episode_id: String,
    pub chunk_id: String,
    pub idx_score: f32,
    pub graph_score: f32,
    /// Index and graph scores mixed by `alpha`.
    pub adjusted_score: f32,
    pub gnn_score: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fused_score: Option<f32>,
}

/// Subgraph scored by the model for candidate `node` of `g`.
pub fn candidate_subgraph(
    g: &EpisodeGraph,
    node: usize,
    query_emb: &[f32],
    opts: &RetrieveOptions,
) -> Result<EpisodeGraph> {
    let ego = extract_ego_subgraph(g, node, opts.ego_radius)?;
    if !opts.query_aware {
        return Ok(ego);
    }
    let guided = query_aware_subgraph(
        g,
        query_emb,
        &[node],
        opts.subgraph_depth,
        opts.sim_threshold,
    )?;
    let keep: Vec<usize> = guided
        .nodes()
        .iter()
        .filter(|n| ego.node_index(&n.chunk_id).is_some())
        .filter_map(|n| g.node_index(&n.chunk_id))
        .collect();
    g.induced(&keep)
}

/// Index search followed by graph score adjustment, ranked by the adjusted
/// score. `gnn_score` is left at 0.
pub fn graph_adjusted_candidates(
    query_emb: &[f32],
    corpus: &Corpus,
    index: &FlatIndex,
    graphs: &EpisodeGraphs,
    opts: &RetrieveOptions,
) -> Result<Vec<RetrievalResult>> {
    let hits = index.search(query_emb, opts.k_candidates)?;
    let mut by_key = HashMap::with_capacity(hits.len());
    let keyed: Vec<(ChunkKey, f32)> = hits
        .iter()
        .map(|h| {
            let c = corpus.chunk(h.chunk);
            let key = ChunkKey::new(c.episode_id.clone(), c.chunk_id.clone());
            by_key.insert(key.clone(), h.chunk);
            (key, h.score)
        })
        .collect();
    let adjusted = graph_score_adjust(&keyed, graphs, opts.alpha)?;
    Ok(adjusted
        .into_iter()
        .map(|a| RetrievalResult {
            chunk: by_key[&a.key],
            episode_id: a.key.episode_id,
            chunk_id: a.key.chunk_id,
            idx_score: a.idx_score,
            graph_score: a.graph_score,
            adjusted_score: a.combined,
            gnn_score: 0.0,
            fused_score: None,
        })
        .collect())
}

fn by_fused(a: &RetrievalResult, b: &RetrievalResult) -> Ordering {
    let fa = a.fused_score.unwrap_or(f32::NEG_INFINITY);
    let fb = b.fused_score.unwrap_or(f32::NEG_INFINITY);
    fb.total_cmp(&fa)
        .then(b.gnn_score.total_cmp(&a.gnn_score))
        .then_with(|| a.chunk_id.cmp(&b.chunk_id))
        .then_with(|| a.episode_id.cmp(&b.episode_id))
}

/// Full pipeline: index search, graph score adjustment, per-candidate
/// subgraph scoring and score fusion.
///
/// With a fusion model the output is ranked by fused score (ties: model
/// score, then chunk id). Without one it keeps the adjusted-score order.
pub fn retrieve(
    query_emb: &[f32],
    corpus: &Corpus,
    index: &FlatIndex,
    graphs: &EpisodeGraphs,
    params: Option<&ModelParams>,
    fusion: Option<&FusionModel>,
    opts: &RetrieveOptions,
) -> Result<Vec<RetrievalResult>> {
    let params = params.ok_or(Error::ModelNotLoaded)?;
    let mut results = graph_adjusted_candidates(query_emb, corpus, index, graphs, opts)?;
    let subgraphs = results
        .iter()
        .map(|r| candidate_subgraph(graphs.get(r.chunk.episode), r.chunk.index, query_emb, opts))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&EpisodeGraph> = subgraphs.iter().collect();
    let scores = score_candidates(params, query_emb, &refs)?;
    for (r, s) in results.iter_mut().zip(scores) {
        r.gnn_score = s;
    }
    if let Some(model) = fusion {
        for r in &mut results {
            r.fused_score = Some(model.apply(r.idx_score, r.graph_score, r.gnn_score));
        }
        results.sort_by(by_fused);
    }
    results.truncate(opts.top_n);
    Ok(results)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::corpus::Chunk;
    use crate::gnn::{init_params, ModelConfig};
    use crate::graph::{build_corpus_graphs, GraphCache};

    fn setup(seed: u64) -> (Corpus, FlatIndex, EpisodeGraphs, ModelParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base: Vec<Vec<f32>> = (0..4)
            .map(|_| (0..8).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let mut chunks = Vec::new();
        for e in 0..4 {
            for i in 0..10 {
                let topic = &base[(e + i) % 4];
                chunks.push(Chunk {
                    episode_id: format!("ep{e}"),
                    chunk_id: format!("ep{e}-c{i}"),
                    seq_index: i,
                    text: String::new(),
                    start_time: i as f64,
                    end_time: i as f64 + 1.0,
                    embedding: Some(
                        topic
                            .iter()
                            .map(|x| x + rng.gen_range(-0.3f32..0.3))
                            .collect(),
                    ),
                });
            }
        }
        let corpus = Corpus::from_chunks(chunks).unwrap();
        let index = FlatIndex::build(&corpus).unwrap();
        let graphs = build_corpus_graphs(&corpus, 0.6, 5, &GraphCache::new()).unwrap();
        let mut cfg = ModelConfig::new(8, 8);
        cfg.hidden_dim = 16;
        cfg.fusion_dims = vec![16, 8];
        let params = init_params(&cfg, seed).unwrap();
        (corpus, index, graphs, params)
    }

    #[test]
    fn alpha_one_idx_only_fusion_keeps_index_order() {
        let (corpus, index, graphs, params) = setup(1);
        let fusion = FusionModel::new(0.0, [1.0, 0.0, 0.0]);
        let opts = RetrieveOptions {
            alpha: 1.0,
            top_n: 20,
            k_candidates: 20,
            ..RetrieveOptions::default()
        };
        let q: Vec<f32> = corpus
            .chunk(ChunkRef {
                episode: 2,
                index: 4,
            })
            .embedding()
            .unwrap()
            .to_vec();
        let got = retrieve(
            &q,
            &corpus,
            &index,
            &graphs,
            Some(&params),
            Some(&fusion),
            &opts,
        )
        .unwrap();
        let want: Vec<ChunkRef> = index
            .search(&q, 20)
            .unwrap()
            .into_iter()
            .map(|h| h.chunk)
            .collect();
        assert_eq!(got.iter().map(|r| r.chunk).collect::<Vec<_>>(), want);
    }

    #[test]
    fn results_are_complete_and_unique() {
        let (corpus, index, graphs, params) = setup(2);
        let fusion = FusionModel::new(0.1, [1.0, 0.5, 2.0]);
        for (i, opts) in [
            RetrieveOptions::default(),
            RetrieveOptions {
                query_aware: true,
                sim_threshold: 0.0,
                ..RetrieveOptions::default()
            },
            RetrieveOptions {
                top_n: 100,
                k_candidates: 7,
                ..RetrieveOptions::default()
            },
        ]
        .iter()
        .enumerate()
        {
            let q = corpus
                .chunk(ChunkRef {
                    episode: i,
                    index: 2,
                })
                .embedding()
                .unwrap()
                .to_vec();
            let got = retrieve(
                &q,
                &corpus,
                &index,
                &graphs,
                Some(&params),
                Some(&fusion),
                opts,
            )
            .unwrap();
            assert_eq!(got.len(), opts.top_n.min(opts.k_candidates));
            let ids: HashSet<_> = got.iter().map(|r| (&r.episode_id, &r.chunk_id)).collect();
            assert_eq!(ids.len(), got.len());
            for r in &got {
                assert!((-1.0..=1.0).contains(&r.idx_score));
                assert!((0.0..=1.0).contains(&r.graph_score));
                assert!(r.gnn_score > 0.0 && r.gnn_score < 1.0);
                assert!(r.fused_score.is_some());
            }
        }
    }

    #[test]
    fn missing_model_is_reported() {
        let (corpus, index, graphs, _) = setup(3);
        let q = vec![1.0; 8];
        assert!(matches!(
            retrieve(
                &q,
                &corpus,
                &index,
                &graphs,
                None,
                None,
                &RetrieveOptions::default()
            ),
            Err(Error::ModelNotLoaded)
        ));
    }

    #[test]
    fn without_fusion_alpha_one_is_index_order() {
        let (corpus, index, graphs, params) = setup(4);
        let opts = RetrieveOptions {
            alpha: 1.0,
            top_n: 15,
            k_candidates: 15,
            ..RetrieveOptions::default()
        };
        let q = vec![0.5, -0.2, 0.1, 0.9, 0.0, 0.3, -0.7, 0.4];
        let got = retrieve(&q, &corpus, &index, &graphs, Some(&params), None, &opts).unwrap();
        let want: Vec<ChunkRef> = index
            .search(&q, 15)
            .unwrap()
            .into_iter()
            .map(|h| h.chunk)
            .collect();
        assert_eq!(got.iter().map(|r| r.chunk).collect::<Vec<_>>(), want);
        assert!(got.iter().all(|r| r.fused_score.is_none()));
    }

    #[test]
    fn query_aware_subgraph_is_inside_ego() {
        let (corpus, _, graphs, _) = setup(5);
        let g = graphs.get(1);
        let q = corpus
            .chunk(ChunkRef {
                episode: 1,
                index: 5,
            })
            .embedding()
            .unwrap()
            .to_vec();
        let opts = RetrieveOptions {
            query_aware: true,
            sim_threshold: -1.0,
            ..RetrieveOptions::default()
        };
        let both = candidate_subgraph(g, 5, &q, &opts).unwrap();
        let ego = candidate_subgraph(g, 5, &q, &RetrieveOptions::default()).unwrap();
        assert!(both.node_count() <= ego.node_count());
        assert!(both
            .nodes()
            .iter()
            .all(|n| ego.node_index(&n.chunk_id).is_some()));
        assert!(both.node_index(&g.nodes()[5].chunk_id).is_some());
    }
}
