use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{label_chunk_relevance, ChunkRef, Corpus, Query};
use crate::error::{Error, Result};
use crate::retrieval::FlatIndex;

/// Every chunk labeled relevant for `query`, in corpus order.
pub fn relevant_chunks(corpus: &Corpus, query: &Query, overlap_threshold: f64) -> Vec<ChunkRef> {
    corpus
        .refs()
        .filter(|&r| label_chunk_relevance(corpus.chunk(r), query, overlap_threshold))
        .collect()
}

/// The `n` highest-ranked non-relevant chunks among the top `10 n` index
/// hits, in rank order. When that window holds fewer than `n`, the rest are
/// drawn uniformly (seeded) from the remaining non-relevant chunks; fewer
/// than `n` are returned only if the corpus runs out.
pub fn sample_hard_negatives(
    query: &Query,
    corpus: &Corpus,
    index: &FlatIndex,
    n: usize,
    overlap_threshold: f64,
    seed: u64,
) -> Result<Vec<ChunkRef>> {
    let is_neg = |r: ChunkRef| !label_chunk_relevance(corpus.chunk(r), query, overlap_threshold);
    let window = n.saturating_mul(10).max(1);
    let mut out: Vec<ChunkRef> = index
        .search(query.embedding()?, window)?
        .into_iter()
        .map(|h| h.chunk)
        .filter(|&r| is_neg(r))
        .take(n)
        .collect();
    if out.len() < n {
        let taken: HashSet<ChunkRef> = out.iter().copied().collect();
        let mut rest: Vec<ChunkRef> = corpus
            .refs()
            .filter(|r| !taken.contains(r) && is_neg(*r))
            .collect();
        rest.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        out.extend(rest.into_iter().take(n - out.len()));
    }
    if out.is_empty() && n > 0 {
        return Err(Error::NoNegativesAvailable(query.query_id.clone()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Chunk, QueryType, Segment};

    fn corpus() -> Corpus {
        let embs = [[1.0, 0.0], [0.9, 0.1], [0.8, 0.3], [0.0, 1.0], [-1.0, 0.0]];
        let chunks = embs
            .iter()
            .enumerate()
            .map(|(i, e)| Chunk {
                episode_id: "e".into(),
                chunk_id: format!("c{i}"),
                seq_index: i,
                text: String::new(),
                start_time: 10.0 * i as f64,
                end_time: 10.0 * i as f64 + 10.0,
                embedding: Some(e.to_vec()),
            })
            .collect();
        Corpus::from_chunks(chunks).unwrap()
    }

    fn query(segments: Vec<(f64, f64)>) -> Query {
        Query {
            query_id: "q".into(),
            text: String::new(),
            embedding: Some(vec![1.0, 0.0]),
            complexity: 4,
            query_type: QueryType::MultiHop,
            relevant_segments: segments
                .into_iter()
                .map(|(start, end)| Segment {
                    episode_id: "e".into(),
                    start,
                    end,
                })
                .collect(),
            relevant_chunk_ids: None,
        }
    }

    #[test]
    fn skips_relevant_top_hit() {
        let c = corpus();
        let index = FlatIndex::build(&c).unwrap();
        let q = query(vec![(0.0, 10.0)]);
        let negs = sample_hard_negatives(&q, &c, &index, 1, 0.5, 0).unwrap();
        assert_eq!(
            negs,
            vec![ChunkRef {
                episode: 0,
                index: 1
            }]
        );
        let negs = sample_hard_negatives(&q, &c, &index, 3, 0.5, 0).unwrap();
        assert_eq!(
            negs.iter().map(|r| r.index).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
    }

    #[test]
    fn boundary_cases() {
        let c = corpus();
        let index = FlatIndex::build(&c).unwrap();
        let all = query(vec![(0.0, 50.0)]);
        assert!(matches!(
            sample_hard_negatives(&all, &c, &index, 1, 0.5, 0),
            Err(Error::NoNegativesAvailable(_))
        ));
        let one = query(vec![(0.0, 10.0)]);
        let negs = sample_hard_negatives(&one, &c, &index, 10, 0.5, 0).unwrap();
        assert_eq!(negs.len(), 4);
        assert_eq!(
            relevant_chunks(&c, &one, 0.5),
            vec![ChunkRef {
                episode: 0,
                index: 0
            }]
        );
    }

    #[test]
    fn hard_negatives_outscore_random_ones() {
        use crate::embed::cosine_similarity;
        use crate::synthetic::{generate, SyntheticConfig};
        let syn = SyntheticConfig {
            episodes: 10,
            eval_queries: 10,
            train_queries: 0,
            ..SyntheticConfig::default()
        };
        let data = generate(&syn).unwrap().embed(16, 0).unwrap();
        let index = FlatIndex::build(&data.corpus).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut hard, mut random, mut count) = (0.0f64, 0.0f64, 0usize);
        for (i, q) in data.eval_queries.iter().enumerate() {
            let e = q.embedding().unwrap();
            let sim = |r: ChunkRef| {
                f64::from(
                    cosine_similarity(e, data.corpus.chunk(r).embedding.as_ref().unwrap()).unwrap(),
                )
            };
            let negs = sample_hard_negatives(q, &data.corpus, &index, 3, 0.5, i as u64).unwrap();
            let mut pool: Vec<ChunkRef> = data
                .corpus
                .refs()
                .filter(|&r| !label_chunk_relevance(data.corpus.chunk(r), q, 0.5))
                .collect();
            pool.shuffle(&mut rng);
            hard += negs.iter().map(|&r| sim(r)).sum::<f64>();
            random += pool.iter().take(negs.len()).map(|&r| sim(r)).sum::<f64>();
            count += negs.len();
        }
        assert!(count > 0);
        assert!(
            hard / count as f64 > random / count as f64 + 0.1,
            "{hard} vs {random}"
        );
    }
}
