//! Seeded synthetic corpus with planted multi-hop structure.
//!
//! Each query owns a chain of 2 to 4 pairwise non-adjacent chunks in one
//! episode. Chain chunks share a few heavily repeated bridge words (which
//! links them by semantic edges) and carry their own fact words. Multi-hop
//! queries mention two bridge words plus a little of every hop, so no single
//! chain chunk matches them strongly on its own. Every multi-hop query also
//! gets a few lexical distractors: chunks in other episodes that repeat its
//! fact words without the bridge, so they outrank the chain on cosine
//! similarity but have no semantic neighbors. Everything else is filler drawn
//! from a shared vocabulary.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{fill_query_embeddings, Chunk, Corpus, Query, QueryType, Segment};
use crate::error::{Error, Result};

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const FILLER_VOCAB: usize = 2000;
const FILLER_LEN: usize = 20;
const CHUNK_SECONDS: f64 = 30.0;
const BRIDGE_WORDS: usize = 3;
const BRIDGE_REPEAT: usize = 4;
const FACT_WORDS: usize = 3;
const FACT_REPEAT: usize = 2;
const CHAIN_FILLER: usize = 4;
const QUERY_BRIDGE: usize = 2;
const DISTRACTORS: usize = 3;
const DISTRACTOR_FILLER: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub episodes: usize,
    pub chunks_per_episode: usize,
    pub eval_queries: usize,
    pub train_queries: usize,
    /// Share of queries phrased as multi-hop; the rest split evenly between
    /// structural and context-dependent phrasings.
    pub multi_hop_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            chunks_per_episode: 20,
            eval_queries: 200,
            train_queries: 120,
            multi_hop_fraction: 0.6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    /// Chunks without embeddings, in episode then sequence order.
    pub chunks: Vec<Chunk>,
    pub eval_queries: Vec<Query>,
    pub train_queries: Vec<Query>,
}

/// A synthetic corpus with toy embeddings filled in and normalized.
#[derive(Debug, Clone)]
pub struct EmbeddedSynthetic {
    pub corpus: Corpus,
    pub eval_queries: Vec<Query>,
    pub train_queries: Vec<Query>,
}

impl SyntheticData {
    pub fn embed(self, dim: usize, seed: u64) -> Result<EmbeddedSynthetic> {
        let mut corpus = Corpus::from_chunks(self.chunks)?;
        corpus.fill_toy_embeddings(dim, seed)?;
        corpus.normalize_embeddings()?;
        let mut eval_queries = self.eval_queries;
        let mut train_queries = self.train_queries;
        fill_query_embeddings(&mut eval_queries, dim, seed)?;
        fill_query_embeddings(&mut train_queries, dim, seed)?;
        Ok(EmbeddedSynthetic {
            corpus,
            eval_queries,
            train_queries,
        })
    }
}

struct Words {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl Words {
    fn fresh(&mut self, syllables: usize) -> String {
        loop {
            let w: String = (0..syllables)
                .flat_map(|_| {
                    let c = CONSONANTS[self.rng.gen_range(0..CONSONANTS.len())];
                    let v = VOWELS[self.rng.gen_range(0..VOWELS.len())];
                    [c as char, v as char]
                })
                .collect();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

struct Plan {
    query_type: QueryType,
    episode: usize,
    slots: Vec<usize>,
    bridge: Vec<String>,
    facts: Vec<Vec<String>>,
}

/// Up to `hops` pairwise non-adjacent free slots, or None.
fn pick_slots(free: &[bool], hops: usize, rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
    let mut cands: Vec<usize> = (0..free.len()).filter(|&i| free[i]).collect();
    for _ in 0..16 {
        cands.shuffle(rng);
        let mut chosen: Vec<usize> = Vec::with_capacity(hops);
        for &c in &cands {
            if chosen.iter().all(|&s: &usize| s.abs_diff(c) >= 2) {
                chosen.push(c);
                if chosen.len() == hops {
                    chosen.sort_unstable();
                    return Some(chosen);
                }
            }
        }
    }
    None
}

fn repeat(words: &[String], times: usize) -> Vec<String> {
    words
        .iter()
        .flat_map(|w| std::iter::repeat_n(w.clone(), times))
        .collect()
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    if cfg.episodes == 0 || cfg.chunks_per_episode < 7 {
        return Err(Error::InvalidConfig(
            "need at least one episode of 7 or more chunks".into(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.multi_hop_fraction) {
        return Err(Error::InvalidConfig(
            "multi_hop_fraction must lie in [0, 1]".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut words = Words {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x77),
        used: HashSet::new(),
    };
    let filler: Vec<String> = (0..FILLER_VOCAB).map(|_| words.fresh(3)).collect();
    let mut free = vec![vec![true; cfg.chunks_per_episode]; cfg.episodes];
    let total = cfg.eval_queries + cfg.train_queries;
    let mut plans = Vec::with_capacity(total);
    for q in 0..total {
        let hops = rng.gen_range(2..=4);
        let start = rng.gen_range(0..cfg.episodes);
        let placed = (0..cfg.episodes).find_map(|o| {
            let e = (start + o) % cfg.episodes;
            pick_slots(&free[e], hops, &mut rng).map(|s| (e, s))
        });
        let Some((episode, slots)) = placed else {
            return Err(Error::InvalidConfig(format!(
                "corpus too small to place query {q}; use more episodes or fewer queries"
            )));
        };
        for &s in &slots {
            free[episode][s] = false;
        }
        let bridge = (0..BRIDGE_WORDS).map(|_| words.fresh(4)).collect();
        let facts = (0..hops)
            .map(|_| (0..FACT_WORDS).map(|_| words.fresh(4)).collect())
            .collect();
        let r: f64 = rng.gen();
        let query_type = if r < cfg.multi_hop_fraction {
            QueryType::MultiHop
        } else if r < cfg.multi_hop_fraction + (1.0 - cfg.multi_hop_fraction) / 2.0 {
            QueryType::Structural
        } else {
            QueryType::ContextDependent
        };
        plans.push(Plan {
            query_type,
            episode,
            slots,
            bridge,
            facts,
        });
    }

    let mut texts: Vec<Vec<Option<Vec<String>>>> =
        vec![vec![None; cfg.chunks_per_episode]; cfg.episodes];
    for (q, p) in plans.iter().enumerate() {
        if p.query_type != QueryType::MultiHop {
            continue;
        }
        let mut episodes: Vec<usize> = (0..cfg.episodes).filter(|&e| e != p.episode).collect();
        episodes.shuffle(&mut rng);
        let mut placed = 0;
        for e in episodes {
            if placed == DISTRACTORS {
                break;
            }
            let open: Vec<usize> = (0..cfg.chunks_per_episode)
                .filter(|&i| free[e][i])
                .collect();
            let Some(&slot) = open.choose(&mut rng) else {
                continue;
            };
            free[e][slot] = false;
            let mut toks: Vec<String> = p
                .facts
                .iter()
                .flat_map(|f| f[..2].iter().cloned())
                .collect();
            toks.extend(
                (0..DISTRACTOR_FILLER).map(|_| filler[rng.gen_range(0..FILLER_VOCAB)].clone()),
            );
            toks.shuffle(&mut rng);
            texts[e][slot] = Some(toks);
            placed += 1;
        }
        if placed < DISTRACTORS {
            return Err(Error::InvalidConfig(format!(
                "no room for the distractors of query {q}"
            )));
        }
    }
    for p in &plans {
        for (hop, &slot) in p.slots.iter().enumerate() {
            let mut toks = repeat(&p.bridge, BRIDGE_REPEAT);
            toks.extend(repeat(&p.facts[hop], FACT_REPEAT));
            toks.extend((0..CHAIN_FILLER).map(|_| filler[rng.gen_range(0..FILLER_VOCAB)].clone()));
            toks.shuffle(&mut rng);
            texts[p.episode][slot] = Some(toks);
        }
    }
    let mut chunks = Vec::with_capacity(cfg.episodes * cfg.chunks_per_episode);
    for (e, row) in texts.into_iter().enumerate() {
        for (i, toks) in row.into_iter().enumerate() {
            let toks = toks.unwrap_or_else(|| {
                (0..FILLER_LEN)
                    .map(|_| filler[rng.gen_range(0..FILLER_VOCAB)].clone())
                    .collect()
            });
            chunks.push(Chunk {
                episode_id: format!("ep{e:03}"),
                chunk_id: format!("ep{e:03}-c{i:02}"),
                seq_index: i,
                text: toks.join(" "),
                start_time: CHUNK_SECONDS * i as f64,
                end_time: CHUNK_SECONDS * (i + 1) as f64,
                embedding: None,
            });
        }
    }

    let mut queries = Vec::with_capacity(total);
    for (q, p) in plans.iter().enumerate() {
        let hops = p.slots.len();
        let query_type = p.query_type;
        let toks = match query_type {
            QueryType::MultiHop => {
                let mut t = p.bridge[..QUERY_BRIDGE].to_vec();
                for f in &p.facts {
                    t.extend(f[..2].iter().cloned());
                }
                t
            }
            QueryType::Structural => {
                let mut t = p.bridge.clone();
                t.extend(p.facts[0][..2].iter().cloned());
                t
            }
            _ => {
                let mut t = p.bridge[..2].to_vec();
                t.push(p.facts[0][0].clone());
                t.push(p.facts[hops - 1][0].clone());
                t
            }
        };
        let split = if q < cfg.eval_queries { "q" } else { "t" };
        let episode_id = format!("ep{:03}", p.episode);
        queries.push(Query {
            query_id: format!("{split}{q:04}"),
            text: toks.join(" "),
            embedding: None,
            complexity: if hops == 4 { 5 } else { 4 },
            query_type,
            relevant_segments: p
                .slots
                .iter()
                .map(|&s| Segment {
                    episode_id: episode_id.clone(),
                    start: CHUNK_SECONDS * s as f64,
                    end: CHUNK_SECONDS * (s + 1) as f64,
                })
                .collect(),
            relevant_chunk_ids: None,
        });
    }
    let train_queries = queries.split_off(cfg.eval_queries);
    Ok(SyntheticData {
        chunks,
        eval_queries: queries,
        train_queries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{label_chunk_relevance, Corpus};

    #[test]
    fn shape_and_ground_truth() {
        let data = generate(&SyntheticConfig::default()).unwrap();
        assert_eq!(data.chunks.len(), 2000);
        assert_eq!(data.eval_queries.len(), 200);
        assert_eq!(data.train_queries.len(), 120);
        let corpus = Corpus::from_chunks(data.chunks.clone()).unwrap();
        let mut owner = std::collections::HashMap::new();
        for q in data.eval_queries.iter().chain(&data.train_queries) {
            let rel: Vec<&Chunk> = corpus
                .chunks()
                .filter(|c| label_chunk_relevance(c, q, 0.5))
                .collect();
            assert!((2..=4).contains(&rel.len()), "{}", q.query_id);
            assert_eq!(q.complexity, if rel.len() == 4 { 5 } else { 4 });
            for w in rel.windows(2) {
                assert_eq!(w[0].episode_id, w[1].episode_id);
                assert!(
                    w[1].seq_index >= w[0].seq_index + 2,
                    "adjacent chain chunks"
                );
            }
            for c in rel {
                assert!(owner
                    .insert(c.chunk_id.clone() + &c.episode_id, q.query_id.clone())
                    .is_none());
            }
        }
        let multi = data
            .eval_queries
            .iter()
            .filter(|q| q.query_type == QueryType::MultiHop)
            .count();
        assert!((90..=150).contains(&multi), "{multi}");
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let cfg = SyntheticConfig {
            episodes: 10,
            eval_queries: 10,
            train_queries: 5,
            ..SyntheticConfig::default()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = SyntheticConfig {
            seed: 1,
            ..cfg.clone()
        };
        assert_ne!(generate(&cfg).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn overfull_corpus_is_rejected() {
        let cfg = SyntheticConfig {
            episodes: 2,
            eval_queries: 50,
            train_queries: 0,
            ..SyntheticConfig::default()
        };
        assert!(matches!(generate(&cfg), Err(Error::InvalidConfig(_))));
    }
}
