//! Shared fixtures for the criterion benchmarks in `benches/`.

use qgat_core::graph::{build_corpus_graphs, EpisodeGraphs, GraphCache};
use qgat_core::retrieval::FlatIndex;
use qgat_core::synthetic::{generate, SyntheticConfig};
use qgat_core::{Corpus, Query};

pub const DIM: usize = 32;

pub struct Fixture {
    pub corpus: Corpus,
    pub queries: Vec<Query>,
    pub index: FlatIndex,
    pub graphs: EpisodeGraphs,
}

/// Toy-embedded synthetic corpus with `episodes` episodes of 20 chunks.
pub fn fixture(episodes: usize) -> Fixture {
    let syn = SyntheticConfig {
        episodes,
        eval_queries: episodes,
        train_queries: 0,
        ..SyntheticConfig::default()
    };
    let data = generate(&syn)
        .expect("synthetic corpus")
        .embed(DIM, 0)
        .expect("embedding");
    let index = FlatIndex::build(&data.corpus).expect("index");
    let graphs = build_corpus_graphs(&data.corpus, 0.6, 5, &GraphCache::new()).expect("graphs");
    Fixture {
        corpus: data.corpus,
        queries: data.eval_queries,
        index,
        graphs,
    }
}
