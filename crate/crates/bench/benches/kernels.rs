use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use qgat_bench::{fixture, DIM};
use qgat_core::gnn::{init_params, score_candidates, ModelConfig};
use qgat_core::graph::{build_corpus_graphs, extract_ego_subgraph, EpisodeGraph, GraphCache};
use qgat_core::retrieval::{graph_adjusted_candidates, retrieve, RetrieveOptions};
use qgat_core::toy_embed;

fn bench_index(c: &mut Criterion) {
    let mut group = c.benchmark_group("flat_search");
    for episodes in [25, 100] {
        let f = fixture(episodes);
        let q = f.queries[0].embedding().unwrap().to_vec();
        group.throughput(Throughput::Elements(f.corpus.len() as u64));
        group.bench_with_input(BenchmarkId::new("top50", f.corpus.len()), &q, |b, q| {
            b.iter(|| f.index.search(black_box(q), 50).unwrap())
        });
    }
    group.finish();
}

fn bench_graphs(c: &mut Criterion) {
    let f = fixture(100);
    c.bench_function("build_corpus_graphs/2000", |b| {
        b.iter(|| build_corpus_graphs(black_box(&f.corpus), 0.6, 5, &GraphCache::new()).unwrap())
    });
    let q = f.queries[0].embedding().unwrap().to_vec();
    let opts = RetrieveOptions::default();
    c.bench_function("graph_adjusted_candidates/50", |b| {
        b.iter(|| {
            graph_adjusted_candidates(black_box(&q), &f.corpus, &f.index, &f.graphs, &opts).unwrap()
        })
    });
}

fn bench_model(c: &mut Criterion) {
    let f = fixture(100);
    let params = init_params(&ModelConfig::new(DIM, DIM), 0).unwrap();
    let q = f.queries[0].embedding().unwrap().to_vec();
    let subgraphs: Vec<EpisodeGraph> = f
        .index
        .search(&q, 50)
        .unwrap()
        .into_iter()
        .map(|h| extract_ego_subgraph(f.graphs.get(h.chunk.episode), h.chunk.index, 1).unwrap())
        .collect();
    let refs: Vec<&EpisodeGraph> = subgraphs.iter().collect();
    let mut group = c.benchmark_group("score_candidates");
    group.sample_size(20);
    group.throughput(Throughput::Elements(refs.len() as u64));
    group.bench_function("50_ego_subgraphs", |b| {
        b.iter(|| score_candidates::<f32>(&params, black_box(&q), &refs).unwrap())
    });
    group.finish();

    let mut group = c.benchmark_group("retrieve");
    group.sample_size(20);
    let opts = RetrieveOptions::default();
    group.bench_function("full_pipeline", |b| {
        b.iter(|| {
            retrieve(
                black_box(&q),
                &f.corpus,
                &f.index,
                &f.graphs,
                Some(&params),
                None,
                &opts,
            )
            .unwrap()
        })
    });
    group.finish();
}

fn bench_embed(c: &mut Criterion) {
    let text = "lorem ipsum dolor sit amet ".repeat(8);
    c.bench_function("toy_embed/40_words", |b| {
        b.iter(|| toy_embed(black_box(&text), DIM, 0).unwrap())
    });
}

criterion_group!(benches, bench_index, bench_graphs, bench_model, bench_embed);
criterion_main!(benches);
