use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{AdamState, Tape, Tensor};
use crate::corpus::{ChunkRef, Corpus, Query};
use crate::error::{Error, Result};
use crate::gnn::{encode, fuse_and_score, query_guided_pool, Mode, ModelParams};
use crate::graph::{extract_ego_subgraph, to_batched_graph, EpisodeGraph, EpisodeGraphs};
use crate::retrieval::FlatIndex;

use super::losses::triplet_bce_loss;
use super::negatives::{relevant_chunks, sample_hard_negatives};
use super::{EpochRecord, TrainConfig, Triplet};

/// Subgraphs encoded per parallel work item.
const ENCODE_GROUP: usize = 64;

/// Frozen-encoder node embeddings of the ego-subgraph around each chunk.
/// Chunks whose subgraph has no edges are absent, matching inference where
/// such candidates are not scored by the model.
#[derive(Debug, Clone, Default)]
pub struct EncodedSubgraphs {
    hidden: usize,
    rows: HashMap<ChunkRef, Vec<f32>>,
}

impl EncodedSubgraphs {
    pub fn get(&self, r: ChunkRef) -> Option<&[f32]> {
        self.rows.get(&r).map(Vec::as_slice)
    }

    pub fn contains(&self, r: ChunkRef) -> bool {
        self.rows.contains_key(&r)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }
}

/// Runs the encoder in eval mode over the radius-`radius` ego-subgraph of
/// every chunk in `refs`.
pub fn encode_subgraphs(
    params: &ModelParams,
    graphs: &EpisodeGraphs,
    refs: &[ChunkRef],
    radius: usize,
) -> Result<EncodedSubgraphs> {
    let hidden = params.config().hidden_dim;
    let parts = refs
        .par_chunks(ENCODE_GROUP)
        .map(|group| -> Result<Vec<(ChunkRef, Vec<f32>)>> {
            let subgraphs = group
                .iter()
                .map(|r| extract_ego_subgraph(graphs.get(r.episode), r.index, radius))
                .collect::<Result<Vec<_>>>()?;
            if subgraphs.iter().all(|g| g.edge_count() == 0) {
                return Ok(Vec::new());
            }
            let members: Vec<&EpisodeGraph> = subgraphs.iter().collect();
            let bg = to_batched_graph(&members)?;
            let mut tape = Tape::new();
            let bound = params.bind_constants(&mut tape);
            let h = encode(&mut tape, &bound, &bg, Mode::eval())?;
            let h = tape.value(h).data();
            Ok((0..bg.num_graphs)
                .map(|b| {
                    let seg = bg.segment(b);
                    (
                        group[bg.sources[b]],
                        h[seg.start * hidden..seg.end * hidden].to_vec(),
                    )
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EncodedSubgraphs {
        hidden,
        rows: parts.into_iter().flatten().collect(),
    })
}

/// For every query with ground truth: each relevant chunk is paired with
/// `negatives_per_positive` hard negatives. Queries without a positive or
/// without any negative contribute nothing.
pub fn mine_triplets(
    corpus: &Corpus,
    queries: &[Query],
    index: &FlatIndex,
    cfg: &TrainConfig,
) -> Result<Vec<Triplet>> {
    let per_query = queries
        .par_iter()
        .enumerate()
        .map(|(qi, q)| -> Result<Vec<Triplet>> {
            if !q.has_ground_truth() {
                return Ok(Vec::new());
            }
            let positives = relevant_chunks(corpus, q, cfg.overlap_threshold);
            if positives.is_empty() {
                return Ok(Vec::new());
            }
            let npp = cfg.negatives_per_positive;
            let seed = cfg.seed ^ (qi as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let negatives = match sample_hard_negatives(
                q,
                corpus,
                index,
                positives.len() * npp,
                cfg.overlap_threshold,
                seed,
            ) {
                Ok(n) => n,
                Err(Error::NoNegativesAvailable(_)) => return Ok(Vec::new()),
                Err(e) => return Err(e),
            };
            Ok(positives
                .iter()
                .enumerate()
                .flat_map(|(i, &positive)| {
                    let negatives = &negatives;
                    (0..npp).map(move |j| Triplet {
                        query: qi,
                        positive,
                        negative: negatives[(i * npp + j) % negatives.len()],
                    })
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let triplets: Vec<Triplet> = per_query.into_iter().flatten().collect();
    if triplets.is_empty() {
        return Err(Error::NoTriplets);
    }
    Ok(triplets)
}

struct StackedBatch {
    h: Tensor,
    batch: Vec<usize>,
    queries: Tensor,
}

/// Positive subgraphs form graphs `0..B`, negatives `B..2B`.
fn stack(enc: &EncodedSubgraphs, queries: &[Query], triplets: &[Triplet]) -> Result<StackedBatch> {
    let b = triplets.len();
    let hidden = enc.hidden;
    let mut h = Vec::new();
    let mut batch = Vec::new();
    let mut qrows = Vec::new();
    let members = triplets
        .iter()
        .map(|t| t.positive)
        .chain(triplets.iter().map(|t| t.negative));
    let query_ids = triplets.iter().chain(triplets).map(|t| t.query);
    for (g, (r, qi)) in members.zip(query_ids).enumerate() {
        let rows = enc
            .get(r)
            .ok_or_else(|| Error::InvalidData(format!("no encoded subgraph for {r:?}")))?;
        h.extend_from_slice(rows);
        batch.extend(std::iter::repeat_n(g, rows.len() / hidden));
        qrows.extend_from_slice(queries[qi].embedding()?);
    }
    let dq = qrows.len() / (2 * b);
    Ok(StackedBatch {
        h: Tensor::matrix(batch.len(), hidden, h)?,
        batch,
        queries: Tensor::matrix(2 * b, dq, qrows)?,
    })
}

/// One optimizer step on a triplet batch. Returns the batch loss.
fn step(
    params: &mut ModelParams,
    state: &mut AdamState<f32>,
    enc: &EncodedSubgraphs,
    queries: &[Query],
    triplets: &[Triplet],
    cfg: &TrainConfig,
    drop_seed: u64,
) -> Result<f64> {
    let data = stack(enc, queries, triplets)?;
    let b = triplets.len();
    let trainable: Vec<bool> = params.frozen_mask().iter().map(|f| !f).collect();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |i, _| trainable[i]);
    let mode = Mode::train(drop_seed);
    let h = tape.constant(data.h);
    let q = tape.constant(data.queries);
    let pooled = query_guided_pool(&mut tape, &bound, h, q, &data.batch, 2 * b, mode)?;
    let fused = fuse_and_score(&mut tape, &bound, pooled.g, q, mode)?;
    let pos_ids: Vec<usize> = (0..b).collect();
    let neg_ids: Vec<usize> = (b..2 * b).collect();
    let pos = tape.embedding_lookup(fused.logit, &pos_ids)?;
    let neg = tape.embedding_lookup(fused.logit, &neg_ids)?;
    let loss = triplet_bce_loss(
        &mut tape,
        pos,
        neg,
        cfg.margin,
        cfg.lambda_triplet,
        cfg.lambda_bce,
    )?;
    let value = f64::from(tape.value(loss.total).data()[0]);
    if !value.is_finite() {
        return Err(Error::InvalidData("stage-2 loss diverged".into()));
    }
    tape.backward(loss.total)?;
    let vars = bound.vars().to_vec();
    let grads: Vec<Option<Vec<f32>>> = vars
        .iter()
        .zip(&trainable)
        .map(|(&v, &t)| if t { tape.take_grad(v) } else { None })
        .collect();
    let grad_refs: Vec<Option<&[f32]>> = grads.iter().map(|g| g.as_deref()).collect();
    let mut tensors: Vec<&mut Tensor> = params.tensors_mut().iter_mut().collect();
    cfg.optimizer().step(&mut tensors, &grad_refs, state)?;
    Ok(value)
}

/// Fine-tunes pooling, fusion and head tensors on `triplets` for `epochs`
/// passes of shuffled `cfg.batch_size` batches. The encoder is frozen
/// first, so its tensors come back bit-identical.
pub fn fit_triplets(
    mut params: ModelParams,
    enc: &EncodedSubgraphs,
    queries: &[Query],
    triplets: &[Triplet],
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<(ModelParams, Vec<EpochRecord>)> {
    cfg.validate()?;
    if triplets.is_empty() {
        return Err(Error::NoTriplets);
    }
    params.freeze_encoder();
    let mut state = AdamState::new(params.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0002);
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    let mut log = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for ids in order.chunks(cfg.batch_size) {
            let batch: Vec<Triplet> = ids.iter().map(|&i| triplets[i]).collect();
            total += step(
                &mut params,
                &mut state,
                enc,
                queries,
                &batch,
                cfg,
                rng.next_u64(),
            )?;
            batches += 1;
        }
        log.push(EpochRecord {
            stage: 2,
            epoch,
            loss: total / batches as f64,
            lr: cfg.lr,
        });
    }
    Ok((params, log))
}

/// Eval-mode `(score(positive), score(negative))` per triplet.
pub fn triplet_scores(
    params: &ModelParams,
    enc: &EncodedSubgraphs,
    queries: &[Query],
    triplets: &[Triplet],
) -> Result<Vec<(f32, f32)>> {
    if triplets.is_empty() {
        return Ok(Vec::new());
    }
    let data = stack(enc, queries, triplets)?;
    let b = triplets.len();
    let mut tape = Tape::new();
    let bound = params.bind_constants(&mut tape);
    let mode = Mode::eval();
    let h = tape.constant(data.h);
    let q = tape.constant(data.queries);
    let pooled = query_guided_pool(&mut tape, &bound, h, q, &data.batch, 2 * b, mode)?;
    let fused = fuse_and_score(&mut tape, &bound, pooled.g, q, mode)?;
    let s = tape.value(fused.score).data();
    Ok((0..b).map(|i| (s[i], s[b + i])).collect())
}

#[derive(Debug, Clone)]
pub struct Stage2Output {
    pub params: ModelParams,
    pub log: Vec<EpochRecord>,
    /// Triplets actually trained on.
    pub triplets: Vec<Triplet>,
}

/// Mines hard-negative triplets, encodes the ego-subgraph of every chunk
/// they touch with the frozen encoder and fits the scoring path.
pub fn train_stage2(
    corpus: &Corpus,
    queries: &[Query],
    index: &FlatIndex,
    graphs: &EpisodeGraphs,
    params: ModelParams,
    cfg: &TrainConfig,
) -> Result<Stage2Output> {
    cfg.validate()?;
    let mined = mine_triplets(corpus, queries, index, cfg)?;
    let refs: Vec<ChunkRef> = mined
        .iter()
        .flat_map(|t| [t.positive, t.negative])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let enc = encode_subgraphs(&params, graphs, &refs, cfg.ego_radius)?;
    let triplets: Vec<Triplet> = mined
        .into_iter()
        .filter(|t| enc.contains(t.positive) && enc.contains(t.negative))
        .collect();
    if triplets.is_empty() {
        return Err(Error::NoTriplets);
    }
    let (params, log) = fit_triplets(params, &enc, queries, &triplets, cfg, cfg.stage2_epochs)?;
    Ok(Stage2Output {
        params,
        log,
        triplets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::label_chunk_relevance;
    use crate::gnn::init_params;
    use crate::gnn::test_support::tiny_config;
    use crate::graph::{build_corpus_graphs, GraphCache};
    use crate::synthetic::{generate, EmbeddedSynthetic, SyntheticConfig};

    const DIM: usize = 16;

    fn setup() -> (EmbeddedSynthetic, FlatIndex, EpisodeGraphs) {
        let syn = SyntheticConfig {
            episodes: 8,
            eval_queries: 4,
            train_queries: 10,
            ..SyntheticConfig::default()
        };
        let data = generate(&syn).unwrap().embed(DIM, 0).unwrap();
        let index = FlatIndex::build(&data.corpus).unwrap();
        let graphs = build_corpus_graphs(&data.corpus, 0.6, 5, &GraphCache::new()).unwrap();
        (data, index, graphs)
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            lr: 1e-2,
            batch_size: 16,
            negatives_per_positive: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn mined_triplets_are_labeled_correctly() {
        let (data, index, _) = setup();
        let cfg = cfg();
        let triplets = mine_triplets(&data.corpus, &data.train_queries, &index, &cfg).unwrap();
        let expected: usize = data
            .train_queries
            .iter()
            .map(|q| relevant_chunks(&data.corpus, q, cfg.overlap_threshold).len() * 2)
            .sum();
        assert_eq!(triplets.len(), expected);
        for t in &triplets {
            let q = &data.train_queries[t.query];
            assert!(label_chunk_relevance(
                data.corpus.chunk(t.positive),
                q,
                cfg.overlap_threshold
            ));
            assert!(!label_chunk_relevance(
                data.corpus.chunk(t.negative),
                q,
                cfg.overlap_threshold
            ));
        }
    }

    #[test]
    fn no_ground_truth_means_no_triplets() {
        let (data, index, _) = setup();
        let mut queries = data.train_queries.clone();
        for q in &mut queries {
            q.relevant_segments.clear();
            q.relevant_chunk_ids = None;
        }
        assert!(matches!(
            mine_triplets(&data.corpus, &queries, &index, &cfg()),
            Err(Error::NoTriplets)
        ));
    }

    #[test]
    fn training_keeps_encoder_and_separates_triplets() {
        let (data, index, graphs) = setup();
        let cfg = TrainConfig {
            stage2_epochs: 60,
            ..cfg()
        };
        let params = init_params(&tiny_config(DIM), 3).unwrap();
        let before = params.clone();
        let out = train_stage2(
            &data.corpus,
            &data.train_queries,
            &index,
            &graphs,
            params,
            &cfg,
        )
        .unwrap();
        assert_eq!(out.log.len(), 60);
        assert!(out.log.iter().all(|r| r.loss.is_finite() && r.stage == 2));
        assert!(out.log.last().unwrap().loss < out.log[0].loss);
        for ((name, a), b) in before.iter().zip(out.params.tensors()) {
            if crate::gnn::is_encoder_tensor(name) {
                assert_eq!(a.data(), b.data(), "{name} changed");
            }
        }
        assert!(out
            .params
            .iter()
            .any(|(name, t)| !crate::gnn::is_encoder_tensor(name)
                && t.data() != before.get(name).unwrap().data()));

        let refs: Vec<ChunkRef> = out
            .triplets
            .iter()
            .flat_map(|t| [t.positive, t.negative])
            .collect();
        let enc = encode_subgraphs(&out.params, &graphs, &refs, cfg.ego_radius).unwrap();
        let scores = triplet_scores(&out.params, &enc, &data.train_queries, &out.triplets).unwrap();
        let ordered = scores.iter().filter(|(p, n)| p > n).count();
        assert!(
            ordered * 10 >= scores.len() * 9,
            "{ordered} of {}",
            scores.len()
        );
    }

    #[test]
    fn stage2_is_deterministic() {
        let (data, index, graphs) = setup();
        let cfg = TrainConfig {
            stage2_epochs: 2,
            ..cfg()
        };
        let run = || {
            let params = init_params(&tiny_config(DIM), 5).unwrap();
            train_stage2(
                &data.corpus,
                &data.train_queries,
                &index,
                &graphs,
                params,
                &cfg,
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.log, b.log);
        for (x, y) in a.params.tensors().iter().zip(b.params.tensors()) {
            assert_eq!(x.data(), y.data());
        }
    }
}
