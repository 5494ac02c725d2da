use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdamState, Tape, Tensor};
use crate::error::{Error, Result};
use crate::gnn::{encode, is_encoder_tensor, Mode, ModelParams};
use crate::graph::{to_batched_graph, EpisodeGraph, EpisodeGraphs};

use super::losses::reconstruction_loss;
use super::{EpochRecord, TrainConfig};

#[derive(Debug, Clone)]
pub struct Stage1Output {
    /// Trained parameters with the encoder marked frozen.
    pub params: ModelParams,
    pub log: Vec<EpochRecord>,
}

/// Shuffles graphs that have edges and packs them greedily into batches of
/// at most `max_nodes` nodes (a larger graph gets a batch of its own).
pub fn stage1_batches(
    graphs: &EpisodeGraphs,
    max_nodes: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..graphs.len())
        .filter(|&i| graphs.get(i).edge_count() > 0)
        .collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut nodes = 0;
    for i in order {
        let n = graphs.get(i).node_count();
        if !current.is_empty() && nodes + n > max_nodes {
            batches.push(std::mem::take(&mut current));
            nodes = 0;
        }
        current.push(i);
        nodes += n;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

/// Optimizes the encoder tensors on link reconstruction for
/// `cfg.stage1_epochs` epochs. All other tensors are left untouched.
pub fn train_stage1(
    graphs: &EpisodeGraphs,
    mut params: ModelParams,
    cfg: &TrainConfig,
) -> Result<Stage1Output> {
    cfg.validate()?;
    let opt = cfg.optimizer();
    let trainable: Vec<bool> = params
        .names()
        .iter()
        .map(|n| is_encoder_tensor(n))
        .collect();
    let mut state = AdamState::new(params.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.stage1_epochs);
    for epoch in 0..cfg.stage1_epochs {
        let batches = stage1_batches(graphs, cfg.batch_size, &mut rng);
        if batches.is_empty() {
            return Err(Error::InvalidData("no episode graph has edges".into()));
        }
        let mut total = 0.0;
        for batch in &batches {
            let (neg_seed, drop_seed) = (rng.next_u64(), rng.next_u64());
            let members: Vec<&EpisodeGraph> = batch.iter().map(|&i| graphs.get(i)).collect();
            let bg = to_batched_graph(&members)?;
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, |i, _| trainable[i]);
            let h = encode(&mut tape, &bound, &bg, Mode::train(drop_seed))?;
            let loss = reconstruction_loss(&mut tape, h, &bg, neg_seed)?;
            let value = f64::from(tape.value(loss).data()[0]);
            if !value.is_finite() {
                return Err(Error::InvalidData(format!(
                    "stage-1 loss diverged in epoch {epoch}"
                )));
            }
            total += value;
            tape.backward(loss)?;
            let vars = bound.vars().to_vec();
            let grads: Vec<Option<Vec<f32>>> = vars
                .iter()
                .zip(&trainable)
                .map(|(&v, &t)| if t { tape.take_grad(v) } else { None })
                .collect();
            let grad_refs: Vec<Option<&[f32]>> = grads.iter().map(|g| g.as_deref()).collect();
            let mut tensors: Vec<&mut Tensor> = params.tensors_mut().iter_mut().collect();
            opt.step(&mut tensors, &grad_refs, &mut state)?;
        }
        log.push(EpochRecord {
            stage: 1,
            epoch,
            loss: total / batches.len() as f64,
            lr: cfg.lr,
        });
    }
    params.freeze_encoder();
    Ok(Stage1Output { params, log })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::Rng;

    use super::*;
    use crate::gnn::test_support::tiny_config;
    use crate::gnn::{init_params, ModelConfig};
    use crate::graph::test_support::{edge, node};
    use crate::graph::EdgeKind;

    fn random_graphs(count: usize, seed: u64) -> EpisodeGraphs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graphs = (0..count)
            .map(|g| {
                let n = rng.gen_range(4..10);
                let nodes = (0..n)
                    .map(|i| node(i, (0..4).map(|_| rng.gen_range(-1.0f32..1.0)).collect()))
                    .collect();
                let mut edges: Vec<_> = (0..n - 1)
                    .flat_map(|i| {
                        [
                            edge(i, i + 1, EdgeKind::Sequential, 1.0),
                            edge(i + 1, i, EdgeKind::Sequential, 1.0),
                        ]
                    })
                    .collect();
                edges.push(edge(0, n - 1, EdgeKind::Semantic, 0.8));
                Arc::new(EpisodeGraph::from_parts(format!("g{g:02}"), nodes, edges).unwrap())
            })
            .collect();
        EpisodeGraphs::new(graphs)
    }

    #[test]
    fn batches_respect_node_budget() {
        let graphs = random_graphs(20, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = stage1_batches(&graphs, 20, &mut rng);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..20).collect::<Vec<_>>());
        for b in &batches {
            let nodes: usize = b.iter().map(|&i| graphs.get(i).node_count()).sum();
            assert!(nodes <= 20 || b.len() == 1);
        }
    }

    #[test]
    fn trains_encoder_only_and_reduces_loss() {
        let graphs = random_graphs(12, 2);
        let params = init_params(&tiny_config(4), 3).unwrap();
        let cfg = TrainConfig {
            stage1_epochs: 8,
            batch_size: 32,
            lr: 1e-2,
            ..TrainConfig::default()
        };
        let out = train_stage1(&graphs, params.clone(), &cfg).unwrap();
        assert_eq!(out.log.len(), 8);
        assert!(out.log.iter().all(|r| r.loss.is_finite() && r.stage == 1));
        assert!(
            out.log.last().unwrap().loss < out.log[0].loss,
            "{:?}",
            out.log
        );
        for ((name, before), (after, &frozen)) in params
            .iter()
            .zip(out.params.tensors().iter().zip(out.params.frozen_mask()))
        {
            assert_eq!(frozen, is_encoder_tensor(name));
            if !frozen {
                assert_eq!(before, after, "{name} moved");
            }
        }
        assert_ne!(params.get("gat.0.w"), out.params.get("gat.0.w"));

        let again = train_stage1(&graphs, params, &cfg).unwrap();
        assert_eq!(again.log, out.log);
        assert_eq!(again.params, out.params);
    }

    #[test]
    fn edgeless_corpus_is_rejected() {
        let g = EpisodeGraph::from_parts("x", vec![node(0, vec![1.0, 0.0])], vec![]).unwrap();
        let graphs = EpisodeGraphs::new(vec![Arc::new(g)]);
        let params = init_params(&ModelConfig::new(2, 2), 0).unwrap();
        assert!(train_stage1(&graphs, params, &TrainConfig::default()).is_err());
    }
}
