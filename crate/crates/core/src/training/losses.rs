use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::BatchedGraph;

/// Link-prediction pairs of a batched graph: every edge as a positive and,
/// per graph, as many uniformly drawn non-edges (with replacement) as it has
/// edges. A graph whose nodes are all mutually linked contributes positives
/// only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkSamples {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    /// Number of leading pairs that are true edges.
    pub positives: usize,
    /// Graphs that had no non-edge to sample.
    pub degenerate: Vec<usize>,
}

pub fn sample_link_pairs(bg: &BatchedGraph, neg_seed: u64) -> LinkSamples {
    let mut out = LinkSamples {
        src: bg.edge_src.clone(),
        dst: bg.edge_dst.clone(),
        positives: bg.num_edges(),
        degenerate: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(neg_seed);
    let edges: HashSet<(usize, usize)> = bg
        .edge_src
        .iter()
        .copied()
        .zip(bg.edge_dst.iter().copied())
        .collect();
    let mut per_graph = vec![0usize; bg.num_graphs];
    for &s in &bg.edge_src {
        per_graph[bg.batch[s]] += 1;
    }
    for (b, &count) in per_graph.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let range = bg.segment(b);
        let non_edges: Vec<(usize, usize)> = range
            .clone()
            .flat_map(|i| range.clone().map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && !edges.contains(&(i, j)))
            .collect();
        if non_edges.is_empty() {
            out.degenerate.push(b);
            continue;
        }
        for _ in 0..count {
            let (i, j) = non_edges[rng.gen_range(0..non_edges.len())];
            out.src.push(i);
            out.dst.push(j);
        }
    }
    out
}

/// Mean binary cross-entropy of inner-product link logits against labels 1
/// (edges) and 0 (sampled non-edges). The logit is `h_i . h_j / d` for
/// embedding width `d`: layer-normed rows have squared norm close to `d`, so
/// the unscaled product saturates the sigmoid at initialization.
pub fn reconstruction_loss<T: Real>(
    tape: &mut Tape<T>,
    h: Var,
    bg: &BatchedGraph,
    neg_seed: u64,
) -> Result<Var> {
    let (n, _) = tape.value(h).dims2()?;
    if n != bg.num_nodes() {
        return Err(Error::ShapeMismatch(format!(
            "{n} embedding rows for {} nodes",
            bg.num_nodes()
        )));
    }
    let pairs = sample_link_pairs(bg, neg_seed);
    if pairs.src.is_empty() {
        return Err(Error::InvalidData(
            "graph batch has no edges to reconstruct".into(),
        ));
    }
    link_bce(tape, h, &pairs)
}

pub(crate) fn link_bce<T: Real>(tape: &mut Tape<T>, h: Var, pairs: &LinkSamples) -> Result<Var> {
    let hs = tape.embedding_lookup(h, &pairs.src)?;
    let hd = tape.embedding_lookup(h, &pairs.dst)?;
    let prod = tape.mul(hs, hd)?;
    let logits = tape.row_sum(prod)?;
    let (_, d) = tape.value(h).dims2()?;
    let logits = tape.scale(logits, 1.0 / d as f64);
    // BCE with logits: softplus(-x) for label 1, softplus(x) for label 0
    let m = pairs.src.len();
    let signs = (0..m)
        .map(|i| {
            if i < pairs.positives {
                -T::one()
            } else {
                T::one()
            }
        })
        .collect();
    let signs = tape.constant(Tensor::matrix(m, 1, signs)?);
    let signed = tape.mul(logits, signs)?;
    let losses = tape.softplus(signed);
    tape.mean(losses)
}

/// Per-batch means of the loss and its two parts.
#[derive(Debug, Clone, Copy)]
pub struct TripletLoss {
    pub total: Var,
    pub hinge: Var,
    pub bce: Var,
}

/// `lambda_t * max(0, margin - (s_pos - s_neg)) + lambda_b * (BCE(s_pos, 1) +
/// BCE(s_neg, 0)) / 2`, averaged over rows. Takes pre-sigmoid logits
/// `[B x 1]` so the cross-entropy terms stay finite for saturated scores.
pub fn triplet_bce_loss<T: Real>(
    tape: &mut Tape<T>,
    pos_logit: Var,
    neg_logit: Var,
    margin: f64,
    lambda_t: f64,
    lambda_b: f64,
) -> Result<TripletLoss> {
    let s_pos = tape.sigmoid(pos_logit);
    let s_neg = tape.sigmoid(neg_logit);
    let gap = tape.sub(s_pos, s_neg)?;
    let slack = tape.scale(gap, -1.0);
    let slack = tape.add_scalar(slack, margin);
    let hinge = tape.relu(slack);
    let hinge = tape.mean(hinge)?;

    let neg_pos = tape.scale(pos_logit, -1.0);
    let bce_pos = tape.softplus(neg_pos);
    let bce_neg = tape.softplus(neg_logit);
    let bce = tape.add(bce_pos, bce_neg)?;
    let bce = tape.mean(bce)?;
    let bce = tape.scale(bce, 0.5);

    let t = tape.scale(hinge, lambda_t);
    let b = tape.scale(bce, lambda_b);
    let total = tape.add(t, b)?;
    Ok(TripletLoss { total, hinge, bce })
}

/// Scalar form of [`triplet_bce_loss`] on scores in (0, 1).
pub fn triplet_bce_value(
    s_pos: f64,
    s_neg: f64,
    margin: f64,
    lambda_t: f64,
    lambda_b: f64,
) -> (f64, f64, f64) {
    let hinge = (margin - (s_pos - s_neg)).max(0.0);
    let bce = (-s_pos.ln() - (1.0 - s_neg).ln()) / 2.0;
    (lambda_t * hinge + lambda_b * bce, hinge, bce)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::test_support::{edge, node};
    use crate::graph::{to_batched_graph, EdgeKind, EpisodeGraph};

    fn ring(n: usize) -> EpisodeGraph {
        let nodes = (0..n).map(|i| node(i, vec![1.0, i as f32])).collect();
        let edges = (0..n)
            .map(|i| edge(i, (i + 1) % n, EdgeKind::Sequential, 1.0))
            .collect();
        EpisodeGraph::from_parts("r", nodes, edges).unwrap()
    }

    #[test]
    fn zero_embeddings_give_ln2() {
        let g = ring(10);
        let bg = to_batched_graph(&[&g]).unwrap();
        let mut tape = Tape::<f64>::new();
        let h = tape.param(Tensor::zeros(&[10, 4]));
        let l = reconstruction_loss(&mut tape, h, &bg, 3).unwrap();
        assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn separating_embeddings_drive_loss_to_zero() {
        // edges 0-1 and 2-3 share a direction, cross pairs are opposed
        let pairs = LinkSamples {
            src: vec![0, 2, 0, 1],
            dst: vec![1, 3, 2, 3],
            positives: 2,
            degenerate: vec![],
        };
        let mut last = f64::INFINITY;
        for scale in [1.0, 3.0, 10.0] {
            let rows = [scale, scale, -scale, -scale];
            let mut tape = Tape::<f64>::new();
            let h = tape.param(Tensor::matrix(4, 1, rows.to_vec()).unwrap());
            let l = link_bce(&mut tape, h, &pairs).unwrap();
            let v = tape.value(l).data()[0];
            assert!(v < last);
            last = v;
        }
        assert!(last < 1e-40);
    }

    #[test]
    fn random_init_loss_is_finite_positive() {
        use crate::gnn::{encode, init_params, Mode, ModelConfig};
        let g = ring(10);
        let bg = to_batched_graph(&[&g]).unwrap();
        let params = init_params(&ModelConfig::new(2, 2), 0).unwrap();
        let mut tape = Tape::new();
        let p = params.bind_constants(&mut tape);
        let h = encode(&mut tape, &p, &bg, Mode::eval()).unwrap();
        let l = reconstruction_loss(&mut tape, h, &bg, 1).unwrap();
        let v = tape.value(l).data()[0];
        eprintln!("init reconstruction loss {v}");
        assert!(v.is_finite() && v > 0.0 && v < 10.0, "{v}");
    }

    #[test]
    fn negatives_are_non_edges_in_segment() {
        let a = ring(5);
        let b = ring(4);
        let bg = to_batched_graph(&[&a, &b]).unwrap();
        let s = sample_link_pairs(&bg, 7);
        assert_eq!(s.positives, 9);
        assert_eq!(s.src.len(), 18);
        let edges: HashSet<_> = bg
            .edge_src
            .iter()
            .zip(&bg.edge_dst)
            .map(|(&x, &y)| (x, y))
            .collect();
        for k in s.positives..s.src.len() {
            let (i, j) = (s.src[k], s.dst[k]);
            assert_ne!(i, j);
            assert!(!edges.contains(&(i, j)));
            assert_eq!(bg.batch[i], bg.batch[j]);
        }
        assert_eq!(s, sample_link_pairs(&bg, 7));
    }

    #[test]
    fn complete_graph_is_degenerate() {
        let nodes = (0..3).map(|i| node(i, vec![1.0])).collect();
        let edges = (0..3)
            .flat_map(|i| {
                (0..3)
                    .filter(move |&j| j != i)
                    .map(move |j| edge(i, j, EdgeKind::Semantic, 0.9))
            })
            .collect();
        let g = EpisodeGraph::from_parts("k", nodes, edges).unwrap();
        let bg = to_batched_graph(&[&g]).unwrap();
        let s = sample_link_pairs(&bg, 0);
        assert_eq!(s.degenerate, vec![0]);
        assert_eq!(s.src.len(), s.positives);
    }

    #[test]
    fn triplet_value_examples() {
        let (_, hinge, _) = triplet_bce_value(0.4, 0.4, 0.1, 1.0, 1.0);
        assert!((hinge - 0.1).abs() < 1e-12);
        let (_, hinge, bce) = triplet_bce_value(0.6, 0.5, 0.1, 1.0, 1.0);
        assert!(hinge.abs() < 1e-12);
        assert!((bce - (-(0.6f64).ln() - (0.5f64).ln()) / 2.0).abs() < 1e-12);
        let eps = 1e-9;
        let (total, hinge, _) = triplet_bce_value(1.0 - eps, eps, 0.1, 1.0, 1.0);
        assert_eq!(hinge, 0.0);
        assert!(total < 1e-8);
    }

    #[test]
    fn tape_loss_matches_scalar_form() {
        let logit = |s: f64| (s / (1.0 - s)).ln();
        let cases = [(0.6, 0.5), (0.3, 0.7), (0.9, 0.1), (0.45, 0.44)];
        let mut tape = Tape::<f64>::new();
        let pos =
            tape.param(Tensor::matrix(4, 1, cases.iter().map(|c| logit(c.0)).collect()).unwrap());
        let neg =
            tape.param(Tensor::matrix(4, 1, cases.iter().map(|c| logit(c.1)).collect()).unwrap());
        let l = triplet_bce_loss(&mut tape, pos, neg, 0.1, 1.0, 1.0).unwrap();
        let want: f64 = cases
            .iter()
            .map(|c| triplet_bce_value(c.0, c.1, 0.1, 1.0, 1.0).0)
            .sum::<f64>()
            / 4.0;
        assert!((tape.value(l.total).data()[0] - want).abs() < 1e-9);
        assert!(tape.value(l.total).data()[0] >= 0.0);
    }
}
