use std::ops::Range;

use crate::error::{Error, Result};

use super::EpisodeGraph;

/// Several subgraphs flattened into one disjoint graph.
///
/// Node rows of graph `b` occupy a contiguous range; `batch[i]` names the
/// graph of node `i` and is non-decreasing. `sources[b]` is the position of
/// graph `b` in the list passed to [`to_batched_graph`].
#[derive(Debug, Clone, PartialEq)]
pub struct BatchedGraph {
    pub node_features: Vec<f32>,
    pub feature_dim: usize,
    pub edge_src: Vec<usize>,
    pub edge_dst: Vec<usize>,
    pub edge_weight: Vec<f32>,
    pub edge_type_id: Vec<usize>,
    pub batch: Vec<usize>,
    pub num_graphs: usize,
    pub sources: Vec<usize>,
}

impl BatchedGraph {
    pub fn num_nodes(&self) -> usize {
        self.batch.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edge_src.len()
    }

    /// Node index range of graph `b`.
    pub fn segment(&self, b: usize) -> Range<usize> {
        let start = self.batch.partition_point(|&x| x < b);
        let end = self.batch.partition_point(|&x| x <= b);
        start..end
    }

    pub fn node_row(&self, i: usize) -> &[f32] {
        &self.node_features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }
}

/// Concatenates subgraphs with node-index offsets.
///
/// Graphs without edges are skipped; if every input is skipped the call fails
/// with [`Error::AllGraphsIsolated`].
pub fn to_batched_graph(subgraphs: &[&EpisodeGraph]) -> Result<BatchedGraph> {
    if subgraphs.is_empty() {
        return Err(Error::InvalidData("no subgraphs to batch".into()));
    }
    let mut feature_dim = None;
    let mut out = BatchedGraph {
        node_features: Vec::new(),
        feature_dim: 0,
        edge_src: Vec::new(),
        edge_dst: Vec::new(),
        edge_weight: Vec::new(),
        edge_type_id: Vec::new(),
        batch: Vec::new(),
        num_graphs: 0,
        sources: Vec::new(),
    };
    for (pos, g) in subgraphs.iter().enumerate() {
        if g.edge_count() == 0 {
            continue;
        }
        let offset = out.batch.len();
        let b = out.num_graphs;
        for node in g.nodes() {
            let d = *feature_dim.get_or_insert(node.embedding.len());
            if node.embedding.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: node.embedding.len(),
                });
            }
            out.node_features.extend_from_slice(&node.embedding);
            out.batch.push(b);
        }
        for e in g.edges() {
            out.edge_src.push(e.src + offset);
            out.edge_dst.push(e.dst + offset);
            out.edge_weight.push(e.weight);
            out.edge_type_id.push(e.kind.type_id());
        }
        out.sources.push(pos);
        out.num_graphs += 1;
    }
    if out.num_graphs == 0 {
        return Err(Error::AllGraphsIsolated);
    }
    out.feature_dim = feature_dim.unwrap_or(0);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::{Edge, EdgeKind};
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn isolated_only_is_rejected() {
        let g = path(1, 2);
        assert!(matches!(
            to_batched_graph(&[&g]),
            Err(Error::AllGraphsIsolated)
        ));
    }

    #[test]
    fn single_graph() {
        let g = path(3, 3);
        let bg = to_batched_graph(&[&g]).unwrap();
        assert_eq!(bg.num_nodes(), 3);
        assert_eq!(bg.num_edges(), 4);
        assert_eq!(bg.batch, vec![0, 0, 0]);
        assert_eq!(bg.feature_dim, 3);
    }

    #[test]
    fn two_graphs_offset_and_skip() {
        let a = path(3, 2);
        let lonely = path(1, 2);
        let b = path(2, 2);
        let bg = to_batched_graph(&[&a, &lonely, &b]).unwrap();
        assert_eq!(bg.batch, vec![0, 0, 0, 1, 1]);
        assert_eq!(bg.sources, vec![0, 2]);
        for m in 4..bg.num_edges() {
            assert!(bg.edge_src[m] >= 3 && bg.edge_dst[m] >= 3);
            assert_eq!(bg.batch[bg.edge_src[m]], 1);
        }
        assert_eq!(bg.segment(1), 3..5);
    }

    proptest! {
        #[test]
        fn split_recovers_inputs(sizes in prop::collection::vec(1usize..6, 1..5)) {
            let graphs: Vec<_> = sizes.iter().map(|&n| path(n, 3)).collect();
            let refs: Vec<_> = graphs.iter().collect();
            let kept: Vec<_> = graphs.iter().enumerate().filter(|(_, g)| g.edge_count() > 0).collect();
            prop_assume!(!kept.is_empty());
            let bg = to_batched_graph(&refs).unwrap();
            prop_assert_eq!(bg.num_graphs, kept.len());
            for (b, (pos, g)) in kept.into_iter().enumerate() {
                prop_assert_eq!(bg.sources[b], pos);
                let seg = bg.segment(b);
                prop_assert_eq!(seg.len(), g.node_count());
                for (k, i) in seg.clone().enumerate() {
                    prop_assert_eq!(bg.node_row(i), g.nodes()[k].embedding.as_slice());
                }
                let mut edges: Vec<Edge> = (0..bg.num_edges())
                    .filter(|&m| bg.batch[bg.edge_src[m]] == b)
                    .map(|m| {
                        prop_assert_eq!(bg.batch[bg.edge_dst[m]], b);
                        Ok(Edge {
                            src: bg.edge_src[m] - seg.start,
                            dst: bg.edge_dst[m] - seg.start,
                            kind: if bg.edge_type_id[m] == 0 { EdgeKind::Sequential } else { EdgeKind::Semantic },
                            weight: bg.edge_weight[m],
                        })
                    })
                    .collect::<Result<_, TestCaseError>>()?;
                let mut expected = g.edges().to_vec();
                edges.sort_by_key(|e| (e.src, e.dst));
                expected.sort_by_key(|e| (e.src, e.dst));
                prop_assert_eq!(edges, expected);
            }
        }
    }
}
