use std::collections::{BTreeSet, VecDeque};

use crate::embed::cosine_similarity;
use crate::error::{Error, Result};

use super::EpisodeGraph;

/// Induced subgraph on every node within `radius` undirected hops of
/// `center`. Both edge kinds count as hops.
pub fn extract_ego_subgraph(
    g: &EpisodeGraph,
    center: usize,
    radius: usize,
) -> Result<EpisodeGraph> {
    if center >= g.node_count() {
        return Err(Error::UnknownNode(center.to_string()));
    }
    let mut dist = vec![usize::MAX; g.node_count()];
    dist[center] = 0;
    let mut queue = VecDeque::from([center]);
    let mut keep = vec![center];
    while let Some(v) = queue.pop_front() {
        if dist[v] == radius {
            continue;
        }
        for u in g.undirected_neighbors(v) {
            if dist[u] == usize::MAX {
                dist[u] = dist[v] + 1;
                keep.push(u);
                queue.push_back(u);
            }
        }
    }
    g.induced(&keep)
}

/// Query-guided breadth-first expansion from `seeds`.
///
/// Runs `max_depth` levels. Each unvisited frontier node is expanded over
/// its successors; a successor joins the kept set and the next frontier only
/// when its cosine similarity to `query_emb` strictly exceeds
/// `sim_threshold`. Seeds are always kept.
pub fn query_aware_subgraph(
    g: &EpisodeGraph,
    query_emb: &[f32],
    seeds: &[usize],
    max_depth: usize,
    sim_threshold: f32,
) -> Result<EpisodeGraph> {
    if seeds.is_empty() {
        return Err(Error::InvalidData(
            "query-aware subgraph needs at least one seed".into(),
        ));
    }
    if let Some(&bad) = seeds.iter().find(|&&s| s >= g.node_count()) {
        return Err(Error::UnknownNode(bad.to_string()));
    }
    if let Some(node) = g.nodes().first() {
        if node.embedding.len() != query_emb.len() {
            return Err(Error::DimensionMismatch {
                expected: node.embedding.len(),
                got: query_emb.len(),
            });
        }
    }

    let mut kept: BTreeSet<usize> = seeds.iter().copied().collect();
    let mut visited = vec![false; g.node_count()];
    let mut frontier: BTreeSet<usize> = kept.clone();
    for _ in 0..max_depth {
        let mut next = BTreeSet::new();
        for &v in &frontier {
            if visited[v] {
                continue;
            }
            visited[v] = true;
            for u in g.successors(v) {
                let sim = cosine_similarity(query_emb, &g.nodes()[u].embedding)?;
                if sim > sim_threshold {
                    kept.insert(u);
                    next.insert(u);
                }
            }
        }
        frontier = next;
    }
    g.induced(&kept.into_iter().collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::EdgeKind;
    use super::*;
    use proptest::prelude::*;

    fn chunk_ids(g: &EpisodeGraph) -> Vec<&str> {
        g.nodes().iter().map(|n| n.chunk_id.as_str()).collect()
    }

    #[test]
    fn ego_radius_zero_is_single_node() {
        let g = path(3, 3);
        let s = extract_ego_subgraph(&g, 1, 0).unwrap();
        assert_eq!(s.node_count(), 1);
        assert_eq!(s.edge_count(), 0);
    }

    #[test]
    fn ego_middle_of_path() {
        let g = path(3, 3);
        assert_eq!(extract_ego_subgraph(&g, 1, 1).unwrap(), g);
        let s = extract_ego_subgraph(&g, 0, 1).unwrap();
        assert_eq!(chunk_ids(&s), vec!["c0", "c1"]);
        assert!(matches!(
            extract_ego_subgraph(&g, 9, 1),
            Err(Error::UnknownNode(_))
        ));
    }

    #[test]
    fn ego_counts_incoming_semantic_hops() {
        // 0 -> 3 semantic only; from 3 the undirected hop reaches 0
        let nodes = (0..4).map(|i| node(i, vec![1.0])).collect();
        let g = EpisodeGraph::from_parts("e", nodes, vec![edge(0, 3, EdgeKind::Semantic, 0.9)])
            .unwrap();
        let s = extract_ego_subgraph(&g, 3, 1).unwrap();
        assert_eq!(chunk_ids(&s), vec!["c0", "c3"]);
    }

    /// Brute-force oracle: all-pairs undirected distances by repeated
    /// relaxation.
    fn bfs_oracle(g: &EpisodeGraph, center: usize, radius: usize) -> Vec<usize> {
        let n = g.node_count();
        let mut d = vec![usize::MAX; n];
        d[center] = 0;
        for _ in 0..n {
            for e in g.edges() {
                for (a, b) in [(e.src, e.dst), (e.dst, e.src)] {
                    if d[a] != usize::MAX && d[a] + 1 < d[b] {
                        d[b] = d[a] + 1;
                    }
                }
            }
        }
        (0..n).filter(|&i| d[i] <= radius).collect()
    }

    proptest! {
        #[test]
        fn ego_matches_oracle(
            n in 1usize..10,
            extra in prop::collection::vec((0usize..10, 0usize..10), 0..10),
            center in 0usize..10,
            radius in 0usize..5,
        ) {
            let center = center % n;
            let nodes = (0..n).map(|i| node(i, vec![1.0])).collect();
            let edges = extra
                .into_iter()
                .map(|(a, b)| (a % n, b % n))
                .filter(|(a, b)| a != b)
                .map(|(a, b)| edge(a, b, EdgeKind::Semantic, 0.7))
                .collect();
            let g = EpisodeGraph::from_parts("e", nodes, edges).unwrap();
            let sub = extract_ego_subgraph(&g, center, radius).unwrap();
            let expected = g.induced(&bfs_oracle(&g, center, radius)).unwrap();
            prop_assert_eq!(&sub, &expected);
            let full = extract_ego_subgraph(&g, center, n).unwrap();
            prop_assert_eq!(full, g.induced(&bfs_oracle(&g, center, n)).unwrap());
        }
    }

    fn star() -> EpisodeGraph {
        // center 0, leaves 1..=4; leaves 1 and 2 align with the query
        let embs = [
            vec![0.0, 0.0, 1.0],
            vec![1.0, 0.0, 0.0],
            vec![1.0, 0.1, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![-1.0, 0.2, 0.0],
        ];
        let nodes = embs
            .iter()
            .enumerate()
            .map(|(i, e)| node(i, e.clone()))
            .collect();
        let mut edges = Vec::new();
        for leaf in 1..5 {
            edges.push(edge(0, leaf, EdgeKind::Semantic, 0.7));
            edges.push(edge(leaf, 0, EdgeKind::Semantic, 0.7));
        }
        EpisodeGraph::from_parts("e", nodes, edges).unwrap()
    }

    #[test]
    fn query_subgraph_examples() {
        let g = star();
        let q = [1.0, 0.0, 0.0];
        let s = query_aware_subgraph(&g, &q, &[0], 2, 0.5).unwrap();
        assert_eq!(chunk_ids(&s), vec!["c0", "c1", "c2"]);

        let s = query_aware_subgraph(&g, &q, &[0], 3, 1.0).unwrap();
        assert_eq!(chunk_ids(&s), vec!["c0"]);

        let s = query_aware_subgraph(&g, &q, &[0], 3, -1.0).unwrap();
        assert_eq!(s, g);

        let chain = path(5, 5);
        let s = query_aware_subgraph(&chain, &[1.0, 1.0, 1.0, 1.0, 1.0], &[2], 5, -1.0).unwrap();
        assert_eq!(s, chain);
    }

    #[test]
    fn query_subgraph_errors() {
        let g = star();
        assert!(matches!(
            query_aware_subgraph(&g, &[1.0, 0.0], &[0], 2, 0.5),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            query_aware_subgraph(&g, &[1.0, 0.0, 0.0], &[7], 2, 0.5),
            Err(Error::UnknownNode(_))
        ));
        assert!(query_aware_subgraph(&g, &[1.0, 0.0, 0.0], &[], 2, 0.5).is_err());
    }

    proptest! {
        #[test]
        fn query_subgraph_shrinks_with_threshold(
            embs in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 3), 2..9),
            q in prop::collection::vec(-1.0f32..1.0, 3),
            t1 in -1.0f32..1.0, t2 in -1.0f32..1.0,
        ) {
            prop_assume!(q.iter().map(|x| x * x).sum::<f32>() > 1e-3);
            prop_assume!(embs.iter().all(|e| e.iter().map(|x| x * x).sum::<f32>() > 1e-3));
            let n = embs.len();
            let nodes = embs.into_iter().enumerate().map(|(i, e)| node(i, e)).collect();
            let mut edges = Vec::new();
            for i in 1..n {
                edges.push(edge(i - 1, i, EdgeKind::Sequential, 1.0));
                edges.push(edge(i, i - 1, EdgeKind::Sequential, 1.0));
            }
            let g = EpisodeGraph::from_parts("e", nodes, edges).unwrap();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = query_aware_subgraph(&g, &q, &[0], 3, lo).unwrap();
            let b = query_aware_subgraph(&g, &q, &[0], 3, hi).unwrap();
            let a_ids: BTreeSet<_> = a.nodes().iter().map(|n| n.chunk_id.clone()).collect();
            for n in b.nodes() {
                prop_assert!(a_ids.contains(&n.chunk_id));
            }
        }
    }
}
