//! Recall@k with per-complexity and per-query-type breakdowns.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{label_chunk_relevance, Chunk, ChunkRef, Corpus, Query};
use crate::error::{Error, Result};

/// Both recall variants for one query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    /// 1.0 when any top-k chunk is relevant.
    pub hit: f64,
    /// Fraction of ground-truth items touched by the top k: segments when the
    /// query has any, explicit chunk ids otherwise.
    pub coverage: f64,
}

fn overlaps(chunk: &Chunk, episode_id: &str, start: f64, end: f64, threshold: f64) -> bool {
    let duration = chunk.duration();
    chunk.episode_id == episode_id
        && duration > 0.0
        && (end.min(chunk.end_time) - start.max(chunk.start_time)).max(0.0) / duration >= threshold
}

/// Recall of the first `k` entries of a ranked chunk list.
pub fn recall_at_k(
    results: &[&Chunk],
    query: &Query,
    k: usize,
    overlap_threshold: f64,
) -> Result<Recall> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if !query.has_ground_truth() {
        return Err(Error::NoGroundTruth(query.query_id.clone()));
    }
    let top = &results[..results.len().min(k)];
    let hit = top
        .iter()
        .any(|c| label_chunk_relevance(c, query, overlap_threshold));
    let coverage = if query.relevant_segments.is_empty() {
        let ids = query.relevant_chunk_ids.as_deref().unwrap_or_default();
        let found = ids
            .iter()
            .filter(|id| top.iter().any(|c| &c.chunk_id == *id))
            .count();
        found as f64 / ids.len() as f64
    } else {
        let segs = &query.relevant_segments;
        let covered = segs
            .iter()
            .filter(|s| {
                top.iter()
                    .any(|c| overlaps(c, &s.episode_id, s.start, s.end, overlap_threshold))
            })
            .count();
        covered as f64 / segs.len() as f64
    };
    Ok(Recall {
        hit: if hit { 1.0 } else { 0.0 },
        coverage,
    })
}

/// Mean recall over a group of queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub queries: usize,
    pub recall: f64,
    pub coverage: f64,
    /// `(recall - baseline) / baseline` for the same group; absent when the
    /// baseline recall of the group is 0.
    pub relative_improvement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub name: String,
    pub overall: GroupStats,
    pub by_complexity: BTreeMap<u8, GroupStats>,
    pub by_query_type: BTreeMap<String, GroupStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub overlap_threshold: f64,
    /// The first method, against which improvements are measured.
    pub baseline: String,
    pub methods: Vec<MethodReport>,
}

/// A named ranking function: query to ranked chunk refs.
pub type Method<'a> = (
    String,
    Box<dyn Fn(&Query) -> Result<Vec<ChunkRef>> + Sync + 'a>,
);

fn stats(rows: &[(Recall, &Query)]) -> GroupStats {
    let n = rows.len();
    GroupStats {
        queries: n,
        recall: rows.iter().map(|r| r.0.hit).sum::<f64>() / n as f64,
        coverage: rows.iter().map(|r| r.0.coverage).sum::<f64>() / n as f64,
        relative_improvement: None,
    }
}

fn relative(method: f64, baseline: f64) -> Option<f64> {
    (baseline > 0.0).then(|| (method - baseline) / baseline)
}

/// Runs every method on every query (queries in parallel) and aggregates
/// hit-rate and coverage recall. Every query needs ground truth.
pub fn evaluate(
    corpus: &Corpus,
    queries: &[Query],
    methods: &[Method<'_>],
    k: usize,
    overlap_threshold: f64,
) -> Result<EvalReport> {
    if methods.is_empty() || queries.is_empty() {
        return Err(Error::InvalidData(
            "evaluation needs at least one method and one query".into(),
        ));
    }
    let mut reports: Vec<MethodReport> = Vec::with_capacity(methods.len());
    for (name, rank) in methods {
        let recalls = queries
            .par_iter()
            .map(|q| {
                let refs = rank(q)?;
                let chunks: Vec<&Chunk> = refs.iter().map(|&r| corpus.chunk(r)).collect();
                recall_at_k(&chunks, q, k, overlap_threshold)
            })
            .collect::<Result<Vec<_>>>()?;
        let rows: Vec<(Recall, &Query)> = recalls.into_iter().zip(queries).collect();
        let mut by_complexity: BTreeMap<u8, Vec<(Recall, &Query)>> = BTreeMap::new();
        let mut by_type: BTreeMap<String, Vec<(Recall, &Query)>> = BTreeMap::new();
        for &row in &rows {
            by_complexity.entry(row.1.complexity).or_default().push(row);
            by_type
                .entry(row.1.query_type.as_str().to_string())
                .or_default()
                .push(row);
        }
        reports.push(MethodReport {
            name: name.clone(),
            overall: stats(&rows),
            by_complexity: by_complexity
                .into_iter()
                .map(|(c, r)| (c, stats(&r)))
                .collect(),
            by_query_type: by_type.into_iter().map(|(t, r)| (t, stats(&r))).collect(),
        });
    }
    let base = reports[0].clone();
    for m in &mut reports {
        m.overall.relative_improvement = relative(m.overall.recall, base.overall.recall);
        for (c, s) in &mut m.by_complexity {
            s.relative_improvement = relative(s.recall, base.by_complexity[c].recall);
        }
        for (t, s) in &mut m.by_query_type {
            s.relative_improvement = relative(s.recall, base.by_query_type[t].recall);
        }
    }
    Ok(EvalReport {
        k,
        overlap_threshold,
        baseline: base.name,
        methods: reports,
    })
}

fn percent(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_string(), |v| format!("{:+.1}%", 100.0 * v))
}

fn table(header: &[String], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if c == 0 {
                    format!("{s:<w$}", w = widths[c])
                } else {
                    format!("{s:>w$}", w = widths[c])
                }
            })
            .collect();
        format!("| {} |\n", parts.join(" | "))
    };
    let mut out = line(header);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    out.push_str(&format!("|-{}-|\n", rule.join("-|-")));
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

impl EvalReport {
    /// Plain-text tables: overall recall with relative improvement, then
    /// recall by complexity level and by query type.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let overall: Vec<Vec<String>> = self
            .methods
            .iter()
            .map(|m| {
                vec![
                    m.name.clone(),
                    format!("{:.4}", m.overall.recall),
                    format!("{:.4}", m.overall.coverage),
                    percent(m.overall.relative_improvement),
                ]
            })
            .collect();
        let header = [
            "Method".to_string(),
            format!("Recall@{}", self.k),
            "Coverage".into(),
            "Rel. Imp.".into(),
        ];
        let _ = writeln!(out, "{}", table(&header, &overall));

        let levels: Vec<u8> = self.methods[0].by_complexity.keys().copied().collect();
        let mut header = vec!["Method".to_string()];
        header.extend(levels.iter().map(|c| format!("Compl. {c}")));
        let rows: Vec<Vec<String>> = self
            .methods
            .iter()
            .map(|m| {
                let mut r = vec![m.name.clone()];
                r.extend(
                    levels
                        .iter()
                        .map(|c| format!("{:.4}", m.by_complexity[c].recall)),
                );
                r
            })
            .collect();
        let _ = writeln!(out, "{}", table(&header, &rows));

        let types: Vec<&String> = self.methods[0].by_query_type.keys().collect();
        let mut header = vec!["Method".to_string()];
        header.extend(types.iter().map(|t| t.to_string()));
        let rows: Vec<Vec<String>> = self
            .methods
            .iter()
            .map(|m| {
                let mut r = vec![m.name.clone()];
                r.extend(
                    types
                        .iter()
                        .map(|t| format!("{:.4}", m.by_query_type[*t].recall)),
                );
                r
            })
            .collect();
        out.push_str(&table(&header, &rows));
        out
    }

    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.name == name)
    }

    /// Writes `<stem>.json` and `<stem>.txt` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(self)? + "\n",
        )?;
        fs::write(dir.join(format!("{stem}.txt")), self.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::corpus::{QueryType, Segment};

    fn chunk(i: usize) -> Chunk {
        Chunk {
            episode_id: "e".into(),
            chunk_id: format!("c{i}"),
            seq_index: i,
            text: String::new(),
            start_time: 10.0 * i as f64,
            end_time: 10.0 * (i + 1) as f64,
            embedding: Some(vec![1.0, i as f32]),
        }
    }

    fn query(id: &str, segs: &[(f64, f64)], complexity: u8, qt: QueryType) -> Query {
        Query {
            query_id: id.into(),
            text: String::new(),
            embedding: Some(vec![1.0, 0.0]),
            complexity,
            query_type: qt,
            relevant_segments: segs
                .iter()
                .map(|&(start, end)| Segment {
                    episode_id: "e".into(),
                    start,
                    end,
                })
                .collect(),
            relevant_chunk_ids: None,
        }
    }

    #[test]
    fn hit_and_miss() {
        let chunks: Vec<Chunk> = (0..10).map(chunk).collect();
        let refs: Vec<&Chunk> = chunks.iter().collect();
        let q = query("q", &[(0.0, 10.0)], 4, QueryType::MultiHop);
        assert_eq!(recall_at_k(&refs, &q, 5, 0.5).unwrap().hit, 1.0);
        let q = query("q", &[(80.0, 90.0)], 4, QueryType::MultiHop);
        assert_eq!(recall_at_k(&refs, &q, 5, 0.5).unwrap().hit, 0.0);
        assert_eq!(recall_at_k(&refs, &q, 9, 0.5).unwrap().hit, 1.0);
    }

    #[test]
    fn two_segments_one_covered() {
        let chunks: Vec<Chunk> = (0..10).map(chunk).collect();
        let refs: Vec<&Chunk> = chunks.iter().collect();
        let q = query("q", &[(20.0, 30.0), (70.0, 80.0)], 4, QueryType::MultiHop);
        let r = recall_at_k(&refs, &q, 5, 0.5).unwrap();
        assert_eq!(r.hit, 1.0);
        assert_eq!(r.coverage, 0.5);
    }

    #[test]
    fn chunk_id_ground_truth_and_errors() {
        let chunks: Vec<Chunk> = (0..4).map(chunk).collect();
        let refs: Vec<&Chunk> = chunks.iter().collect();
        let mut q = query("q", &[], 4, QueryType::Other);
        assert!(matches!(
            recall_at_k(&refs, &q, 5, 0.5),
            Err(Error::NoGroundTruth(_))
        ));
        q.relevant_chunk_ids = Some(vec!["c1".into(), "c9".into()]);
        let r = recall_at_k(&refs, &q, 5, 0.5).unwrap();
        assert_eq!((r.hit, r.coverage), (1.0, 0.5));
        assert!(recall_at_k(&refs, &q, 0, 0.5).is_err());
    }

    fn fixture() -> (Corpus, Vec<Query>) {
        let corpus = Corpus::from_chunks((0..10).map(chunk).collect()).unwrap();
        let queries = vec![
            query("a", &[(0.0, 10.0)], 4, QueryType::MultiHop),
            query("b", &[(90.0, 100.0)], 4, QueryType::Structural),
            query("c", &[(10.0, 20.0)], 5, QueryType::MultiHop),
            query("d", &[(50.0, 60.0)], 5, QueryType::ContextDependent),
            query("e", &[(30.0, 40.0)], 4, QueryType::MultiHop),
        ];
        (corpus, queries)
    }

    fn first_n(n: usize) -> impl Fn(&Query) -> Result<Vec<ChunkRef>> + Sync {
        move |_| Ok((0..n).map(|index| ChunkRef { episode: 0, index }).collect())
    }

    #[test]
    fn identical_method_has_zero_improvement() {
        let (corpus, queries) = fixture();
        let methods: Vec<Method> = vec![
            ("base".into(), Box::new(first_n(3))),
            ("same".into(), Box::new(first_n(3))),
        ];
        let report = evaluate(&corpus, &queries, &methods, 5, 0.5).unwrap();
        assert_eq!(report.baseline, "base");
        assert_eq!(report.methods[1].overall.relative_improvement, Some(0.0));
        assert_eq!(report.methods[0].overall.recall, 0.4);
        assert!(report.to_text().contains("+0.0%"));
    }

    #[test]
    fn single_query_mean_is_its_recall() {
        let (corpus, queries) = fixture();
        let methods: Vec<Method> = vec![("m".into(), Box::new(first_n(1)))];
        let report = evaluate(&corpus, &queries[..1], &methods, 5, 0.5).unwrap();
        assert_eq!(report.methods[0].overall.recall, 1.0);
        assert_eq!(report.methods[0].overall.queries, 1);
    }

    #[test]
    fn groups_recompose_overall_mean() {
        let (corpus, queries) = fixture();
        let methods: Vec<Method> = vec![
            ("b".into(), Box::new(first_n(2))),
            ("m".into(), Box::new(first_n(6))),
        ];
        let report = evaluate(&corpus, &queries, &methods, 5, 0.5).unwrap();
        for m in &report.methods {
            for groups in [
                m.by_complexity.values().collect::<Vec<_>>(),
                m.by_query_type.values().collect::<Vec<_>>(),
            ] {
                let n: usize = groups.iter().map(|g| g.queries).sum();
                let weighted: f64 = groups
                    .iter()
                    .map(|g| g.recall * g.queries as f64)
                    .sum::<f64>()
                    / n as f64;
                assert!((weighted - m.overall.recall).abs() < 1e-9);
                assert_eq!(n, queries.len());
            }
        }
        let m = report.method("m").unwrap();
        // top 5 of the six-chunk list reach queries a, c and e
        assert!((m.overall.recall - 0.6).abs() < 1e-12);
        assert!((m.overall.relative_improvement.unwrap() - 0.5).abs() < 1e-12);
        let text = report.to_text();
        assert!(
            text.contains("Compl. 4") && text.contains("Compl. 5") && text.contains("multi_hop")
        );
    }

    #[test]
    fn report_round_trips_through_json() {
        let (corpus, queries) = fixture();
        let methods: Vec<Method> = vec![("b".into(), Box::new(first_n(2)))];
        let report = evaluate(&corpus, &queries, &methods, 5, 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        report.write(dir.path(), "report").unwrap();
        let back: EvalReport =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
                .unwrap();
        assert_eq!(back, report);
    }

    proptest! {
        #[test]
        fn recall_is_monotone_in_k(order in Just((0..10usize).collect::<Vec<_>>()).prop_shuffle(), seg in 0usize..10) {
            let chunks: Vec<Chunk> = (0..10).map(chunk).collect();
            let ranked: Vec<&Chunk> = order.iter().map(|&i| &chunks[i]).collect();
            let q = query("q", &[(10.0 * seg as f64, 10.0 * seg as f64 + 10.0), (0.0, 5.0)], 4, QueryType::MultiHop);
            let mut last = Recall { hit: 0.0, coverage: 0.0 };
            for k in 1..=10 {
                let r = recall_at_k(&ranked, &q, k, 0.5).unwrap();
                prop_assert!(r.hit >= last.hit && r.coverage >= last.coverage);
                prop_assert!((0.0..=1.0).contains(&r.hit) && (0.0..=1.0).contains(&r.coverage));
                last = r;
            }
        }
    }
}
