use std::cmp::Ordering;

use crate::corpus::{ChunkRef, Corpus};
use crate::embed::{normalize, EmbeddingMatrix};
use crate::error::{Error, Result};

/// Exact cosine-similarity index over every chunk of a corpus.
#[derive(Debug, Clone)]
pub struct FlatIndex {
    matrix: EmbeddingMatrix,
    refs: Vec<ChunkRef>,
    chunk_ids: Vec<String>,
    episode_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub chunk: ChunkRef,
    pub score: f32,
}

impl FlatIndex {
    pub fn build(corpus: &Corpus) -> Result<Self> {
        let dim = corpus.dim().ok_or(Error::EmptyIndex)?;
        let mut rows = Vec::with_capacity(corpus.len());
        let mut refs = Vec::with_capacity(corpus.len());
        let mut chunk_ids = Vec::with_capacity(corpus.len());
        let mut episode_ids = Vec::with_capacity(corpus.len());
        for r in corpus.refs() {
            let c = corpus.chunk(r);
            rows.push(c.embedding()?);
            refs.push(r);
            chunk_ids.push(c.chunk_id.clone());
            episode_ids.push(c.episode_id.clone());
        }
        if refs.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let matrix = EmbeddingMatrix::from_rows(dim, rows)?.normalize_rows()?;
        Ok(Self {
            matrix,
            refs,
            chunk_ids,
            episode_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    /// Top `k` chunks by cosine similarity, descending. Ties go to the lower
    /// chunk id, then the lower episode id.
    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<Hit>> {
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if query.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: query.len(),
            });
        }
        if k == 0 {
            return Err(Error::InvalidData("k must be at least 1".into()));
        }
        let q = normalize(query)?;
        let scores: Vec<f32> = (0..self.len())
            .map(|i| {
                let dot: f64 = self
                    .matrix
                    .row(i)
                    .iter()
                    .zip(&q)
                    .map(|(&a, &b)| f64::from(a) * f64::from(b))
                    .sum();
                dot.clamp(-1.0, 1.0) as f32
            })
            .collect();
        let cmp = |&a: &usize, &b: &usize| -> Ordering {
            scores[b]
                .total_cmp(&scores[a])
                .then_with(|| self.chunk_ids[a].cmp(&self.chunk_ids[b]))
                .then_with(|| self.episode_ids[a].cmp(&self.episode_ids[b]))
        };
        let mut order: Vec<usize> = (0..self.len()).collect();
        let k = k.min(order.len());
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_by(cmp);
        Ok(order
            .into_iter()
            .map(|i| Hit {
                chunk: self.refs[i],
                score: scores[i],
            })
            .collect())
    }
}
