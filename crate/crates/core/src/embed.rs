//! Embedding math: normalization, cosine similarity, a dense embedding
//! matrix, and the deterministic bag-of-words embedder used for tests and
//! synthetic corpora.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// Size of the hashed bag-of-words space used by [`toy_embed`].
pub const TOY_VOCAB_BUCKETS: usize = 4096;

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| f64::from(*x) * f64::from(*y))
        .sum()
}

pub(crate) fn l2_norm(v: &[f32]) -> f64 {
    dot(v, v).sqrt()
}

/// Scales `v` to unit L2 norm.
pub fn normalize(v: &[f32]) -> Result<Vec<f32>> {
    if v.is_empty() {
        return Err(Error::ZeroVector);
    }
    let norm = l2_norm(v);
    if norm < ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|x| (f64::from(*x) / norm) as f32).collect())
}

/// Cosine similarity clamped to `[-1, 1]`.
///
/// Computed as `dot(a, b) / (|a| |b|)` in f64, which is symmetric in its
/// arguments bit for bit.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na < ZERO_NORM || nb < ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    let cos = dot(a, b) / (na * nb);
    Ok(cos.clamp(-1.0, 1.0) as f32)
}

/// Row-major `rows x dim` matrix of embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl EmbeddingMatrix {
    pub fn from_rows<I, R>(dim: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = R>,
        R: AsRef<[f32]>,
    {
        let mut data = Vec::new();
        let mut n = 0;
        for row in rows {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
            n += 1;
        }
        Ok(Self {
            rows: n,
            dim,
            data,
            normalized: false,
        })
    }

    /// Normalizes every row in place. Fails on an all-zero row.
    pub fn normalize_rows(mut self) -> Result<Self> {
        for r in 0..self.rows {
            let row = &mut self.data[r * self.dim..(r + 1) * self.dim];
            let unit = normalize(row)?;
            row.copy_from_slice(&unit);
        }
        self.normalized = true;
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercased alphanumeric tokens of `text`.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Deterministic stand-in for a learned text encoder.
///
/// Tokens are hashed into a 4096-bucket term-count vector, which is projected
/// to `dim` with a seeded ±1 matrix and normalized. Rows of the projection
/// matrix are generated on demand from `(seed, bucket)`, so the full matrix is
/// never materialized.
pub fn toy_embed(text: &str, dim: usize, seed: u64) -> Result<Vec<f32>> {
    if dim < 2 {
        return Err(Error::InvalidData(format!(
            "toy embedding dimension must be >= 2, got {dim}"
        )));
    }
    let mut counts = std::collections::BTreeMap::<usize, f64>::new();
    for tok in tokenize(text) {
        let bucket = (fnv1a(tok.as_bytes()) % TOY_VOCAB_BUCKETS as u64) as usize;
        *counts.entry(bucket).or_default() += 1.0;
    }
    if counts.is_empty() {
        return Err(Error::ZeroVector);
    }
    let mut out = vec![0.0f64; dim];
    for (bucket, count) in counts {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (bucket as u64));
        for o in out.iter_mut() {
            if rng.gen::<bool>() {
                *o += count;
            } else {
                *o -= count;
            }
        }
    }
    let out: Vec<f32> = out.into_iter().map(|x| x as f32).collect();
    normalize(&out)
}
