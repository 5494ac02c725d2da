//! Chunks, queries, JSONL ingestion and relevance labeling.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::embed::{normalize, toy_embed};
use crate::error::{Error, Result};

/// Default fraction of a chunk's duration that must overlap a ground-truth
/// segment for the chunk to count as relevant.
pub const DEFAULT_OVERLAP_THRESHOLD: f64 = 0.5;

/// One text segment of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub episode_id: String,
    pub chunk_id: String,
    pub seq_index: usize,
    pub text: String,
    pub start_time: f64,
    pub end_time: f64,
    #[serde(default)]
    pub embedding: Option<Vec<f32>>,
}

impl Chunk {
    pub fn embedding(&self) -> Result<&[f32]> {
        self.embedding
            .as_deref()
            .ok_or_else(|| Error::MissingEmbedding(self.chunk_id.clone()))
    }

    pub fn duration(&self) -> f64 {
        self.end_time - self.start_time
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryType {
    MultiHop,
    Structural,
    ContextDependent,
    Other,
}

impl QueryType {
    pub fn as_str(self) -> &'static str {
        match self {
            QueryType::MultiHop => "multi_hop",
            QueryType::Structural => "structural",
            QueryType::ContextDependent => "context_dependent",
            QueryType::Other => "other",
        }
    }
}

/// Ground-truth time span inside one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub episode_id: String,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub text: String,
    #[serde(default)]
    pub embedding: Option<Vec<f32>>,
    pub complexity: u8,
    pub query_type: QueryType,
    #[serde(default)]
    pub relevant_segments: Vec<Segment>,
    #[serde(default)]
    pub relevant_chunk_ids: Option<Vec<String>>,
}

impl Query {
    pub fn embedding(&self) -> Result<&[f32]> {
        self.embedding
            .as_deref()
            .ok_or_else(|| Error::MissingEmbedding(self.query_id.clone()))
    }

    pub fn has_ground_truth(&self) -> bool {
        !self.relevant_segments.is_empty()
            || self
                .relevant_chunk_ids
                .as_ref()
                .is_some_and(|ids| !ids.is_empty())
    }
}

/// Whether `chunk` counts as relevant for `query`.
///
/// An explicit chunk-id match wins. Otherwise the chunk is relevant when the
/// best same-episode segment overlap covers at least `overlap_threshold` of
/// the chunk's own duration.
pub fn label_chunk_relevance(chunk: &Chunk, query: &Query, overlap_threshold: f64) -> bool {
    if let Some(ids) = &query.relevant_chunk_ids {
        if ids.contains(&chunk.chunk_id) {
            return true;
        }
    }
    let duration = chunk.duration();
    if duration <= 0.0 {
        return false;
    }
    query
        .relevant_segments
        .iter()
        .filter(|s| s.episode_id == chunk.episode_id)
        .map(|s| (s.end.min(chunk.end_time) - s.start.max(chunk.start_time)).max(0.0) / duration)
        .any(|ratio| ratio >= overlap_threshold)
}

/// Location of a chunk inside a [`Corpus`]: episode position, then position
/// in seq order (which is also the node index in the episode graph).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChunkRef {
    pub episode: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: String,
    pub chunks: Vec<Chunk>,
}

/// Chunks grouped by episode (sorted by id) and ordered by `seq_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub episodes: Vec<Episode>,
    dim: Option<usize>,
}

impl Corpus {
    /// Groups and validates a flat chunk list.
    pub fn from_chunks(chunks: Vec<Chunk>) -> Result<Self> {
        Self::from_numbered(chunks.into_iter().enumerate().map(|(i, c)| (i + 1, c)))
    }

    fn from_numbered(chunks: impl IntoIterator<Item = (usize, Chunk)>) -> Result<Self> {
        let mut dim: Option<usize> = None;
        let mut groups: BTreeMap<String, Vec<Chunk>> = BTreeMap::new();
        let mut seen: HashSet<(String, String)> = HashSet::new();
        for (line, chunk) in chunks {
            if !(chunk.start_time >= 0.0 && chunk.end_time > chunk.start_time) {
                return Err(Error::InvalidData(format!(
                    "line {line}: chunk {:?} has invalid time span [{}, {}]",
                    chunk.chunk_id, chunk.start_time, chunk.end_time
                )));
            }
            if let Some(emb) = &chunk.embedding {
                match dim {
                    None => dim = Some(emb.len()),
                    Some(d) if d != emb.len() => {
                        return Err(Error::InconsistentDimension {
                            line,
                            expected: d,
                            got: emb.len(),
                        })
                    }
                    Some(_) => {}
                }
            }
            if !seen.insert((chunk.episode_id.clone(), chunk.chunk_id.clone())) {
                return Err(Error::DuplicateChunkId {
                    episode_id: chunk.episode_id,
                    chunk_id: chunk.chunk_id,
                });
            }
            groups
                .entry(chunk.episode_id.clone())
                .or_default()
                .push(chunk);
        }
        let mut episodes = Vec::with_capacity(groups.len());
        for (id, mut chunks) in groups {
            chunks.sort_by_key(|c| c.seq_index);
            for (expected, c) in chunks.iter().enumerate() {
                if c.seq_index != expected {
                    return Err(Error::InvalidData(format!(
                        "episode {id:?}: seq_index values must be 0..{} without gaps, found {}",
                        chunks.len(),
                        c.seq_index
                    )));
                }
            }
            episodes.push(Episode { id, chunks });
        }
        Ok(Self { episodes, dim })
    }

    /// Embedding dimension shared by all embedded chunks, if any are embedded.
    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.episodes.iter().map(|e| e.chunks.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn chunk(&self, r: ChunkRef) -> &Chunk {
        &self.episodes[r.episode].chunks[r.index]
    }

    pub fn episode_index(&self, episode_id: &str) -> Option<usize> {
        self.episodes
            .binary_search_by(|e| e.id.as_str().cmp(episode_id))
            .ok()
    }

    pub fn refs(&self) -> impl Iterator<Item = ChunkRef> + '_ {
        self.episodes.iter().enumerate().flat_map(|(e, ep)| {
            (0..ep.chunks.len()).map(move |index| ChunkRef { episode: e, index })
        })
    }

    pub fn chunks(&self) -> impl Iterator<Item = &Chunk> {
        self.episodes.iter().flat_map(|e| e.chunks.iter())
    }

    /// Fills missing embeddings with [`toy_embed`]. Fails if the corpus
    /// already carries embeddings of a different dimension.
    pub fn fill_toy_embeddings(&mut self, dim: usize, seed: u64) -> Result<()> {
        if let Some(d) = self.dim {
            if d != dim && self.chunks().any(|c| c.embedding.is_none()) {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: dim,
                });
            }
        }
        for ep in &mut self.episodes {
            for c in &mut ep.chunks {
                if c.embedding.is_none() {
                    c.embedding = Some(toy_embed(&c.text, dim, seed)?);
                }
            }
        }
        if self.dim.is_none() {
            self.dim = Some(dim);
        }
        Ok(())
    }

    /// Normalizes every embedding to unit length.
    pub fn normalize_embeddings(&mut self) -> Result<()> {
        for ep in &mut self.episodes {
            for c in &mut ep.chunks {
                if let Some(e) = &c.embedding {
                    c.embedding = Some(normalize(e)?);
                }
            }
        }
        Ok(())
    }
}

fn parse_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::ParseError {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a JSONL chunk file into a validated [`Corpus`].
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    Corpus::from_numbered(parse_jsonl::<Chunk>(path)?)
}

pub fn save_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    write_jsonl(path, corpus.chunks())
}

/// Reads a JSONL query file. Complexity must lie in 1..=5 and ground-truth
/// segments must have positive duration.
pub fn load_queries(path: &Path) -> Result<Vec<Query>> {
    let rows = parse_jsonl::<Query>(path)?;
    let mut out = Vec::with_capacity(rows.len());
    for (line, q) in rows {
        validate_query(&q).map_err(|message| Error::ParseError { line, message })?;
        out.push(q);
    }
    Ok(out)
}

fn validate_query(q: &Query) -> std::result::Result<(), String> {
    if !(1..=5).contains(&q.complexity) {
        return Err(format!(
            "query {:?}: complexity {} outside 1..=5",
            q.query_id, q.complexity
        ));
    }
    if let Some(s) = q
        .relevant_segments
        .iter()
        .find(|s| s.end.partial_cmp(&s.start) != Some(std::cmp::Ordering::Greater))
    {
        return Err(format!(
            "query {:?}: segment [{}, {}] has no positive duration",
            q.query_id, s.start, s.end
        ));
    }
    Ok(())
}

/// Fills missing query embeddings with [`toy_embed`].
pub fn fill_query_embeddings(queries: &mut [Query], dim: usize, seed: u64) -> Result<()> {
    for q in queries {
        if q.embedding.is_none() {
            q.embedding = Some(toy_embed(&q.text, dim, seed)?);
        }
    }
    Ok(())
}
