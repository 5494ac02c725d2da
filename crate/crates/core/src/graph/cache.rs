use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use crate::error::Result;

use super::EpisodeGraph;

/// Cache key: an episode graph depends on its chunks and on `(tau, k)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub episode_id: String,
    tau_bits: u32,
    pub k: usize,
}

impl CacheKey {
    pub fn new(episode_id: impl Into<String>, tau: f32, k: usize) -> Self {
        Self {
            episode_id: episode_id.into(),
            tau_bits: tau.to_bits(),
            k,
        }
    }

    pub fn tau(&self) -> f32 {
        f32::from_bits(self.tau_bits)
    }
}

/// Memoizes constructed episode graphs.
///
/// Safe to share across threads. Two threads racing on the same missing key
/// may both build; the first insert wins and both callers get that graph.
/// Failed builds leave no entry.
#[derive(Debug, Default)]
pub struct GraphCache {
    entries: RwLock<HashMap<CacheKey, Arc<EpisodeGraph>>>,
}

impl GraphCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_build<F>(&self, key: CacheKey, build: F) -> Result<Arc<EpisodeGraph>>
    where
        F: FnOnce() -> Result<EpisodeGraph>,
    {
        if let Some(g) = self.entries.read().expect("graph cache poisoned").get(&key) {
            return Ok(Arc::clone(g));
        }
        let built = Arc::new(build()?);
        let mut entries = self.entries.write().expect("graph cache poisoned");
        Ok(Arc::clone(entries.entry(key).or_insert(built)))
    }

    pub fn get(&self, key: &CacheKey) -> Option<Arc<EpisodeGraph>> {
        self.entries
            .read()
            .expect("graph cache poisoned")
            .get(key)
            .cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("graph cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
