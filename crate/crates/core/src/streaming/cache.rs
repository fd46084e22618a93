use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};

pub const DEFAULT_CAPACITY: usize = 16;

/// Output of the full context stack for one identifier.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    pub z_c: Vec<f32>,
    /// `z_c / ||z_c||`, the context half of the gate features.
    pub zc_unit: Vec<f32>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheCounters {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
}

impl CacheCounters {
    pub fn lookups(&self) -> u64 {
        self.hits + self.misses
    }
}

/// Keyed least-recently-used cache of context representations.
///
/// Capacity 1 degenerates to "reuse only if the identifier matches the previous
/// sample". Keys are exact identifier strings.
#[derive(Debug)]
pub struct ContextCache {
    capacity: usize,
    entries: HashMap<String, CacheEntry>,
    // front = least recently used
    order: VecDeque<String>,
    counters: CacheCounters,
}

impl ContextCache {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(config("stream.capacity", "must be positive"));
        }
        Ok(Self {
            capacity,
            entries: HashMap::with_capacity(capacity),
            order: VecDeque::with_capacity(capacity),
            counters: CacheCounters::default(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn counters(&self) -> CacheCounters {
        self.counters
    }

    /// Keys from least to most recently used.
    pub fn keys_by_recency(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(String::as_str)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    fn touch(&mut self, id: &str) {
        if let Some(pos) = self.order.iter().position(|k| k == id) {
            let k = self.order.remove(pos).expect("position is in range");
            self.order.push_back(k);
        }
    }

    /// Returns the entry for `id`, calling `encode` only on a miss.
    pub fn get_or_encode<F>(&mut self, id: &str, description: Option<&str>, encode: F) -> Result<(&CacheEntry, bool)>
    where
        F: FnOnce(&str) -> Result<CacheEntry>,
    {
        if self.entries.contains_key(id) {
            self.counters.hits += 1;
            self.touch(id);
            return Ok((&self.entries[id], true));
        }
        let desc = description
            .ok_or_else(|| contract(format!("context `{id}` is not cached and has no description")))?;
        let entry = encode(desc)?;
        self.counters.misses += 1;
        if self.entries.len() == self.capacity {
            let old = self.order.pop_front().expect("full cache has an LRU key");
            self.entries.remove(&old);
            self.counters.evictions += 1;
        }
        self.order.push_back(id.to_string());
        self.entries.insert(id.to_string(), entry);
        Ok((&self.entries[id], false))
    }
}
