// The context cache against a plain vector simulation of LRU.
// Shared by the core tests and the acceptance target.
use chorus_core::streaming::{CacheEntry, ContextCache};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Oracle {
    capacity: usize,
    /// Most recent last.
    keys: Vec<String>,
    hits: u64,
    misses: u64,
    evictions: u64,
}

impl Oracle {
    fn touch(&mut self, id: &str) -> bool {
        if let Some(p) = self.keys.iter().position(|k| k == id) {
            let k = self.keys.remove(p);
            self.keys.push(k);
            self.hits += 1;
            true
        } else {
            if self.keys.len() == self.capacity {
                self.keys.remove(0);
                self.evictions += 1;
            }
            self.keys.push(id.to_string());
            self.misses += 1;
            false
        }
    }
}

fn entry(id: &str) -> CacheEntry {
    let v = id.len() as f32;
    CacheEntry {
        z_c: vec![v, 1.0],
        zc_unit: vec![v, 1.0],
    }
}

/// Replays `traces` random traces through the cache and the oracle; the first
/// disagreement is returned as an error.
pub fn check_traces(traces: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trace in 0..traces {
        let capacity = rng.random_range(1..6);
        let universe = rng.random_range(1..10);
        let len = rng.random_range(1..80);
        let mut cache = ContextCache::new(capacity).map_err(|e| e.to_string())?;
        let mut oracle = Oracle { capacity, keys: Vec::new(), hits: 0, misses: 0, evictions: 0 };
        for step in 0..len {
            let id = format!("ctx{}", rng.random_range(0..universe));
            let mut encoded = false;
            let (e, hit) = cache
                .get_or_encode(&id, Some("desc"), |_| {
                    encoded = true;
                    Ok(entry(&id))
                })
                .map_err(|e| e.to_string())?;
            let fail = |what: &str| Err(format!("trace {trace} step {step}: {what}"));
            if e != &entry(&id) {
                return fail("wrong entry");
            }
            let want = oracle.touch(&id);
            if hit != want || encoded == want {
                return fail("hit flag disagrees");
            }
            let order: Vec<&str> = cache.keys_by_recency().collect();
            if order != oracle.keys.iter().map(String::as_str).collect::<Vec<_>>() {
                return fail("recency order disagrees");
            }
        }
        let c = cache.counters();
        if (c.hits, c.misses, c.evictions) != (oracle.hits, oracle.misses, oracle.evictions) {
            return Err(format!("trace {trace}: counters {c:?}"));
        }
    }
    Ok(())
}
