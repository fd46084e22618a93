use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Stream identifiers, one per purpose, so subsystems never share draws.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SAMPLING: u64 = 2;
    pub const DATA: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const PROBE: u64 = 6;
    pub const TRACE: u64 = 7;
    pub const SHUFFLE: u64 = 8;
    pub const SUBSAMPLE: u64 = 9;
}

/// Counter-based generator state: `(seed, stream)` plus a word position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
}

impl RngState {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// Generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(self.stream);
        r
    }

    /// Generator positioned at 32-bit word `draw_index` of this stream.
    pub fn at(&self, draw_index: u64) -> ChaCha8Rng {
        let mut r = self.rng();
        r.set_word_pos(draw_index as u128);
        r
    }

    /// Independent state for item `index` (per-sample seeds, per-seed jobs).
    pub fn derive(&self, index: u64) -> RngState {
        let mixed = splitmix64(self.seed ^ splitmix64(self.stream.wrapping_add(0x9E37_79B9)))
            ^ splitmix64(index.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        RngState {
            seed: splitmix64(mixed),
            stream: self.stream,
        }
    }

    pub fn with_stream(&self, stream: u64) -> RngState {
        RngState {
            seed: self.seed,
            stream,
        }
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
