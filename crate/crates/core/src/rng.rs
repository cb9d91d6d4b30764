//! Labeled random streams.
//!
//! Every random draw in a run comes from an [`RngStream`] identified by the
//! master seed plus a label path such as `train/epoch#3/batch#17`. Equal
//! paths replay equal draws; distinct paths seed independent ChaCha
//! generators. Per-sample paths make parallel evaluation independent of the
//! worker count.

use std::hash::Hasher;

use fnv::FnvHasher;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RngStream {
    seed: u64,
    path: String,
}

impl RngStream {
    pub fn new(seed: u64, label: &str) -> Self {
        Self {
            seed,
            path: label.to_owned(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.path
    }

    /// A sub-stream for a named purpose.
    pub fn child(&self, label: &str) -> Self {
        Self {
            seed: self.seed,
            path: format!("{}/{label}", self.path),
        }
    }

    /// A sub-stream for an index (sample, epoch, restart, ...).
    pub fn at(&self, index: u64) -> Self {
        Self {
            seed: self.seed,
            path: format!("{}#{index}", self.path),
        }
    }

    fn key(&self) -> u64 {
        let mut h = FnvHasher::default();
        h.write_u64(self.seed);
        h.write(self.path.as_bytes());
        h.finish()
    }

    /// A fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        let key = self.key();
        seed[..8].copy_from_slice(&self.seed.to_le_bytes());
        seed[8..16].copy_from_slice(&key.to_le_bytes());
        seed[16..24].copy_from_slice(&key.rotate_left(29).to_le_bytes());
        seed[24..].copy_from_slice(&(self.path.len() as u64).to_le_bytes());
        ChaCha8Rng::from_seed(seed)
    }
}
