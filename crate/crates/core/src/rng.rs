//! Seedable random streams keyed by a stable label.
//!
//! A stream is ChaCha20 (`rand_chacha::ChaCha20Rng`) whose 32-byte key is
//! `SHA-256(root_seed as little-endian u64 || 0x00 || utf8(stream_id))`.
//! Deriving a stream touches no shared state, so members can be sampled in any
//! order or on any thread and still see the same draws. The construction is
//! fixed for a release; changing it changes every number this crate produces.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Identifies one independent random stream.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub root_seed: u64,
    pub stream_id: String,
}

impl SeedSpec {
    pub fn new(root_seed: u64, stream_id: impl Into<String>) -> Self {
        Self {
            root_seed,
            stream_id: stream_id.into(),
        }
    }

    /// A sub-stream namespaced under this one, e.g. `"eval" -> "eval/member-a"`.
    pub fn child(&self, suffix: impl AsRef<str>) -> Self {
        let stream_id = if self.stream_id.is_empty() {
            suffix.as_ref().to_owned()
        } else {
            format!("{}/{}", self.stream_id, suffix.as_ref())
        };
        Self {
            root_seed: self.root_seed,
            stream_id,
        }
    }

    pub fn stream(&self) -> RandomStream {
        derive_stream(self.root_seed, &self.stream_id)
    }
}

/// A deterministic source of uniform and standard-normal variates.
#[derive(Clone, Debug)]
pub struct RandomStream {
    rng: ChaCha20Rng,
}

pub fn derive_stream(root_seed: u64, stream_id: &str) -> RandomStream {
    let mut hasher = Sha256::new();
    hasher.update(root_seed.to_le_bytes());
    hasher.update([0u8]);
    hasher.update(stream_id.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    RandomStream {
        rng: ChaCha20Rng::from_seed(key),
    }
}

impl RandomStream {
    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn standard_normal(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn fill_standard_normal(&mut self, out: &mut [f64]) {
        for x in out {
            *x = self.normal();
        }
    }
}
