//! Named, reproducible random streams.
//!
//! Every stochastic step in the pipeline draws from a stream identified by
//! `(seed, label)`. Labels form a path (`"fdo/iter#3/proxy"`), so two runs
//! with the same master seed replay the same draws in every stage, and
//! parallel consumers can derive disjoint streams without sharing state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Handle for a deterministic random stream. Cheap to clone and derive;
/// instantiate a generator with [`RngStream::rng`] at the point of use.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    label: String,
}

impl RngStream {
    pub fn new(seed: u64, label: impl Into<String>) -> Self {
        RngStream { seed, label: label.into() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Child stream for a sub-purpose, e.g. `"dedup" -> "dedup/kmeans"`.
    pub fn derive(&self, purpose: &str) -> RngStream {
        RngStream { seed: self.seed, label: format!("{}/{}", self.label, purpose) }
    }

    /// Child stream for the `i`-th instance of a repeated purpose.
    pub fn derive_indexed(&self, purpose: &str, i: u64) -> RngStream {
        RngStream { seed: self.seed, label: format!("{}/{}#{}", self.label, purpose, i) }
    }

    /// Stable 64-bit seed for this stream, mixing the numeric seed with the
    /// label. Platform-independent: FNV-1a over the label bytes followed by
    /// two SplitMix64 finalization rounds.
    pub fn child_seed(&self) -> u64 {
        const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = FNV_OFFSET;
        for byte in self.label.as_bytes() {
            h ^= u64::from(*byte);
            h = h.wrapping_mul(FNV_PRIME);
        }
        splitmix64(splitmix64(h ^ self.seed))
    }

    /// Concrete generator positioned at the start of the stream.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.child_seed())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
