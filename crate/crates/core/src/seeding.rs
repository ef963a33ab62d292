//! Derivation of independent RNG streams from one master seed.

use std::fmt;
use std::str::FromStr;

use mocl_autodiff::splitmix64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::CoreError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SeedTag {
    Stream,
    Episode,
    Init,
    Dropout,
    Eval,
}

impl SeedTag {
    pub const ALL: [SeedTag; 5] = [
        Self::Stream,
        Self::Episode,
        Self::Init,
        Self::Dropout,
        Self::Eval,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Stream => "stream",
            Self::Episode => "episode",
            Self::Init => "init",
            Self::Dropout => "dropout",
            Self::Eval => "eval",
        }
    }
}

impl fmt::Display for SeedTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SeedTag {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| CoreError::Unknown {
                what: "seed tag",
                name: s.to_string(),
            })
    }
}

/// FNV-1a over the tag bytes, mixed with the master seed through SplitMix64.
pub fn derive_seed(master: u64, tag: SeedTag) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_str().bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(master ^ splitmix64(h))
}

/// Sub-seed for an indexed item within a tagged stream (e.g. evaluation cell j).
pub fn derive_indexed(master: u64, tag: SeedTag, index: u64) -> u64 {
    splitmix64(derive_seed(master, tag) ^ splitmix64(index.wrapping_add(1)))
}

pub fn rng_for(master: u64, tag: SeedTag) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag))
}
