//! Seed derivation.
//!
//! Every run starts from one 64-bit master seed. Child seeds are derived from
//! `(master, index)` by a SplitMix64 finaliser, so each consumer owns a fixed
//! index and adding a consumer never shifts the streams of the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed number `index` of `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master) ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// Generator for child stream `index` of `master`.
pub fn rng_for(master: u64, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(master, index))
}

/// Hands out consecutive child seeds of one master seed.
#[derive(Debug, Clone)]
pub struct SeedStream {
    master: u64,
    counter: u64,
}

impl SeedStream {
    pub fn new(master: u64) -> Self {
        SeedStream { master, counter: 0 }
    }

    pub fn next_seed(&mut self) -> u64 {
        let s = derive_seed(self.master, self.counter);
        self.counter += 1;
        s
    }

    pub fn next_rng(&mut self) -> Rng {
        Rng::seed_from_u64(self.next_seed())
    }

    pub fn issued(&self) -> u64 {
        self.counter
    }
}
