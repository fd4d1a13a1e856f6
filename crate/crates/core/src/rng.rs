//! Counter-style seeding: every random stream is keyed by the run seed, the
//! trajectory (or ensemble) index, a sub-stream index and a domain tag, so
//! results do not depend on scheduling or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Noise = 1,
    Disorder = 2,
    Bootstrap = 3,
    OrnsteinUhlenbeck = 4,
}

pub fn stream_rng(seed: u64, index: u64, stream: u64, domain: Domain) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    for (chunk, word) in key
        .chunks_exact_mut(8)
        .zip([seed, index, stream, domain as u64])
    {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}
