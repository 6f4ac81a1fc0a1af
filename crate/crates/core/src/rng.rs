//! Counter-based random streams.
//!
//! A stream is addressed by `(seed, stream_id)`; draws within it are addressed
//! by a counter. Work split across any number of threads sees the same numbers
//! as long as each sample uses its own stream id.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Generator for sample `stream_id` under master `seed`.
pub fn stream(seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&0x6465_6361_796c_6162u64.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream_id);
    rng
}

/// Stream ids for distinct purposes under one seed (orbit starts, jitter, ...).
pub fn substream(stream_id: u64, purpose: u32) -> u64 {
    stream_id ^ ((purpose as u64) << 48)
}

/// Uniform in the open interval (0, 1).
pub fn open01<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return u;
        }
    }
}
