//! Deterministic RNG streams.
//!
//! Every random decision in the crate draws from a ChaCha8 stream keyed by
//! `(seed, purpose, index)`. Purposes separate unrelated uses (parameter
//! init, sampling noise, shuffling, ...) so that e.g. changing the batch
//! count never shifts which noise a given sample sees, and per-index streams
//! make results independent of how work is sharded across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) const STREAM_INIT: u64 = 0;
pub(crate) const STREAM_SAMPLE: u64 = 1;
pub(crate) const STREAM_SHUFFLE: u64 = 2;
pub(crate) const STREAM_DEQUANT: u64 = 3;
pub(crate) const STREAM_SYNTH: u64 = 4;

pub(crate) fn stream(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    debug_assert!(index < 1 << 48, "stream index too large");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 48) | index);
    rng
}
