//! Derived seed streams.
//!
//! Every stochastic consumer (init, batches, probes) gets its own seed
//! derived from a master seed, a stream tag, and an index, so interleaving
//! probes into a training run never perturbs the training batch stream.

/// splitmix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub const STREAM_INIT: u64 = 1;
pub const STREAM_BATCH: u64 = 2;
pub const STREAM_PROBE: u64 = 3;
pub const STREAM_EVAL: u64 = 4;
pub const STREAM_DATA: u64 = 5;

pub fn derive(master: u64, stream: u64, index: u64) -> u64 {
    mix64(mix64(master ^ mix64(stream)) ^ index)
}
