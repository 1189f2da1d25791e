//! Counter-based deterministic random substreams.
//!
//! Every random draw in the simulator comes from a stream keyed by
//! `(master seed, worker, round, phase)`. Streams are derived, never
//! advanced across uses, so the draw a worker sees depends only on the key:
//! adding workers, reordering execution, or changing the thread count never
//! perturbs anyone else's randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Worker slot for draws shared by the whole cohort (e.g. the common
/// representation initialization).
pub const SHARED: u64 = u64::MAX;

/// Phase tags. Sub-indices (local step, class, probe, ...) are folded in by
/// the caller via [`sub`].
pub mod phase {
    pub const INIT_PHI: u64 = 1;
    pub const INIT_THETA: u64 = 2;
    pub const HEAD_BATCH: u64 = 3;
    pub const PHI_BATCH: u64 = 4;
    pub const DPSGD_BATCH: u64 = 5;
    pub const GRAPH_EDGES: u64 = 6;
    pub const PLANT_REPR: u64 = 7;
    pub const PLANT_HEAD_MEAN: u64 = 8;
    pub const PLANT_HEAD_NOISE: u64 = 9;
    pub const PLANT_INPUTS: u64 = 10;
    pub const PLANT_TARGET_NOISE: u64 = 11;
    pub const PARTITION: u64 = 12;
    pub const SPLIT: u64 = 13;
    pub const PROBE: u64 = 14;
    pub const GRADCHECK: u64 = 15;
    pub const GENERALIZE_INIT: u64 = 16;
    pub const GENERALIZE_BATCH: u64 = 17;
}

/// Fold a sub-index (e.g. the local head step `s`) into a phase tag.
#[inline]
pub fn sub(phase: u64, index: u64) -> u64 {
    phase | (index << 8)
}

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the deterministic stream for `(seed, worker, round, phase)`.
pub fn substream(seed: u64, worker: u64, round: u64, phase: u64) -> ChaCha8Rng {
    // Chain the key words through splitmix64 to fill a 256-bit ChaCha seed.
    let mut state = seed;
    let a = splitmix64(&mut state);
    state ^= worker.wrapping_mul(0xa076_1d64_78bd_642f);
    let b = splitmix64(&mut state);
    state ^= round.wrapping_mul(0xe703_7ed1_a0b4_28db);
    let c = splitmix64(&mut state);
    state ^= phase.wrapping_mul(0x8ebc_6af0_9c88_c6e3);
    let d = splitmix64(&mut state);

    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&a.to_le_bytes());
    key[8..16].copy_from_slice(&b.to_le_bytes());
    key[16..24].copy_from_slice(&c.to_le_bytes());
    key[24..32].copy_from_slice(&d.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// One standard-normal draw as `f64` regardless of the working scalar type,
/// so f32 and f64 runs consume identical stream positions.
pub fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

/// Sample `batch_size` distinct example indices from `0..len`.
///
/// Asking for the whole shard (or more) returns `0..len` in order, which makes
/// "full batch" literally the dataset and sampling-noise-free.
pub fn sample_batch_indices(rng: &mut ChaCha8Rng, len: usize, batch_size: usize) -> Vec<usize> {
    assert!(len > 0, "cannot sample from an empty set");
    if batch_size >= len {
        (0..len).collect()
    } else {
        rand::seq::index::sample(rng, len, batch_size).into_vec()
    }
}
