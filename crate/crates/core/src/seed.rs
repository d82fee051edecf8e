//! Deterministic seed derivation for per-item RNG streams.

/// SplitMix64 finalizer; full-period bijection on u64.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent child seed from a base seed and an item index.
///
/// Used wherever a batch of items each needs its own RNG stream (corpus
/// generation, per-condition sampling) so that items are reproducible
/// individually and insertion order does not matter.
pub fn derive(base: u64, index: u64) -> u64 {
    splitmix64(base ^ splitmix64(index))
}
