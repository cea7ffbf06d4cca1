//! Deterministic seed derivation: every stochastic stage draws from a stream
//! keyed by `(master seed, stage name, index)`.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for `stage` and `index` under `master`.
pub fn derive_seed(master: u64, stage: &str, index: u64) -> u64 {
    let mut h = FNV_OFFSET;
    for b in stage.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(splitmix64(master ^ h).wrapping_add(index))
}
