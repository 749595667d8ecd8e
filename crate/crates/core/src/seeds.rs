//! Seed derivation: every random stream of a run comes from the run seed
//! mixed with a fixed per-purpose tag.

pub const TEACHER_INIT: u64 = 1;
pub const TEACHER_STREAM: u64 = 2;
pub const DISC_INIT: u64 = 3;
pub const DISTILL_STREAM: u64 = 4;
pub const EVAL_NOISE: u64 = 5;
pub const EVAL_REAL: u64 = 6;
pub const EVAL_PROJECTIONS: u64 = 7;
pub const EVAL_HELDOUT: u64 = 8;

/// SplitMix64 finalizer over `seed` and `tag`.
pub fn derive(seed: u64, tag: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
