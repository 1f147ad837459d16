//! Deterministic seed derivation: a master seed combined with labelled
//! coordinates (step, item, sweep cell, ...) through SplitMix64 mixing.

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a hash of a label, so string tags can join a derivation.
pub fn tag(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3))
}

pub fn derive(master: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(master), |h, &p| mix(h ^ mix(p)))
}
