//! Seed bookkeeping: one global seed fans out to every random stream of a run.
//!
//! Each stream is identified by a static tag and an index; the derived seed is
//! `splitmix64(global ^ splitmix64(fnv1a(tag) + index))`, so streams never depend on the order
//! in which they are requested.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// One round of the SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xCBF2_9CE4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3))
}

/// Seed for stream `(tag, index)` under `global`.
pub fn derive(global: u64, tag: &str, index: u64) -> u64 {
    splitmix64(global ^ splitmix64(fnv1a(tag).wrapping_add(index)))
}

/// Stream tags used across the pipeline.
pub mod tags {
    pub const SPLIT: &str = "split";
    pub const NDM_MEMBER: &str = "ndm-member";
    pub const UDM_MEMBER: &str = "udm-member";
    pub const SYNTH: &str = "synthesis";
    pub const ASR_INIT: &str = "asr-init";
    pub const ASR_SHUFFLE: &str = "asr-shuffle";
    pub const TOY: &str = "toy";
}
