//! Every random stream in a run is derived from one user seed.
//!
//! A subsystem stream is `mix(seed ^ OFFSET, step, index)`, so any step can
//! be replayed without carrying generator state across a resume.

pub const INIT: u64 = 0x0100_0000;
pub const DATA_ORDER: u64 = 0x0200_0000;
pub const AUGMENT: u64 = 0x0300_0000;
pub const MASKING: u64 = 0x0400_0000;
pub const SYNTH: u64 = 0x0500_0000;
pub const EVAL: u64 = 0x0600_0000;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, offset: u64, step: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(seed ^ offset) ^ step) ^ index)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_differ() {
        let a = derive(7, MASKING, 3, 0);
        assert_eq!(a, derive(7, MASKING, 3, 0));
        assert_ne!(a, derive(7, AUGMENT, 3, 0));
        assert_ne!(a, derive(7, MASKING, 4, 0));
        assert_ne!(a, derive(7, MASKING, 3, 1));
        assert_ne!(a, derive(8, MASKING, 3, 0));
    }
}
