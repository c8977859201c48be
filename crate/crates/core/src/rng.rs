//! Named random streams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Seed for the stream `name` under `root`.
pub fn derive_seed(root: u64, name: &str) -> u64 {
    splitmix(splitmix(root) ^ fnv1a(name))
}

pub fn stream(root: u64, name: &str) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(root, name))
}

/// Stream `name` at position `index` (a training step, an epoch, ...).
/// Lets a resumed run pick up exactly where it left off.
pub fn stream_at(root: u64, name: &str, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(splitmix(derive_seed(root, name) ^ splitmix(index)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_stable_and_distinct() {
        let a: u64 = stream(1, "data").gen();
        assert_eq!(a, stream(1, "data").gen::<u64>());
        assert_ne!(a, stream(1, "dropout").gen::<u64>());
        assert_ne!(a, stream(2, "data").gen::<u64>());
        assert_ne!(stream_at(1, "data", 0).gen::<u64>(), stream_at(1, "data", 1).gen::<u64>());
    }
}
