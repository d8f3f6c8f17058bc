//! Splittable deterministic seeds.
//!
//! A [`SeedKey`] is a 64-bit value that can be split by a label into child
//! keys; the resulting streams are independent for practical purposes and
//! reproducible from the root seed and the path of labels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedKey(u64);

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeedKey {
    pub fn new(seed: u64) -> Self {
        SeedKey(mix(seed))
    }

    pub fn split(self, label: u64) -> Self {
        SeedKey(mix(self.0 ^ mix(label.wrapping_add(0x5851_F42D_4C95_7F2D))))
    }

    /// Split by a string label.
    pub fn named(self, label: &str) -> Self {
        let h = label
            .bytes()
            .fold(0xCBF2_9CE4_8422_2325u64, |h, b| {
                (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
            });
        self.split(h)
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}
