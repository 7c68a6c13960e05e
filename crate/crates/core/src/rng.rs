//! Seeded, stream-addressed randomness.
//!
//! Every random quantity in the crate is drawn from a ChaCha8 generator
//! addressed by `(seed, purpose, index)`. Streams are independent, so e.g.
//! sample `i` of a dataset or the initializer of one named parameter can be
//! regenerated in isolation, and adding a consumer never shifts the draws of
//! another. This is what makes builds, datasets, and training runs
//! bit-reproducible.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream namespaces. The purpose tag occupies the top 16 bits of the ChaCha
/// stream id, the index the low 48.
#[derive(Clone, Copy, Debug)]
pub enum StreamKind {
    /// Per-class glyph patterns and colors.
    Glyph,
    /// Per-sample dataset content (patch position, background noise).
    Sample,
    /// Per-parameter initialization, indexed by registration order.
    ParamInit,
    /// Per-epoch batch shuffling.
    Shuffle,
    /// Per-(epoch, sample) augmentation draws.
    Augment,
    /// Test-side randomness (oracle instances, property draws).
    Test,
}

impl StreamKind {
    fn tag(self) -> u64 {
        match self {
            StreamKind::Glyph => 1,
            StreamKind::Sample => 2,
            StreamKind::ParamInit => 3,
            StreamKind::Shuffle => 4,
            StreamKind::Augment => 5,
            StreamKind::Test => 6,
        }
    }
}

/// Generator for stream `(kind, index)` under `seed`.
pub fn stream(seed: u64, kind: StreamKind, index: u64) -> ChaCha8Rng {
    debug_assert!(index < 1 << 48);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(kind.tag() << 48 | index);
    rng
}

/// Uniform draw in [0, 1) with 53 bits of resolution.
pub fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal draw (Box-Muller; consumes two uniforms).
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    use num_traits::Float;
    let u1 = loop {
        let u = uniform(rng);
        if u > 0.0 {
            break u;
        }
    };
    let u2 = uniform(rng);
    let r = Float::sqrt(-2.0 * Float::ln(u1));
    r * Float::cos(2.0 * core::f64::consts::PI * u2)
}

/// Uniform integer in [0, bound).
pub fn below(rng: &mut ChaCha8Rng, bound: usize) -> usize {
    debug_assert!(bound > 0);
    rng.gen_range(0..bound)
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i + 1);
        items.swap(i, j);
    }
}
