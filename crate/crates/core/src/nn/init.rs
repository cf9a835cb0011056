use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

use super::conv::LayerParams;

/// Seeded generator used for all weight initialisation.
pub fn rng(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}

/// Kaiming-uniform (fan-in, ReLU gain) weights and zero bias.
pub fn kaiming_uniform(p: &mut LayerParams, rng: &mut SplitMix64) {
    let bound = (6.0 / p.fan_in() as f64).sqrt();
    for w in p.weight.data_mut() {
        *w = rng.random_range(-bound..bound);
    }
    p.bias.data_mut().fill(0.0);
}
