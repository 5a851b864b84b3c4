//! Shared fixtures for the criterion benches.

use eedlab_core::io::{synthesize_dataset, SynthKind};
use eedlab_core::{circular_mask, FiniteGroup, Tensor};

/// `count` masked blob images of side `side`, seeded.
pub fn images(count: usize, side: usize, seed: u64) -> Vec<Tensor> {
    synthesize_dataset(SynthKind::GaussianBlobs, count, side, 4, seed)
        .expect("valid synthetic parameters")
        .images
        .iter()
        .map(|x| circular_mask(x).expect("square image"))
        .collect()
}

pub fn c4() -> FiniteGroup {
    FiniteGroup::cyclic(4).expect("n > 0")
}

pub fn c8() -> FiniteGroup {
    FiniteGroup::cyclic(8).expect("n > 0")
}
