//! Fixtures shared by the benchmarks.

use popnet_core::grid::{BinaryMask, Grid};
use popnet_core::nn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Values in `[0.05, 0.95)`, away from the clamps.
pub fn random_grid(rng: &mut impl Rng, h: usize, w: usize) -> Grid<f32> {
    Grid::from_fn(h, w, |_, _| rng.random_range(0.05..0.95))
}

/// Rectangle covering the middle of the frame.
pub fn centre_mask(h: usize, w: usize) -> BinaryMask {
    BinaryMask::from_fn(h, w, |y, x| (h / 4..3 * h / 4).contains(&y) && (w / 3..2 * w / 3).contains(&x))
}

pub fn random_tensor(rng: &mut impl Rng, shape: [usize; 4]) -> Tensor {
    let data = (0..shape.iter().product()).map(|_| rng.random::<f32>()).collect();
    Tensor::from_vec(shape, data).expect("shape matches data")
}
