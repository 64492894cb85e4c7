//! Shared fixtures for the kernel benchmarks.

use pae_core::paired::{PairSet, PairedModel};
use pae_core::rng::gaussian_sample;
use pae_core::{RngState, Tensor};

pub const IMG: usize = 16;
pub const DIM: usize = IMG * IMG;
pub const RANK: usize = 32;

pub fn desk_model(seed: u64) -> PairedModel {
    let mut rng = RngState::new(seed);
    PairedModel::mlp_default(DIM, DIM, RANK, RANK, &[256, 128], false, &mut rng).unwrap()
}

pub fn desk_batch(seed: u64, rows: usize) -> PairSet {
    let mut rng = RngState::new(seed);
    PairSet::new(
        gaussian_sample(&mut rng, &[rows, DIM], 0.4, 0.25).unwrap(),
        gaussian_sample(&mut rng, &[rows, DIM], 0.4, 0.25).unwrap(),
    )
    .unwrap()
}

pub fn random_square(seed: u64, n: usize) -> Tensor {
    let mut rng = RngState::new(seed);
    gaussian_sample(&mut rng, &[n, n], 0.0, 1.0).unwrap()
}
