//! Shared fixtures for the criterion benches.

use pnigen_core::cohort::{generate_phantom, Case, PhantomConfig};
use pnigen_core::metrics::GaussianSummary;
use pnigen_core::rng::stream;
use pnigen_core::Grid;

pub fn randn(shape: &[usize], seed: u64) -> Grid {
    Grid::randn(shape, &mut stream(seed))
}

pub fn phantom(dims: [usize; 3], seed: u64) -> Case {
    generate_phantom("bench", seed, 1, dims, &PhantomConfig::default()).expect("phantom fixture")
}

/// Gaussian summary fitted to `n` random feature vectors of width `d`.
pub fn summary(d: usize, n: usize, seed: u64) -> GaussianSummary {
    let g = randn(&[n, d], seed);
    let rows: Vec<Vec<f64>> = g.data().chunks(d).map(<[f64]>::to_vec).collect();
    GaussianSummary::fit(&rows).expect("summary fixture")
}
