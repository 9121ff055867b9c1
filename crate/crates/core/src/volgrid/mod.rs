//! Dense row-major grids with a small reverse-mode differentiation tape.
//!
//! Everything numeric in the crate is built from [`Grid`] values. Pure
//! forward kernels live in [`ops`]; [`Tape`] records the same kernels and
//! replays their vector-Jacobian products in reverse. [`grad_check`]
//! compares those gradients against central finite differences.

pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod tape;

use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, GradCheckConfig, GradReport};
pub use layers::{Conv3d, Linear, Parameterized};
pub use ops::PoolMode;
pub use optim::{AdamW, AdamWConfig};
pub use tape::{Gradients, NodeId, Tape};

/// A dense N-D scalar grid in row-major order.
///
/// The product of `shape` always equals `data.len()` and every extent is at
/// least one.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        validate_shape(&shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "grid",
                format!("shape {shape:?} holds {n} values, buffer has {}", data.len()),
            ));
        }
        Ok(Grid { shape, data })
    }

    /// Panics on an invalid shape; intended for shapes built from constants.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        validate_shape(shape).expect("invalid grid shape");
        let n = shape.iter().product();
        Grid {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Grid {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len().max(1);
        let data = if data.is_empty() { vec![0.0] } else { data };
        Grid {
            shape: vec![n],
            data,
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        validate_shape(shape).expect("invalid grid shape");
        let n: usize = shape.iter().product();
        Grid {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    /// Standard normal entries drawn from `rng`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.sample(StandardNormal))
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element grid.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Grid, f: impl Fn(f64, f64) -> f64) -> Result<Grid> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Grid {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Grid) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Grid) -> Result<f64> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Number of leading channels for `[C, ...]` grids.
    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    /// Spatial extents `[D, H, W]` of a `[C, D, H, W]` grid.
    pub fn spatial(&self) -> Result<[usize; 3]> {
        match self.shape.as_slice() {
            [_, d, h, w] => Ok([*d, *h, *w]),
            s => Err(Error::shape("spatial", format!("expected [C, D, H, W], got {s:?}"))),
        }
    }

    /// One channel of a `[C, ...]` grid as a slice.
    pub fn channel(&self, c: usize) -> &[f64] {
        let stride = self.data.len() / self.shape[0];
        &self.data[c * stride..(c + 1) * stride]
    }

    /// One channel of a `[C, D, H, W]` grid as a `[D, H, W]` grid.
    pub fn channel_grid(&self, c: usize) -> Result<Grid> {
        let spatial = self.spatial()?;
        if c >= self.shape[0] {
            return Err(Error::shape("channel_grid", format!("channel {c} of {}", self.shape[0])));
        }
        Grid::new(spatial.to_vec(), self.channel(c).to_vec())
    }

    /// SHA-256 over shape and little-endian data bytes.
    pub fn digest_into(&self, hasher: &mut Sha256) {
        for &s in &self.shape {
            hasher.update((s as u64).to_le_bytes());
        }
        for v in &self.data {
            hasher.update(v.to_le_bytes());
        }
    }

    pub(crate) fn expect_same_shape(&self, other: &Grid, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::shape("grid", "shape must have at least one axis"));
    }
    if let Some(axis) = shape.iter().position(|&s| s == 0) {
        return Err(Error::shape("grid", format!("axis {axis} has zero extent")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_buffer() {
        assert!(Grid::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Grid::new(vec![2, 0], vec![]).is_err());
        assert!(Grid::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn reshape_preserves_data() {
        let g = Grid::from_fn(&[2, 3], |i| i as f64);
        let r = g.clone().reshape(&[3, 2]).unwrap();
        assert_eq!(r.data(), g.data());
        assert!(g.reshape(&[4]).is_err());
    }
}
