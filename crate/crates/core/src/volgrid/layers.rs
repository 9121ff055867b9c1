//! Parameterised building blocks and the [`Parameterized`] trait that
//! ties a model's tensors to optimizers, checkpoints and checksums.

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::Result;

use super::tape::{Gradients, NodeId, Tape};
use super::Grid;

/// A model that exposes its tensors in one fixed order.
///
/// `named_params`, `params_mut` and the node list of the model's bound form
/// must all enumerate tensors in the same order.
pub trait Parameterized {
    fn named_params(&self) -> Vec<(String, &Grid)>;
    fn params_mut(&mut self) -> Vec<&mut Grid>;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, g)| g.len()).sum()
    }

    /// SHA-256 over names, shapes and values of every tensor.
    fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, g) in self.named_params() {
            h.update(name.as_bytes());
            g.digest_into(&mut h);
        }
        h.finalize().into()
    }
}

/// Collects gradients for `ids` from a finished backward pass.
pub fn gather_grads(grads: &Gradients, ids: &[NodeId]) -> Vec<Grid> {
    ids.iter().map(|id| grads.wrt(*id)).collect()
}

/// Cubic-kernel 3D convolution layer with isotropic stride and padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3d {
    pub kernel: Grid,
    pub bias: Grid,
    pub stride: usize,
    pub padding: usize,
}

/// Tape handles of a bound [`Conv3d`].
#[derive(Clone, Copy, Debug)]
pub struct ConvNodes {
    pub kernel: NodeId,
    pub bias: NodeId,
    stride: usize,
    padding: usize,
}

impl Conv3d {
    /// Uniform init in `±1/sqrt(fan_in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((cin * k * k * k) as f64).sqrt();
        Conv3d {
            kernel: Grid::uniform(&[cout, cin, k, k, k], -bound, bound, rng),
            bias: Grid::zeros(&[cout]),
            stride,
            padding,
        }
    }

    pub fn zeros(cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> Self {
        Conv3d {
            kernel: Grid::zeros(&[cout, cin, k, k, k]),
            bias: Grid::zeros(&[cout]),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn bind(&self, t: &mut Tape, trainable: bool) -> ConvNodes {
        let (kernel, bias) = if trainable {
            (t.param(&self.kernel), t.param(&self.bias))
        } else {
            (t.constant(self.kernel.clone()), t.constant(self.bias.clone()))
        };
        ConvNodes {
            kernel,
            bias,
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn forward(&self, x: &Grid) -> Result<Grid> {
        super::ops::conv3d(x, &self.kernel, Some(&self.bias), [self.stride; 3], [self.padding; 3])
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Grid)> {
        vec![
            (format!("{prefix}.kernel"), &self.kernel),
            (format!("{prefix}.bias"), &self.bias),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Grid> {
        vec![&mut self.kernel, &mut self.bias]
    }
}

impl ConvNodes {
    pub fn apply(&self, t: &mut Tape, x: NodeId) -> Result<NodeId> {
        t.conv3d(x, self.kernel, Some(self.bias), [self.stride; 3], [self.padding; 3])
    }

    pub fn ids(&self) -> [NodeId; 2] {
        [self.kernel, self.bias]
    }
}

/// Fully connected layer `y = W x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Grid,
    pub bias: Grid,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearNodes {
    pub weight: NodeId,
    pub bias: NodeId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Linear {
            weight: Grid::uniform(&[outputs, inputs], -bound, bound, rng),
            bias: Grid::zeros(&[outputs]),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: Grid::zeros(&[outputs, inputs]),
            bias: Grid::zeros(&[outputs]),
        }
    }

    pub fn bind(&self, t: &mut Tape, trainable: bool) -> LinearNodes {
        let (weight, bias) = if trainable {
            (t.param(&self.weight), t.param(&self.bias))
        } else {
            (t.constant(self.weight.clone()), t.constant(self.bias.clone()))
        };
        LinearNodes { weight, bias }
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Grid)> {
        vec![
            (format!("{prefix}.weight"), &self.weight),
            (format!("{prefix}.bias"), &self.bias),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Grid> {
        vec![&mut self.weight, &mut self.bias]
    }
}

impl LinearNodes {
    pub fn apply(&self, t: &mut Tape, x: NodeId) -> Result<NodeId> {
        t.affine(x, self.weight, self.bias)
    }

    pub fn ids(&self) -> [NodeId; 2] {
        [self.weight, self.bias]
    }
}
