//! Define-by-run reverse-mode differentiation.
//!
//! Each call on [`Tape`] evaluates an op eagerly and appends a node that
//! remembers its parents. [`Tape::backward`] walks the nodes in reverse
//! insertion order, which is a valid topological order by construction.
//! Nodes that do not depend on any trainable leaf carry no gradient and are
//! skipped, so frozen subnetworks cost nothing on the way back.

use crate::error::{Error, Result};

use super::ops::{self, PoolMode};
use super::Grid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv3d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: [usize; 3],
        padding: [usize; 3],
    },
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    GlobalPool {
        x: NodeId,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    ChannelPool {
        x: NodeId,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    ScaleChannels {
        x: NodeId,
        v: NodeId,
    },
    ScaleSpatial {
        x: NodeId,
        m: NodeId,
    },
    AddChannelBias {
        x: NodeId,
        v: NodeId,
    },
    Concat(Vec<NodeId>),
    Upsample {
        x: NodeId,
        src: Vec<usize>,
    },
    Sum(NodeId),
    Mean(NodeId),
    MeanAbs(NodeId),
    MeanSquare(NodeId),
    BceWithLogits {
        logit: NodeId,
        target: f64,
    },
    Kl {
        mu: NodeId,
        logvar: NodeId,
    },
    Reparam {
        mu: NodeId,
        logvar: NodeId,
        noise: Grid,
    },
}

struct Node {
    value: Grid,
    op: Op,
    requires_grad: bool,
}

/// Log-variance below which the reparameterisation scale is taken as zero.
pub const LOGVAR_FLOOR: f64 = -80.0;

/// Recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    differentiated: bool,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Grid>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Grid> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `id`, or zeros when nothing flowed into it.
    pub fn wrt(&self, id: NodeId) -> Grid {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Grid::zeros(&self.shapes[id.0]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Grid {
        &self.nodes[id.0].value
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: &Grid) -> NodeId {
        self.push(value.clone(), Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Grid) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Grid, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    pub fn conv3d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<NodeId> {
        let v = ops::conv3d(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            v,
            Op::Conv3d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::affine(self.value(x), self.value(w), self.value(b))?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(v, Op::Affine { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = ops::relu(self.value(x));
        let rg = self.rg(&[x]);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = ops::sigmoid(self.value(x));
        let rg = self.rg(&[x]);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn global_pool(&mut self, x: NodeId, mode: PoolMode) -> Result<NodeId> {
        let (v, argmax) = ops::global_pool_with_index(self.value(x), mode)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::GlobalPool { x, mode, argmax }, rg))
    }

    pub fn channel_pool(&mut self, x: NodeId, mode: PoolMode) -> Result<NodeId> {
        let (v, argmax) = ops::channel_pool_with_index(self.value(x), mode)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::ChannelPool { x, mode, argmax }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a).map(|x| x * k);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, k), rg)
    }

    /// Channel vector broadcast over space: `y[c, s] = x[c, s] * v[c]`.
    pub fn scale_channels(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let out = ops::scale_channels(self.value(x), self.value(v))?;
        let rg = self.rg(&[x, v]);
        Ok(self.push(out, Op::ScaleChannels { x, v }, rg))
    }

    /// Spatial map broadcast over channels: `y[c, s] = x[c, s] * m[0, s]`.
    pub fn scale_spatial(&mut self, x: NodeId, m: NodeId) -> Result<NodeId> {
        let out = ops::scale_spatial(self.value(x), self.value(m))?;
        let rg = self.rg(&[x, m]);
        Ok(self.push(out, Op::ScaleSpatial { x, m }, rg))
    }

    /// `y[c, s] = x[c, s] + v[c]`.
    pub fn add_channel_bias(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let c = xv.channels();
        let vv = self.value(v);
        if vv.shape() != [c] {
            return Err(Error::shape("add_channel_bias", format!("vector {:?} vs {c} channels", vv.shape())));
        }
        let s = xv.len() / c;
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, a)| a + vv.data()[i / s])
            .collect();
        let out = Grid::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, v]);
        Ok(self.push(out, Op::AddChannelBias { x, v }, rg))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let grids: Vec<&Grid> = parts.iter().map(|p| self.value(*p)).collect();
        let out = ops::concat_channels(&grids)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    pub fn upsample(&mut self, x: NodeId, target: [usize; 3]) -> Result<NodeId> {
        let (out, src) = ops::upsample_nearest_with_index(self.value(x), target)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Upsample { x, src }, rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Grid::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = Grid::scalar(self.value(x).mean());
        let rg = self.rg(&[x]);
        self.push(v, Op::Mean(x), rg)
    }

    /// Mean absolute value.
    pub fn mean_abs(&mut self, x: NodeId) -> NodeId {
        let g = self.value(x);
        let v = Grid::scalar(g.data().iter().map(|a| a.abs()).sum::<f64>() / g.len() as f64);
        let rg = self.rg(&[x]);
        self.push(v, Op::MeanAbs(x), rg)
    }

    /// Mean squared value.
    pub fn mean_square(&mut self, x: NodeId) -> NodeId {
        let g = self.value(x);
        let v = Grid::scalar(g.data().iter().map(|a| a * a).sum::<f64>() / g.len() as f64);
        let rg = self.rg(&[x]);
        self.push(v, Op::MeanSquare(x), rg)
    }

    /// Binary cross-entropy of a single logit against a 0/1 target.
    pub fn bce_with_logits(&mut self, logit: NodeId, target: f64) -> Result<NodeId> {
        let z = self.value(logit);
        if z.len() != 1 {
            return Err(Error::shape("bce_with_logits", format!("logit must be scalar, got {:?}", z.shape())));
        }
        let z = z.item();
        let loss = z.max(0.0) - z * target + (-z.abs()).exp().ln_1p();
        let rg = self.rg(&[logit]);
        Ok(self.push(Grid::scalar(loss), Op::BceWithLogits { logit, target }, rg))
    }

    /// Mean over elements of `½(μ² + e^{logvar} − 1 − logvar)`.
    pub fn kl_standard_normal(&mut self, mu: NodeId, logvar: NodeId) -> Result<NodeId> {
        let m = self.value(mu);
        let l = self.value(logvar);
        m.expect_same_shape(l, "kl")?;
        let n = m.len() as f64;
        let s: f64 = m
            .data()
            .iter()
            .zip(l.data())
            .map(|(a, b)| 0.5 * (a * a + b.exp() - 1.0 - b))
            .sum();
        let rg = self.rg(&[mu, logvar]);
        Ok(self.push(Grid::scalar(s / n), Op::Kl { mu, logvar }, rg))
    }

    /// `z = μ + exp(logvar / 2) ⊙ noise`, with the scale forced to zero below
    /// [`LOGVAR_FLOOR`].
    pub fn reparameterize(&mut self, mu: NodeId, logvar: NodeId, noise: Grid) -> Result<NodeId> {
        let m = self.value(mu);
        let l = self.value(logvar);
        m.expect_same_shape(l, "reparameterize")?;
        m.expect_same_shape(&noise, "reparameterize")?;
        let data = m
            .data()
            .iter()
            .zip(l.data())
            .zip(noise.data())
            .map(|((a, b), e)| a + reparam_scale(*b) * e)
            .collect();
        let out = Grid::new(m.shape().to_vec(), data)?;
        let rg = self.rg(&[mu, logvar]);
        Ok(self.push(out, Op::Reparam { mu, logvar, noise }, rg))
    }

    /// Fingerprint of every non-smooth decision made during the forward pass:
    /// relu activation patterns and max-reduction winners. Two evaluations
    /// with equal signatures lie on the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.nodes[x.0].value.data() {
                        mix((*v > 0.0) as u64);
                    }
                }
                Op::GlobalPool { argmax, .. } | Op::ChannelPool { argmax, .. } => {
                    for &i in argmax {
                        mix(i as u64 + 2);
                    }
                }
                _ => {}
            }
        }
        h
    }

    /// Propagates d(root)/d(node) to every node that depends on a trainable
    /// leaf. The root must hold a single value; a tape can be differentiated
    /// only once.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients> {
        if self.differentiated {
            return Err(Error::AlreadyDifferentiated);
        }
        let root_shape = self.value(root).shape().to_vec();
        if root_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarRoot(root_shape));
        }
        self.differentiated = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Grid>> = vec![None; n];
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Grid::full(&root_shape, 1.0));
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &Grid, grads: &mut [Option<Grid>]) -> Result<()> {
        let node = &self.nodes[i];
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let val = |id: NodeId| &self.nodes[id.0].value;
        let mut acc = |id: NodeId, contrib: Grid| -> Result<()> {
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&contrib),
                slot => {
                    *slot = Some(contrib);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let r = ops::conv3d_backward(
                    val(*input),
                    val(*kernel),
                    g,
                    *stride,
                    *padding,
                    needs(*input),
                    needs(*kernel),
                )?;
                if let Some(gi) = r.input {
                    acc(*input, gi)?;
                }
                if let Some(gk) = r.kernel {
                    acc(*kernel, gk)?;
                }
                if let Some(b) = bias {
                    if needs(*b) {
                        acc(*b, r.bias)?;
                    }
                }
            }
            Op::Affine { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (m, n) = (wv.shape()[0], wv.shape()[1]);
                let gy = g.data();
                if needs(*x) {
                    let mut gx = vec![0.0; n];
                    for r in 0..m {
                        for (c, t) in gx.iter_mut().enumerate() {
                            *t += wv.data()[r * n + c] * gy[r];
                        }
                    }
                    acc(*x, Grid::new(xv.shape().to_vec(), gx)?)?;
                }
                if needs(*w) {
                    let gw = Grid::from_fn(&[m, n], |k| gy[k / n] * xv.data()[k % n]);
                    acc(*w, gw)?;
                }
                if needs(*b) {
                    acc(*b, g.clone())?;
                }
            }
            Op::Relu(x) => {
                let gx = val(*x).zip_map(g, |a, gv| if a > 0.0 { gv } else { 0.0 })?;
                acc(*x, gx)?;
            }
            Op::Sigmoid(x) => {
                let gx = node.value.zip_map(g, |s, gv| gv * s * (1.0 - s))?;
                acc(*x, gx)?;
            }
            Op::GlobalPool { x, mode, argmax } => {
                let xv = val(*x);
                let c = xv.channels();
                let s = xv.len() / c;
                let mut gx = Grid::zeros(xv.shape());
                let d = gx.data_mut();
                for ch in 0..c {
                    match mode {
                        PoolMode::Avg => {
                            let v = g.data()[ch] / s as f64;
                            d[ch * s..(ch + 1) * s].fill(v);
                        }
                        PoolMode::Max => d[ch * s + argmax[ch]] = g.data()[ch],
                    }
                }
                acc(*x, gx)?;
            }
            Op::ChannelPool { x, mode, argmax } => {
                let xv = val(*x);
                let c = xv.channels();
                let s = xv.len() / c;
                let mut gx = Grid::zeros(xv.shape());
                let d = gx.data_mut();
                match mode {
                    PoolMode::Avg => {
                        for ch in 0..c {
                            for j in 0..s {
                                d[ch * s + j] = g.data()[j] / c as f64;
                            }
                        }
                    }
                    PoolMode::Max => {
                        for j in 0..s {
                            d[argmax[j] * s + j] = g.data()[j];
                        }
                    }
                }
                acc(*x, gx)?;
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone())?;
                }
                if needs(*b) {
                    acc(*b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone())?;
                }
                if needs(*b) {
                    acc(*b, g.map(|v| -v))?;
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.zip_map(val(*b), |gv, y| gv * y)?)?;
                }
                if needs(*b) {
                    acc(*b, g.zip_map(val(*a), |gv, y| gv * y)?)?;
                }
            }
            Op::Scale(a, k) => acc(*a, g.map(|v| v * k))?,
            Op::ScaleChannels { x, v } => {
                let (xv, vv) = (val(*x), val(*v));
                let c = xv.channels();
                let s = xv.len() / c;
                if needs(*x) {
                    acc(*x, ops::scale_channels(g, vv)?)?;
                }
                if needs(*v) {
                    let gv = Grid::from_fn(&[c], |ch| {
                        g.data()[ch * s..(ch + 1) * s]
                            .iter()
                            .zip(&xv.data()[ch * s..(ch + 1) * s])
                            .map(|(a, b)| a * b)
                            .sum()
                    });
                    acc(*v, gv)?;
                }
            }
            Op::ScaleSpatial { x, m } => {
                let (xv, mv) = (val(*x), val(*m));
                let c = xv.channels();
                let s = xv.len() / c;
                if needs(*x) {
                    acc(*x, ops::scale_spatial(g, mv)?)?;
                }
                if needs(*m) {
                    let mut gm = vec![0.0; s];
                    for ch in 0..c {
                        for j in 0..s {
                            gm[j] += g.data()[ch * s + j] * xv.data()[ch * s + j];
                        }
                    }
                    acc(*m, Grid::new(mv.shape().to_vec(), gm)?)?;
                }
            }
            Op::AddChannelBias { x, v } => {
                let c = val(*x).channels();
                let s = g.len() / c;
                if needs(*x) {
                    acc(*x, g.clone())?;
                }
                if needs(*v) {
                    acc(*v, Grid::from_fn(&[c], |ch| g.data()[ch * s..(ch + 1) * s].iter().sum()))?;
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = val(*p).len();
                    if needs(*p) {
                        let part = Grid::new(val(*p).shape().to_vec(), g.data()[off..off + len].to_vec())?;
                        acc(*p, part)?;
                    }
                    off += len;
                }
            }
            Op::Upsample { x, src } => {
                let xv = val(*x);
                let c = xv.channels();
                let isz = xv.len() / c;
                let osz = src.len();
                let mut gx = vec![0.0; xv.len()];
                for ch in 0..c {
                    for (o, &s) in src.iter().enumerate() {
                        gx[ch * isz + s] += g.data()[ch * osz + o];
                    }
                }
                acc(*x, Grid::new(xv.shape().to_vec(), gx)?)?;
            }
            Op::Sum(x) => acc(*x, Grid::full(val(*x).shape(), g.item()))?,
            Op::Mean(x) => {
                let xv = val(*x);
                acc(*x, Grid::full(xv.shape(), g.item() / xv.len() as f64))?;
            }
            Op::MeanAbs(x) => {
                let xv = val(*x);
                let k = g.item() / xv.len() as f64;
                acc(*x, xv.map(|a| if a > 0.0 { k } else if a < 0.0 { -k } else { 0.0 }))?;
            }
            Op::MeanSquare(x) => {
                let xv = val(*x);
                let k = 2.0 * g.item() / xv.len() as f64;
                acc(*x, xv.map(|a| k * a))?;
            }
            Op::BceWithLogits { logit, target } => {
                let z = val(*logit).item();
                acc(*logit, Grid::new(val(*logit).shape().to_vec(), vec![g.item() * (ops::sigmoid_scalar(z) - target)])?)?;
            }
            Op::Kl { mu, logvar } => {
                let (m, l) = (val(*mu), val(*logvar));
                let k = g.item() / m.len() as f64;
                if needs(*mu) {
                    acc(*mu, m.map(|a| k * a))?;
                }
                if needs(*logvar) {
                    acc(*logvar, l.map(|b| 0.5 * k * (b.exp() - 1.0)))?;
                }
            }
            Op::Reparam { mu, logvar, noise } => {
                if needs(*mu) {
                    acc(*mu, g.clone())?;
                }
                if needs(*logvar) {
                    let l = val(*logvar);
                    let data = g
                        .data()
                        .iter()
                        .zip(l.data())
                        .zip(noise.data())
                        .map(|((gv, b), e)| gv * e * 0.5 * reparam_scale(*b))
                        .collect();
                    acc(*logvar, Grid::new(l.shape().to_vec(), data)?)?;
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn reparam_scale(logvar: f64) -> f64 {
    if logvar < LOGVAR_FLOOR {
        0.0
    } else {
        (0.5 * logvar).exp()
    }
}
