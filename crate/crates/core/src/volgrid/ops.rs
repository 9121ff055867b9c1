//! Forward kernels and their vector-Jacobian products.
//!
//! Convolutions use the cross-correlation convention (no kernel flip).
//! Max reductions resolve ties to the first index in row-major order, and
//! their gradients route to that index.

use crate::error::{Error, Result};

use super::Grid;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

const AXES: [&str; 3] = ["depth", "height", "width"];

/// Output extent of one convolution axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Range of output positions `o` for which `o * stride + k - padding` lands
/// inside `[0, input)`.
#[inline]
fn valid_range(k: usize, stride: usize, padding: usize, input: usize, out: usize) -> (usize, usize) {
    // o * stride + k >= padding
    let lo = if k >= padding {
        0
    } else {
        (padding - k).div_ceil(stride)
    };
    // o * stride + k - padding <= input - 1
    let hi = if input + padding < k + 1 {
        0
    } else {
        ((input + padding - k - 1) / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

struct ConvGeom {
    cin: usize,
    cout: usize,
    ins: [usize; 3],
    ks: [usize; 3],
    outs: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
}

impl ConvGeom {
    fn new(input: &Grid, kernel: &Grid, stride: [usize; 3], padding: [usize; 3]) -> Result<Self> {
        let ins = input.spatial().map_err(|_| {
            Error::shape("conv3d", format!("input must be [Cin, D, H, W], got {:?}", input.shape()))
        })?;
        let (cout, kcin, ks) = match kernel.shape() {
            [co, ci, kd, kh, kw] => (*co, *ci, [*kd, *kh, *kw]),
            s => {
                return Err(Error::shape(
                    "conv3d",
                    format!("kernel must be [Cout, Cin, kd, kh, kw], got {s:?}"),
                ))
            }
        };
        let cin = input.channels();
        if kcin != cin {
            return Err(Error::shape(
                "conv3d",
                format!("channel axis: input has {cin} channels, kernel expects {kcin}"),
            ));
        }
        let mut outs = [0; 3];
        for a in 0..3 {
            if stride[a] == 0 {
                return Err(Error::shape("conv3d", format!("{} stride must be >= 1", AXES[a])));
            }
            if ks[a] > ins[a] + 2 * padding[a] {
                return Err(Error::shape(
                    "conv3d",
                    format!(
                        "{} axis: kernel extent {} exceeds padded input extent {}",
                        AXES[a],
                        ks[a],
                        ins[a] + 2 * padding[a]
                    ),
                ));
            }
            outs[a] = conv_out_extent(ins[a], ks[a], stride[a], padding[a]);
        }
        Ok(ConvGeom {
            cin,
            cout,
            ins,
            ks,
            outs,
            stride,
            padding,
        })
    }

    fn in_len(&self) -> usize {
        self.ins.iter().product()
    }

    fn out_len(&self) -> usize {
        self.outs.iter().product()
    }

    fn k_len(&self) -> usize {
        self.ks.iter().product()
    }

    fn ranges(&self, kd: usize, kh: usize, kw: usize) -> [(usize, usize); 3] {
        let k = [kd, kh, kw];
        std::array::from_fn(|a| valid_range(k[a], self.stride[a], self.padding[a], self.ins[a], self.outs[a]))
    }

    /// Visits every (output offset, input offset) pair contributing through
    /// kernel tap `(kd, kh, kw)`, one contiguous width run at a time.
    #[inline]
    fn for_each_row(
        &self,
        kd: usize,
        kh: usize,
        kw: usize,
        mut f: impl FnMut(usize, usize, usize),
    ) {
        let [(d0, d1), (h0, h1), (w0, w1)] = self.ranges(kd, kh, kw);
        if w0 >= w1 {
            return;
        }
        let [_, ih, iw] = self.ins;
        let [_, oh, ow] = self.outs;
        for od in d0..d1 {
            let id = od * self.stride[0] + kd - self.padding[0];
            for ohh in h0..h1 {
                let ihh = ohh * self.stride[1] + kh - self.padding[1];
                let obase = (od * oh + ohh) * ow + w0;
                let ibase = (id * ih + ihh) * iw + w0 * self.stride[2] + kw - self.padding[2];
                f(obase, ibase, w1 - w0);
            }
        }
    }
}

/// 3D cross-correlation of `input [Cin, D, H, W]` with `kernel [Cout, Cin,
/// kd, kh, kw]`, plus an optional per-output-channel bias.
pub fn conv3d(
    input: &Grid,
    kernel: &Grid,
    bias: Option<&Grid>,
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<Grid> {
    let g = ConvGeom::new(input, kernel, stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::shape(
                "conv3d",
                format!("bias must be [{}], got {:?}", g.cout, b.shape()),
            ));
        }
    }
    let (isz, osz, ksz) = (g.in_len(), g.out_len(), g.k_len());
    let sw = g.stride[2];
    let mut out = vec![0.0; g.cout * osz];
    let x = input.data();
    let k = kernel.data();
    for co in 0..g.cout {
        let oc = &mut out[co * osz..(co + 1) * osz];
        if let Some(b) = bias {
            oc.fill(b.data()[co]);
        }
        for ci in 0..g.cin {
            let xc = &x[ci * isz..(ci + 1) * isz];
            let kc = &k[(co * g.cin + ci) * ksz..(co * g.cin + ci + 1) * ksz];
            for kd in 0..g.ks[0] {
                for kh in 0..g.ks[1] {
                    for kw in 0..g.ks[2] {
                        let w = kc[(kd * g.ks[1] + kh) * g.ks[2] + kw];
                        g.for_each_row(kd, kh, kw, |ob, ib, n| {
                            let orow = &mut oc[ob..ob + n];
                            if sw == 1 {
                                for (o, xi) in orow.iter_mut().zip(&xc[ib..ib + n]) {
                                    *o += w * xi;
                                }
                            } else {
                                for (j, o) in orow.iter_mut().enumerate() {
                                    *o += w * xc[ib + j * sw];
                                }
                            }
                        });
                    }
                }
            }
        }
    }
    let [d, h, w] = g.outs;
    Grid::new(vec![g.cout, d, h, w], out)
}

/// Gradients of [`conv3d`] with respect to input, kernel and bias.
pub struct Conv3dGrads {
    pub input: Option<Grid>,
    pub kernel: Option<Grid>,
    pub bias: Grid,
}

pub fn conv3d_backward(
    input: &Grid,
    kernel: &Grid,
    grad_out: &Grid,
    stride: [usize; 3],
    padding: [usize; 3],
    need_input: bool,
    need_kernel: bool,
) -> Result<Conv3dGrads> {
    let g = ConvGeom::new(input, kernel, stride, padding)?;
    let (isz, osz, ksz) = (g.in_len(), g.out_len(), g.k_len());
    let sw = g.stride[2];
    let x = input.data();
    let k = kernel.data();
    let go = grad_out.data();
    let mut gin = need_input.then(|| vec![0.0; g.cin * isz]);
    let mut gk = need_kernel.then(|| vec![0.0; g.cout * g.cin * ksz]);
    let bias: Vec<f64> = (0..g.cout).map(|co| go[co * osz..(co + 1) * osz].iter().sum()).collect();
    for co in 0..g.cout {
        let gc = &go[co * osz..(co + 1) * osz];
        for ci in 0..g.cin {
            let xc = &x[ci * isz..(ci + 1) * isz];
            let kbase = (co * g.cin + ci) * ksz;
            for kd in 0..g.ks[0] {
                for kh in 0..g.ks[1] {
                    for kw in 0..g.ks[2] {
                        let kidx = kbase + (kd * g.ks[1] + kh) * g.ks[2] + kw;
                        if let Some(gi) = gin.as_mut() {
                            let w = k[kidx];
                            let gic = &mut gi[ci * isz..(ci + 1) * isz];
                            g.for_each_row(kd, kh, kw, |ob, ib, n| {
                                if sw == 1 {
                                    for (t, gv) in gic[ib..ib + n].iter_mut().zip(&gc[ob..ob + n]) {
                                        *t += w * gv;
                                    }
                                } else {
                                    for j in 0..n {
                                        gic[ib + j * sw] += w * gc[ob + j];
                                    }
                                }
                            });
                        }
                        if let Some(gkk) = gk.as_mut() {
                            let mut acc = 0.0;
                            g.for_each_row(kd, kh, kw, |ob, ib, n| {
                                if sw == 1 {
                                    acc += gc[ob..ob + n]
                                        .iter()
                                        .zip(&xc[ib..ib + n])
                                        .map(|(a, b)| a * b)
                                        .sum::<f64>();
                                } else {
                                    for j in 0..n {
                                        acc += gc[ob + j] * xc[ib + j * sw];
                                    }
                                }
                            });
                            gkk[kidx] += acc;
                        }
                    }
                }
            }
        }
    }
    Ok(Conv3dGrads {
        input: gin.map(|v| Grid::new(input.shape().to_vec(), v)).transpose()?,
        kernel: gk.map(|v| Grid::new(kernel.shape().to_vec(), v)).transpose()?,
        bias: Grid::new(vec![g.cout], bias)?,
    })
}

/// Per-channel reduction over all voxels of a `[C, ...]` grid. Returns the
/// reduced `[C]` grid and, for max mode, the flat index of the first
/// maximum within each channel.
pub fn global_pool_with_index(input: &Grid, mode: PoolMode) -> Result<(Grid, Vec<usize>)> {
    if input.shape().len() < 2 {
        return Err(Error::shape("global_pool", format!("expected [C, ...], got {:?}", input.shape())));
    }
    let c = input.channels();
    let mut out = Vec::with_capacity(c);
    let mut idx = Vec::new();
    for ch in 0..c {
        let v = input.channel(ch);
        match mode {
            PoolMode::Avg => out.push(v.iter().sum::<f64>() / v.len() as f64),
            PoolMode::Max => {
                let (i, m) = first_max(v.iter().copied());
                out.push(m);
                idx.push(i);
            }
        }
    }
    Ok((Grid::new(vec![c], out)?, idx))
}

pub fn global_pool(input: &Grid, mode: PoolMode) -> Result<Grid> {
    global_pool_with_index(input, mode).map(|(g, _)| g)
}

/// Voxelwise reduction across channels: `[C, D, H, W] -> [1, D, H, W]`.
/// For max mode also returns the winning channel per voxel.
pub fn channel_pool_with_index(input: &Grid, mode: PoolMode) -> Result<(Grid, Vec<usize>)> {
    if input.shape().len() < 2 {
        return Err(Error::shape("channel_pool", format!("expected [C, ...], got {:?}", input.shape())));
    }
    let c = input.channels();
    let s = input.len() / c;
    let x = input.data();
    let mut out = vec![0.0; s];
    let mut idx = Vec::new();
    match mode {
        PoolMode::Avg => {
            for ch in 0..c {
                for (o, v) in out.iter_mut().zip(&x[ch * s..(ch + 1) * s]) {
                    *o += v;
                }
            }
            for o in &mut out {
                *o /= c as f64;
            }
        }
        PoolMode::Max => {
            idx = vec![0; s];
            out.copy_from_slice(&x[..s]);
            for ch in 1..c {
                for (j, v) in x[ch * s..(ch + 1) * s].iter().enumerate() {
                    if *v > out[j] {
                        out[j] = *v;
                        idx[j] = ch;
                    }
                }
            }
        }
    }
    let mut shape = input.shape().to_vec();
    shape[0] = 1;
    Ok((Grid::new(shape, out)?, idx))
}

pub fn channel_pool(input: &Grid, mode: PoolMode) -> Result<Grid> {
    channel_pool_with_index(input, mode).map(|(g, _)| g)
}

fn first_max(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if i == 0 || v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// `y = W x + b` for `x [n]`, `W [m, n]`, `b [m]`.
pub fn affine(x: &Grid, weights: &Grid, bias: &Grid) -> Result<Grid> {
    let (m, n) = match weights.shape() {
        [m, n] => (*m, *n),
        s => return Err(Error::shape("affine", format!("weights must be [m, n], got {s:?}"))),
    };
    if x.len() != n || x.shape().len() != 1 {
        return Err(Error::shape("affine", format!("input {:?} does not match weights [{m}, {n}]", x.shape())));
    }
    if bias.shape() != [m] {
        return Err(Error::shape("affine", format!("bias {:?} does not match [{m}]", bias.shape())));
    }
    let w = weights.data();
    let out = (0..m)
        .map(|i| {
            w[i * n..(i + 1) * n]
                .iter()
                .zip(x.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
                + bias.data()[i]
        })
        .collect();
    Grid::new(vec![m], out)
}

/// Logistic function evaluated without overflow for any finite input.
#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Grid) -> Grid {
    x.map(sigmoid_scalar)
}

pub fn relu(x: &Grid) -> Grid {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Nearest-neighbour resize of `[C, D, H, W]` to the given spatial extents.
/// Returns the resized grid and, per output voxel, the source offset within
/// a channel.
pub fn upsample_nearest_with_index(input: &Grid, target: [usize; 3]) -> Result<(Grid, Vec<usize>)> {
    let ins = input.spatial()?;
    if target.contains(&0) {
        return Err(Error::shape("upsample", "target extents must be >= 1"));
    }
    let c = input.channels();
    let isz: usize = ins.iter().product();
    let osz: usize = target.iter().product();
    let map_axis = |a: usize| -> Vec<usize> { (0..target[a]).map(|o| o * ins[a] / target[a]).collect() };
    let (md, mh, mw) = (map_axis(0), map_axis(1), map_axis(2));
    let mut src = Vec::with_capacity(osz);
    for &d in &md {
        for &h in &mh {
            for &w in &mw {
                src.push((d * ins[1] + h) * ins[2] + w);
            }
        }
    }
    let x = input.data();
    let mut out = Vec::with_capacity(c * osz);
    for ch in 0..c {
        out.extend(src.iter().map(|&s| x[ch * isz + s]));
    }
    Ok((Grid::new(vec![c, target[0], target[1], target[2]], out)?, src))
}

pub fn upsample_nearest(input: &Grid, target: [usize; 3]) -> Result<Grid> {
    upsample_nearest_with_index(input, target).map(|(g, _)| g)
}

/// Non-overlapping average pooling by an integer factor per spatial axis.
pub fn avg_pool(input: &Grid, factor: usize) -> Result<Grid> {
    let [d, h, w] = input.spatial()?;
    if factor == 0 || d % factor != 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(
            "avg_pool",
            format!("spatial extents {:?} not divisible by {factor}", [d, h, w]),
        ));
    }
    let c = input.channels();
    let (od, oh, ow) = (d / factor, h / factor, w / factor);
    let mut out = vec![0.0; c * od * oh * ow];
    let x = input.data();
    let norm = (factor * factor * factor) as f64;
    for ch in 0..c {
        for z in 0..d {
            for y in 0..h {
                for xw in 0..w {
                    let o = ((ch * od + z / factor) * oh + y / factor) * ow + xw / factor;
                    out[o] += x[((ch * d + z) * h + y) * w + xw];
                }
            }
        }
    }
    for v in &mut out {
        *v /= norm;
    }
    Grid::new(vec![c, od, oh, ow], out)
}

/// Stacks `[C_i, ...]` grids along the channel axis.
pub fn concat_channels(parts: &[&Grid]) -> Result<Grid> {
    let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
    let rest = &first.shape()[1..];
    let mut c = 0;
    let mut data = Vec::new();
    for p in parts {
        if &p.shape()[1..] != rest {
            return Err(Error::shape(
                "concat",
                format!("non-channel axes differ: {:?} vs {:?}", first.shape(), p.shape()),
            ));
        }
        c += p.channels();
        data.extend_from_slice(p.data());
    }
    let mut shape = first.shape().to_vec();
    shape[0] = c;
    Grid::new(shape, data)
}

/// Multiplies each channel of `x [C, ...]` by `v[c]`.
pub fn scale_channels(x: &Grid, v: &Grid) -> Result<Grid> {
    let c = x.channels();
    if v.shape() != [c] {
        return Err(Error::shape("scale_channels", format!("vector {:?} vs {c} channels", v.shape())));
    }
    let s = x.len() / c;
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, a)| a * v.data()[i / s])
        .collect();
    Grid::new(x.shape().to_vec(), data)
}

/// Multiplies every channel of `x [C, ...]` by the map `m [1, ...]`.
pub fn scale_spatial(x: &Grid, m: &Grid) -> Result<Grid> {
    if m.shape()[0] != 1 || m.shape()[1..] != x.shape()[1..] {
        return Err(Error::shape("scale_spatial", format!("map {:?} vs input {:?}", m.shape(), x.shape())));
    }
    let s = m.len();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, a)| a * m.data()[i % s])
        .collect();
    Grid::new(x.shape().to_vec(), data)
}
