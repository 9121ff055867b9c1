//! Patch classifier on frozen encoder features: a stack of dual attention
//! blocks (channel then spatial), global average pooling and a linear head.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ldm::vae::Vae;
use crate::metrics::roc_auc;
use crate::rng::stream;
use crate::volgrid::layers::{gather_grads, ConvNodes, LinearNodes, Parameterized};
use crate::volgrid::{AdamW, AdamWConfig, Conv3d, Grid, Linear, NodeId, PoolMode, Tape};

pub const SPATIAL_KERNEL: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    /// Number of dual attention blocks, 0 to 3.
    pub dab_count: usize,
    pub channel_only: bool,
    pub spatial_only: bool,
    /// Channel MLP hidden width is `max(1, C / reduction)`.
    pub reduction: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            dab_count: 2,
            channel_only: false,
            spatial_only: false,
            reduction: 4,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dab_count > 3 {
            return Err(Error::Config(format!("dab_count {} outside 0..=3", self.dab_count)));
        }
        if self.channel_only && self.spatial_only {
            return Err(Error::Config("channel_only and spatial_only are mutually exclusive".into()));
        }
        if self.reduction == 0 {
            return Err(Error::Config("reduction must be positive".into()));
        }
        Ok(())
    }

    /// Short label for reports.
    pub fn variant_name(&self) -> String {
        let kind = if self.channel_only {
            "channel-only"
        } else if self.spatial_only {
            "spatial-only"
        } else {
            "dual"
        };
        format!("{}x{kind}", self.dab_count)
    }
}

/// Shared two-layer MLP applied to average- and max-pooled channel vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttention {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct ChannelAttentionNodes {
    fc1: LinearNodes,
    fc2: LinearNodes,
}

impl ChannelAttention {
    pub fn new<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Self {
        let hidden = (channels / reduction).max(1);
        ChannelAttention {
            fc1: Linear::new(channels, hidden, rng),
            fc2: Linear::new(hidden, channels, rng),
        }
    }

    pub fn bind(&self, t: &mut Tape, trainable: bool) -> ChannelAttentionNodes {
        ChannelAttentionNodes {
            fc1: self.fc1.bind(t, trainable),
            fc2: self.fc2.bind(t, trainable),
        }
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Grid)> {
        let mut v = self.fc1.named_params(&format!("{prefix}.fc1"));
        v.extend(self.fc2.named_params(&format!("{prefix}.fc2")));
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Grid> {
        let mut v = self.fc1.params_mut();
        v.extend(self.fc2.params_mut());
        v
    }
}

impl ChannelAttentionNodes {
    fn mlp(&self, t: &mut Tape, p: NodeId) -> Result<NodeId> {
        let h = self.fc1.apply(t, p)?;
        let h = t.relu(h);
        self.fc2.apply(t, h)
    }

    /// `σ(MLP(avg(F)) + MLP(max(F)))`, shape `[C]`.
    pub fn apply(&self, t: &mut Tape, f: NodeId) -> Result<NodeId> {
        let a = t.global_pool(f, PoolMode::Avg)?;
        let m = t.global_pool(f, PoolMode::Max)?;
        let a = self.mlp(t, a)?;
        let m = self.mlp(t, m)?;
        let s = t.add(a, m)?;
        Ok(t.sigmoid(s))
    }

    pub fn ids(&self) -> Vec<NodeId> {
        let mut v = self.fc1.ids().to_vec();
        v.extend(self.fc2.ids());
        v
    }
}

/// 7×7×7 convolution over stacked channel-average and channel-max maps.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttention {
    pub conv: Conv3d,
}

#[derive(Clone, Copy, Debug)]
pub struct SpatialAttentionNodes {
    conv: ConvNodes,
}

impl SpatialAttention {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        SpatialAttention {
            conv: Conv3d::new(2, 1, SPATIAL_KERNEL, 1, SPATIAL_KERNEL / 2, rng),
        }
    }

    pub fn bind(&self, t: &mut Tape, trainable: bool) -> SpatialAttentionNodes {
        SpatialAttentionNodes {
            conv: self.conv.bind(t, trainable),
        }
    }
}

impl SpatialAttentionNodes {
    /// `σ(conv([avg_c(F); max_c(F)]))`, shape `[1, D, H, W]`.
    pub fn apply(&self, t: &mut Tape, f: NodeId) -> Result<NodeId> {
        let a = t.channel_pool(f, PoolMode::Avg)?;
        let m = t.channel_pool(f, PoolMode::Max)?;
        let s = t.concat(&[a, m])?;
        let s = self.conv.apply(t, s)?;
        Ok(t.sigmoid(s))
    }

    pub fn ids(&self) -> Vec<NodeId> {
        self.conv.ids().to_vec()
    }
}

/// Dual attention block; either half may be absent in ablations.
#[derive(Clone, Debug, PartialEq)]
pub struct Dab {
    pub channel: Option<ChannelAttention>,
    pub spatial: Option<SpatialAttention>,
}

#[derive(Clone, Copy, Debug)]
pub struct DabNodes {
    channel: Option<ChannelAttentionNodes>,
    spatial: Option<SpatialAttentionNodes>,
}

impl Dab {
    pub fn new<R: Rng + ?Sized>(channels: usize, cfg: &ClassifierConfig, rng: &mut R) -> Self {
        Dab {
            channel: (!cfg.spatial_only).then(|| ChannelAttention::new(channels, cfg.reduction, rng)),
            spatial: (!cfg.channel_only).then(|| SpatialAttention::new(rng)),
        }
    }

    pub fn bind(&self, t: &mut Tape, trainable: bool) -> DabNodes {
        DabNodes {
            channel: self.channel.as_ref().map(|c| c.bind(t, trainable)),
            spatial: self.spatial.as_ref().map(|s| s.bind(t, trainable)),
        }
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Grid)> {
        let mut v = Vec::new();
        if let Some(c) = &self.channel {
            v.extend(c.named_params(&format!("{prefix}.channel")));
        }
        if let Some(s) = &self.spatial {
            v.extend(s.conv.named_params(&format!("{prefix}.spatial")));
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Grid> {
        let mut v = Vec::new();
        if let Some(c) = &mut self.channel {
            v.extend(c.params_mut());
        }
        if let Some(s) = &mut self.spatial {
            v.extend(s.conv.params_mut());
        }
        v
    }
}

impl DabNodes {
    /// `F' = M_c(F) ⊗ F`, then `F'' = M_s(F') ⊗ F'`.
    pub fn apply(&self, t: &mut Tape, f: NodeId) -> Result<NodeId> {
        let mut f = f;
        if let Some(c) = &self.channel {
            let mc = c.apply(t, f)?;
            f = t.scale_channels(f, mc)?;
        }
        if let Some(s) = &self.spatial {
            let ms = s.apply(t, f)?;
            f = t.scale_spatial(f, ms)?;
        }
        Ok(f)
    }

    pub fn ids(&self) -> Vec<NodeId> {
        let mut v = Vec::new();
        if let Some(c) = &self.channel {
            v.extend(c.ids());
        }
        if let Some(s) = &self.spatial {
            v.extend(s.ids());
        }
        v
    }
}

/// Classifier with its frozen feature encoder. Only the attention blocks
/// and head are parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PattenNet {
    pub config: ClassifierConfig,
    encoder: Vae,
    pub dabs: Vec<Dab>,
    pub head: Linear,
}

pub struct PattenNetNodes {
    dabs: Vec<DabNodes>,
    head: LinearNodes,
}

impl PattenNet {
    pub fn new<R: Rng + ?Sized>(encoder: Vae, config: ClassifierConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = encoder.config.latent_channels;
        let dabs = (0..config.dab_count).map(|_| Dab::new(c, &config, rng)).collect();
        Ok(PattenNet {
            head: Linear::new(c, 1, rng),
            dabs,
            encoder,
            config,
        })
    }

    pub fn encoder(&self) -> &Vae {
        &self.encoder
    }

    /// Encoder mean features of a patch image.
    pub fn features(&self, image: &Grid) -> Result<Grid> {
        self.encoder.encode_mean(image)
    }

    pub fn bind(&self, t: &mut Tape, trainable: bool) -> PattenNetNodes {
        PattenNetNodes {
            dabs: self.dabs.iter().map(|d| d.bind(t, trainable)).collect(),
            head: self.head.bind(t, trainable),
        }
    }

    pub fn logit_from_features(&self, features: &Grid) -> Result<f64> {
        let mut t = Tape::new();
        let n = self.bind(&mut t, false);
        let f = t.constant(features.clone());
        let y = n.logit(&mut t, f)?;
        Ok(t.value(y).item())
    }

    pub fn probability(&self, image: &Grid) -> Result<f64> {
        let f = self.features(image)?;
        Ok(crate::volgrid::ops::sigmoid_scalar(self.logit_from_features(&f)?))
    }
}

impl Parameterized for PattenNet {
    fn named_params(&self) -> Vec<(String, &Grid)> {
        let mut v: Vec<(String, &Grid)> = self
            .dabs
            .iter()
            .enumerate()
            .flat_map(|(i, d)| d.named_params(&format!("dab{i}")))
            .collect();
        v.extend(self.head.named_params("head"));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Grid> {
        let mut v: Vec<&mut Grid> = self.dabs.iter_mut().flat_map(|d| d.params_mut()).collect();
        v.extend(self.head.params_mut());
        v
    }
}

impl PattenNetNodes {
    /// Attention stack, global average pool and linear head: a `[1]` logit.
    pub fn logit(&self, t: &mut Tape, features: NodeId) -> Result<NodeId> {
        let mut f = features;
        for d in &self.dabs {
            f = d.apply(t, f)?;
        }
        let p = t.global_pool(f, PoolMode::Avg)?;
        self.head.apply(t, p)
    }

    pub fn ids(&self) -> Vec<NodeId> {
        let mut v: Vec<NodeId> = self.dabs.iter().flat_map(|d| d.ids()).collect();
        v.extend(self.head.ids());
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierTrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            max_epochs: 300,
            patience: 20,
            batch_size: 4,
            lr: 1e-4,
            weight_decay: 0.0,
        }
    }
}

impl ClassifierTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.patience == 0 || self.batch_size == 0 {
            return Err(Error::Config("classifier max_epochs, patience and batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("classifier lr and weight_decay must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Patience rule on a score that should increase. Epochs are 1-based and
/// only a strictly larger score counts as an improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
        }
    }

    /// Records `score` for `epoch`; returns `(improved, stop)`.
    pub fn update(&mut self, epoch: usize, score: f64) -> (bool, bool) {
        let improved = score > self.best;
        if improved {
            self.best = score;
            self.best_epoch = epoch;
        }
        (improved, epoch - self.best_epoch >= self.patience)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHistory {
    pub train_losses: Vec<f64>,
    pub val_aucs: Vec<f64>,
    pub best_epoch: usize,
    pub best_auc: f64,
}

/// One example: encoder features and binary label.
#[derive(Clone, Debug)]
pub struct Example {
    pub features: Grid,
    pub label: u8,
}

fn loss_grad(net: &PattenNet, ex: &Example) -> Result<(f64, Vec<Grid>)> {
    let mut t = Tape::new();
    let n = net.bind(&mut t, true);
    let f = t.constant(ex.features.clone());
    let y = n.logit(&mut t, f)?;
    let l = t.bce_with_logits(y, ex.label as f64)?;
    let value = t.value(l).item();
    let g = t.backward(l)?;
    Ok((value, gather_grads(&g, &n.ids())))
}

pub fn predict_logits(net: &PattenNet, examples: &[Example]) -> Result<Vec<f64>> {
    examples.iter().map(|e| net.logit_from_features(&e.features)).collect()
}

/// BCE training with per-epoch validation AUC and early stopping; returns
/// the best-AUC parameters.
pub fn train_classifier(
    net: PattenNet,
    train: &[Example],
    val: &[Example],
    cfg: &ClassifierTrainConfig,
    seed: u64,
) -> Result<(PattenNet, ClassifierHistory)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptySplit);
    }
    let val_labels: Vec<u8> = val.iter().map(|e| e.label).collect();
    if val_labels.iter().all(|&l| l == 1) || val_labels.iter().all(|&l| l != 1) {
        return Err(Error::SingleClass);
    }
    let mut rng = stream(seed);
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let mut net = net;
    let mut best = net.clone();
    let mut stop = EarlyStopping::new(cfg.patience);
    let mut hist = ClassifierHistory::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Grid>> = None;
            for &i in batch {
                let (l, g) = loss_grad(&net, &train[i])?;
                epoch_loss += l;
                match &mut acc {
                    None => acc = Some(g),
                    Some(a) => {
                        for (a, g) in a.iter_mut().zip(&g) {
                            a.add_assign(g)?;
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            let grads: Vec<Grid> = acc.unwrap_or_default().iter().map(|g| g.map(|v| v * inv)).collect();
            opt.step(&mut net.params_mut(), &grads)?;
        }
        hist.train_losses.push(epoch_loss / train.len() as f64);
        let scores = predict_logits(&net, val)?;
        let auc = roc_auc(&scores, &val_labels)?;
        hist.val_aucs.push(auc);
        let (improved, done) = stop.update(epoch, auc);
        if improved {
            best = net.clone();
        }
        if done {
            break;
        }
    }
    hist.best_epoch = stop.best_epoch;
    hist.best_auc = stop.best;
    Ok((best, hist))
}
