//! Per-fold stages and the full cross-validation run.
//!
//! Every random draw is keyed by `derive_seed(run seed, stage label, fold)`
//! so stages can run separately or together with identical results.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cohort::{balance_fold, build_cohort, stratified_kfold, Cohort, FoldSplit, Sample};
use crate::controlnet::{
    condition_from_labels, controlnet_loss, init_control_branch, train_controlnet, ConditionedLatent, ControlBranch,
    Generator,
};
use crate::error::{Error, Result};
use crate::ldm::train::{draw_diffusion_sample, DiffusionSample};
use crate::ldm::{latent_scale, train_denoiser, train_vae, Denoiser, NoiseSchedule, Posterior, TrainHistory, Vae};
use crate::metrics::{dice, fid_by_view, psnr, roc_curve, ssim, FidReport, RocPoint};
use crate::nifti::normalize_intensity;
use crate::pattennet::{
    predict_logits, train_classifier, ClassifierConfig, ClassifierHistory, ClassifierTrainConfig, Example, PattenNet,
};
use crate::rng::{derive_seed, stream};
use crate::tlcr::{tlcr_crop, Provenance};
use crate::volgrid::ops::sigmoid_scalar;
use crate::volgrid::Grid;

use super::RunConfig;

/// Threshold on the reconstructed tumor channel for the support Dice.
pub const TUMOR_SUPPORT_THRESHOLD: f64 = 0.3;
/// Diffusion draws per training case in the fixed control-branch evaluation.
const CONTROL_EVAL_DRAWS: usize = 2;

/// Progress sink; receives one line per completed step.
pub type Log<'a> = &'a mut dyn FnMut(&str);

pub fn seed_for(cfg: &RunConfig, label: &str, fold: usize) -> u64 {
    derive_seed(cfg.seed, label, fold as u64)
}

pub struct Dataset {
    pub cohort: Cohort,
    pub samples: Vec<Sample>,
    pub folds: Vec<FoldSplit>,
    /// Cases removed by the tumor-size filter.
    pub excluded: Vec<String>,
}

impl Dataset {
    /// Samples for `ids`, in the order given.
    pub fn select(&self, ids: &[String]) -> Result<Vec<Sample>> {
        select(&self.samples, ids)
    }
}

pub fn select(samples: &[Sample], ids: &[String]) -> Result<Vec<Sample>> {
    ids.iter()
        .map(|id| {
            samples
                .iter()
                .find(|s| &s.id == id)
                .cloned()
                .ok_or_else(|| Error::Invalid(format!("unknown case id {id}")))
        })
        .collect()
}

pub fn build_phantom_cohort(cfg: &RunConfig) -> Result<(Cohort, Vec<String>)> {
    let mut cohort = build_cohort(cfg.seed, cfg.n_pos, cfg.n_neg, cfg.dims, &cfg.phantom)?;
    let excluded = match cfg.max_tumor_fraction {
        Some(f) => cohort.exclude_large_tumors(f),
        None => Vec::new(),
    };
    Ok((cohort, excluded))
}

/// Normalised tumor-localised patches, one per case, in cohort order.
pub fn extract_patches(cfg: &RunConfig, cohort: &Cohort) -> Result<Vec<Sample>> {
    let crop = cfg.crop_spec()?;
    cohort
        .cases
        .iter()
        .map(|c| {
            let patch = tlcr_crop(&normalize_intensity(&c.volume), &c.labels, crop, c.pni)?;
            Ok(Sample {
                id: c.id.clone(),
                patch,
                donor: None,
            })
        })
        .collect()
}

pub fn make_folds(cfg: &RunConfig, cohort: &Cohort) -> Result<Vec<FoldSplit>> {
    stratified_kfold(&cohort.members(), cfg.folds, seed_for(cfg, "folds", 0))
}

pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (cohort, excluded) = build_phantom_cohort(cfg)?;
    let samples = extract_patches(cfg, &cohort)?;
    let folds = make_folds(cfg, &cohort)?;
    Ok(Dataset {
        cohort,
        samples,
        folds,
        excluded,
    })
}

fn images(samples: &[Sample]) -> Vec<Grid> {
    samples.iter().map(|s| s.patch.image.clone()).collect()
}

/// Mean absolute error of posterior-mean reconstructions.
pub fn reconstruction_l1(vae: &Vae, images: &[Grid]) -> Result<f64> {
    let mut total = 0.0;
    for x in images {
        let r = vae.reconstruct(x)?;
        total += r.zip_map(x, |a, b| (a - b).abs())?.mean();
    }
    Ok(total / images.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub history: TrainHistory,
    /// Fixed-set evaluation loss of the initial and returned parameters.
    pub eval_init: f64,
    pub eval_trained: f64,
}

pub fn train_vae_stage(cfg: &RunConfig, fold: usize, train: &[Sample]) -> Result<(Vae, StageReport)> {
    let init = Vae::new(cfg.vae.clone(), &mut stream(seed_for(cfg, "vae-init", fold)));
    let xs = images(train);
    let eval_init = reconstruction_l1(&init, &xs)?;
    let (vae, history) = train_vae(init, &xs, &cfg.vae_train, seed_for(cfg, "vae-train", fold))?;
    let eval_trained = reconstruction_l1(&vae, &xs)?;
    Ok((
        vae,
        StageReport {
            history,
            eval_init,
            eval_trained,
        },
    ))
}

/// Scaled posteriors of the training images under the frozen autoencoder.
pub fn encode_posteriors(vae: &Vae, train: &[Sample], scale: Option<f64>) -> Result<(Vec<Posterior>, f64)> {
    let raw = train
        .iter()
        .map(|s| Posterior::encode(vae, &s.patch.image))
        .collect::<Result<Vec<_>>>()?;
    let k = scale.unwrap_or_else(|| latent_scale(&raw));
    Ok((raw.iter().map(|p| p.scaled(k)).collect(), k))
}

fn mean_ldm_loss(den: &Denoiser, schedule: &NoiseSchedule, set: &[DiffusionSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in set {
        total += crate::ldm::ldm_loss(den, schedule, &s.z0, s.t, &s.eps)?;
    }
    Ok(total / set.len().max(1) as f64)
}

fn eval_draws(posteriors: &[Posterior], schedule: &NoiseSchedule, seed: u64) -> Result<Vec<DiffusionSample>> {
    let mut rng = stream(seed);
    let mut out = Vec::new();
    for (i, p) in posteriors.iter().enumerate() {
        for _ in 0..CONTROL_EVAL_DRAWS {
            out.push(draw_diffusion_sample(i, p, schedule, &mut rng)?);
        }
    }
    Ok(out)
}

/// Trains the denoiser; returns it with the latent scale factor.
pub fn train_ldm_stage(
    cfg: &RunConfig,
    fold: usize,
    vae: &Vae,
    train: &[Sample],
) -> Result<(Denoiser, f64, StageReport)> {
    let schedule = cfg.schedule.build()?;
    let (posteriors, scale) = encode_posteriors(vae, train, None)?;
    let init = Denoiser::new(cfg.denoiser.clone(), &mut stream(seed_for(cfg, "ldm-init", fold)));
    let eval = eval_draws(&posteriors, &schedule, seed_for(cfg, "ldm-eval", fold))?;
    let eval_init = mean_ldm_loss(&init, &schedule, &eval)?;
    let (den, history) = train_denoiser(init, &posteriors, &schedule, &cfg.ldm_train, seed_for(cfg, "ldm-train", fold))?;
    let eval_trained = mean_ldm_loss(&den, &schedule, &eval)?;
    Ok((
        den,
        scale,
        StageReport {
            history,
            eval_init,
            eval_trained,
        },
    ))
}

fn mean_control_loss(
    den: &Denoiser,
    branch: &ControlBranch,
    schedule: &NoiseSchedule,
    data: &[ConditionedLatent],
    set: &[DiffusionSample],
) -> Result<f64> {
    let mut total = 0.0;
    for s in set {
        total += controlnet_loss(den, branch, schedule, &s.z0, &data[s.index].condition, s.t, &s.eps)?;
    }
    Ok(total / set.len().max(1) as f64)
}

pub fn train_controlnet_stage(
    cfg: &RunConfig,
    fold: usize,
    vae: &Vae,
    den: &Denoiser,
    scale: f64,
    train: &[Sample],
) -> Result<(ControlBranch, StageReport)> {
    let schedule = cfg.schedule.build()?;
    let (posteriors, _) = encode_posteriors(vae, train, Some(scale))?;
    let data = posteriors
        .into_iter()
        .zip(train)
        .map(|(posterior, s)| {
            Ok(ConditionedLatent {
                posterior,
                condition: condition_from_labels(&s.patch.labels)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let init = init_control_branch(den);
    let post: Vec<Posterior> = data.iter().map(|d| d.posterior.clone()).collect();
    let eval = eval_draws(&post, &schedule, seed_for(cfg, "controlnet-eval", fold))?;
    let eval_init = mean_control_loss(den, &init, &schedule, &data, &eval)?;
    let (branch, history) = train_controlnet(
        den,
        init,
        &data,
        &schedule,
        &cfg.controlnet_train,
        seed_for(cfg, "controlnet-train", fold),
    )?;
    let eval_trained = mean_control_loss(den, &branch, &schedule, &data, &eval)?;
    Ok((
        branch,
        StageReport {
            history,
            eval_init,
            eval_trained,
        },
    ))
}

/// Generative models of one fold, trained on that fold's training ids only.
#[derive(Clone, Debug)]
pub struct GenerativeBundle {
    pub fold: usize,
    pub train_ids: Vec<String>,
    pub vae: Vae,
    pub denoiser: Denoiser,
    pub branch: ControlBranch,
    pub latent_scale: f64,
    pub schedule: NoiseSchedule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerativeReport {
    pub vae: StageReport,
    pub ldm: StageReport,
    pub controlnet: StageReport,
}

pub fn train_generative(
    cfg: &RunConfig,
    split: &FoldSplit,
    train: &[Sample],
    log: Log,
) -> Result<(GenerativeBundle, GenerativeReport)> {
    let fold = split.fold;
    let (vae, vr) = train_vae_stage(cfg, fold, train)?;
    log(&format!(
        "fold {fold}: vae reconstruction L1 {:.4} -> {:.4}",
        vr.eval_init, vr.eval_trained
    ));
    let (den, scale, lr) = train_ldm_stage(cfg, fold, &vae, train)?;
    log(&format!("fold {fold}: ldm loss {:.4} -> {:.4}", lr.eval_init, lr.eval_trained));
    let (branch, cr) = train_controlnet_stage(cfg, fold, &vae, &den, scale, train)?;
    log(&format!(
        "fold {fold}: controlnet loss {:.4} -> {:.4}",
        cr.eval_init, cr.eval_trained
    ));
    Ok((
        GenerativeBundle {
            fold,
            train_ids: split.train.clone(),
            vae,
            denoiser: den,
            branch,
            latent_scale: scale,
            schedule: cfg.schedule.build()?,
        },
        GenerativeReport {
            vae: vr,
            ldm: lr,
            controlnet: cr,
        },
    ))
}

/// Seed of one synthetic patch, independent of generation order.
pub fn synthetic_seed(cfg: &RunConfig, fold: usize, id: &str) -> u64 {
    derive_seed(seed_for(cfg, "synthesis", fold), id, 0)
}

/// Training sets for each ratio of the ladder.
pub fn synthesize_ladder(cfg: &RunConfig, bundle: &GenerativeBundle, train: &[Sample]) -> Result<Vec<Vec<Sample>>> {
    synthesize(cfg, bundle, train, &cfg.ratios)
}

/// Real training cases plus synthetic positives for each of `ratios`.
/// Smaller ratios reuse a prefix of the largest ratio's synthetic cases.
pub fn synthesize(
    cfg: &RunConfig,
    bundle: &GenerativeBundle,
    train: &[Sample],
    ratios: &[f64],
) -> Result<Vec<Vec<Sample>>> {
    let generator = Generator {
        vae: &bundle.vae,
        denoiser: &bundle.denoiser,
        branch: &bundle.branch,
        schedule: &bundle.schedule,
        latent_scale: bundle.latent_scale,
    };
    let mut cache = BTreeMap::new();
    let max = ratios.iter().copied().fold(0.0, f64::max);
    balance_fold(train, max, |donor, replica| {
        let id = crate::cohort::synthetic_id(&donor.id, replica);
        let p = generator.generate_seeded(&donor.patch, synthetic_seed(cfg, bundle.fold, &id))?;
        cache.insert(id, p.clone());
        Ok(p)
    })?;
    ratios
        .iter()
        .map(|&r| {
            balance_fold(train, r, |donor, replica| {
                let id = crate::cohort::synthetic_id(&donor.id, replica);
                cache
                    .get(&id)
                    .cloned()
                    .ok_or_else(|| Error::Invalid(format!("synthetic case {id} missing from ladder")))
            })
        })
        .collect()
}

pub fn examples(vae: &Vae, samples: &[Sample]) -> Result<Vec<Example>> {
    samples
        .iter()
        .map(|s| {
            Ok(Example {
                features: vae.encode_mean(&s.patch.image)?,
                label: s.patch.pni,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub case_id: String,
    pub fold: usize,
    pub ratio: f64,
    pub provenance: String,
    pub pni_true: u8,
    pub probability: f64,
}

#[derive(Clone, Debug)]
pub struct ClassifierRun {
    pub net: PattenNet,
    pub history: ClassifierHistory,
    pub auc: f64,
    /// Validation logits in validation order.
    pub logits: Vec<f64>,
}

/// Trains one classifier on `train` and scores `val` with the returned
/// best-AUC parameters.
pub fn run_classifier(
    cfg: &RunConfig,
    fold: usize,
    vae: &Vae,
    model: &ClassifierConfig,
    train_cfg: &ClassifierTrainConfig,
    train: &[Example],
    val: &[Example],
) -> Result<ClassifierRun> {
    let net = PattenNet::new(vae.clone(), model.clone(), &mut stream(seed_for(cfg, "classifier-init", fold)))?;
    let (net, history) = train_classifier(net, train, val, train_cfg, seed_for(cfg, "classifier-train", fold))?;
    let logits = predict_logits(&net, val)?;
    let labels: Vec<u8> = val.iter().map(|e| e.label).collect();
    let auc = crate::metrics::roc_auc(&logits, &labels)?;
    Ok(ClassifierRun {
        net,
        history,
        auc,
        logits,
    })
}

/// Classifier result at one ratio of the ladder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRun {
    pub ratio: f64,
    /// Real plus synthetic training cases.
    pub n_train: usize,
    pub history: ClassifierHistory,
    pub auc: f64,
    pub logits: Vec<f64>,
}

/// Everything the classification reports need from one fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRecord {
    pub fold: usize,
    pub val_ids: Vec<String>,
    pub val_labels: Vec<u8>,
    pub runs: Vec<RatioRun>,
    /// `(variant name, validation AUC)` after one training epoch.
    pub ablation: Vec<(String, f64)>,
}

impl ClassificationRecord {
    pub fn predictions(&self) -> Vec<Prediction> {
        self.runs
            .iter()
            .flat_map(|r| {
                self.val_ids.iter().zip(&self.val_labels).zip(&r.logits).map(|((id, &y), &l)| Prediction {
                    case_id: id.clone(),
                    fold: self.fold,
                    ratio: r.ratio,
                    provenance: Provenance::Real.as_str().to_string(),
                    pni_true: y,
                    probability: sigmoid_scalar(l),
                })
            })
            .collect()
    }

    pub fn roc(&self, run: &RatioRun) -> Result<Vec<RocPoint>> {
        roc_curve(&run.logits, &self.val_labels)
    }
}

/// Mean validation AUC across folds for each ratio.
pub fn mean_aucs(records: &[ClassificationRecord]) -> Vec<f64> {
    let n = records.first().map_or(0, |r| r.runs.len());
    (0..n)
        .map(|i| records.iter().map(|r| r.runs[i].auc).sum::<f64>() / records.len() as f64)
        .collect()
}

/// One classifier per ratio of the ladder, each scored on `val`.
pub fn classify_ladder(
    cfg: &RunConfig,
    fold: usize,
    vae: &Vae,
    ladder: &[Vec<Sample>],
    val: &[Sample],
    log: Log,
) -> Result<(Vec<ClassifierRun>, Vec<RatioRun>)> {
    let val_ex = examples(vae, val)?;
    let mut runs = Vec::new();
    let mut records = Vec::new();
    for (r, set) in cfg.ratios.iter().zip(ladder) {
        let train_ex = examples(vae, set)?;
        let run = run_classifier(cfg, fold, vae, &cfg.classifier, &cfg.classifier_train, &train_ex, &val_ex)?;
        log(&format!(
            "fold {fold}: ratio {r}: {} training cases, val AUC {:.4} (best epoch {})",
            set.len(),
            run.auc,
            run.history.best_epoch
        ));
        records.push(RatioRun {
            ratio: *r,
            n_train: set.len(),
            history: run.history.clone(),
            auc: run.auc,
            logits: run.logits.clone(),
        });
        runs.push(run);
    }
    Ok((runs, records))
}

/// Every configured ablation variant trained for one epoch on real cases.
pub fn run_ablation(
    cfg: &RunConfig,
    fold: usize,
    vae: &Vae,
    train: &[Sample],
    val: &[Sample],
) -> Result<Vec<(String, f64)>> {
    let (train_ex, val_ex) = (examples(vae, train)?, examples(vae, val)?);
    let one_epoch = ClassifierTrainConfig {
        max_epochs: 1,
        ..cfg.classifier_train.clone()
    };
    cfg.ablations
        .iter()
        .map(|a| {
            let run = run_classifier(cfg, fold, vae, a, &one_epoch, &train_ex, &val_ex)?;
            Ok((a.variant_name(), run.auc))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub tumor_dice: f64,
}

/// Validation-set reconstruction quality on the peritumoral channel, and
/// Dice of the thresholded tumor channel against the true tumor mask.
pub fn reconstruction_metrics(vae: &Vae, val: &[Sample]) -> Result<ReconMetrics> {
    let (mut p, mut s, mut d) = (0.0, 0.0, 0.0);
    for v in val {
        let r = vae.reconstruct(&v.patch.image)?;
        let (a, b) = (v.patch.image.channel_grid(0)?, r.channel_grid(0)?);
        let q = psnr(&a, &b, 1.0)?;
        // identical volumes would give +inf; cap so means stay finite
        p += q.min(100.0);
        s += ssim(&a, &b)?;
        let truth = v.patch.labels.channel_grid(1)?;
        let seg = r.channel_grid(1)?.map(|x| f64::from(u8::from(x > TUMOR_SUPPORT_THRESHOLD)));
        d += dice(&truth, &seg)?;
    }
    let n = val.len().max(1) as f64;
    Ok(ReconMetrics {
        psnr: p / n,
        ssim: s / n,
        tumor_dice: d / n,
    })
}

/// Generative-stage summary of one fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerativeRecord {
    pub fold: usize,
    pub train_ids: Vec<String>,
    pub latent_scale: f64,
    pub report: GenerativeReport,
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub fold: usize,
    pub val_ids: Vec<String>,
    pub generative: GenerativeRecord,
    pub recon: ReconMetrics,
    pub classification: ClassificationRecord,
    /// Synthetic cases at the largest ratio.
    pub synthetic: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidComparison {
    pub real_vs_subset: FidReport,
    pub real_vs_synthetic: FidReport,
    pub real_vs_shifted: FidReport,
}

pub struct CrossvalOutcome {
    pub config_hash: String,
    pub ratios: Vec<f64>,
    pub model: String,
    pub folds: Vec<FoldOutcome>,
    pub fid: FidComparison,
}

impl CrossvalOutcome {
    pub fn classification(&self) -> Vec<ClassificationRecord> {
        self.folds.iter().map(|f| f.classification.clone()).collect()
    }

    pub fn generative(&self) -> Vec<GenerativeRecord> {
        self.folds.iter().map(|f| f.generative.clone()).collect()
    }

    pub fn recon(&self) -> Vec<(usize, ReconMetrics)> {
        self.folds.iter().map(|f| (f.fold, f.recon.clone())).collect()
    }

    pub fn mean_aucs(&self) -> Vec<f64> {
        mean_aucs(&self.classification())
    }
}

pub fn model_name(cfg: &RunConfig) -> String {
    format!("PattenNet-{}", cfg.classifier.variant_name())
}

/// Peritumoral channel of each patch, the FID input.
pub fn fid_channel(samples: &[Sample]) -> Result<Vec<Grid>> {
    samples.iter().map(|s| s.patch.image.channel_grid(0)).collect()
}

/// Adds `shift` inside the peritumoral mask.
pub fn shift_inside_mask(s: &Sample, shift: f64) -> Result<Grid> {
    let img = s.patch.image.channel_grid(0)?;
    let mask = s.patch.labels.channel_grid(0)?;
    img.zip_map(&mask, |v, m| if m != 0.0 { v + shift } else { v })
}

pub fn fid_comparison(real: &[Sample], synthetic: &[Sample], shift: f64) -> Result<FidComparison> {
    let r = fid_channel(real)?;
    let subset: Vec<Grid> = r.iter().step_by(2).cloned().collect();
    let syn = fid_channel(synthetic)?;
    let shifted = synthetic
        .iter()
        .map(|s| shift_inside_mask(s, shift))
        .collect::<Result<Vec<_>>>()?;
    Ok(FidComparison {
        real_vs_subset: fid_by_view(&r, &subset)?,
        real_vs_synthetic: fid_by_view(&r, &syn)?,
        real_vs_shifted: fid_by_view(&r, &shifted)?,
    })
}

pub fn run_fold(cfg: &RunConfig, data: &Dataset, split: &FoldSplit, log: Log) -> Result<FoldOutcome> {
    let fold = split.fold;
    let train = data.select(&split.train)?;
    let val = data.select(&split.val)?;
    let (bundle, report) = train_generative(cfg, split, &train, log)?;
    let ladder = synthesize_ladder(cfg, &bundle, &train)?;
    log(&format!(
        "fold {fold}: {} synthetic cases at ratio {}",
        ladder.last().map_or(0, |l| l.len() - train.len()),
        cfg.ratios.last().copied().unwrap_or(0.0)
    ));
    let (_, runs) = classify_ladder(cfg, fold, &bundle.vae, &ladder, &val, log)?;
    let ablation = run_ablation(cfg, fold, &bundle.vae, &train, &val)?;
    let synthetic: Vec<Sample> = ladder
        .last()
        .map(|l| l.iter().filter(|s| s.patch.provenance == Provenance::Synthetic).cloned().collect())
        .unwrap_or_default();
    Ok(FoldOutcome {
        fold,
        val_ids: split.val.clone(),
        generative: GenerativeRecord {
            fold,
            train_ids: split.train.clone(),
            latent_scale: bundle.latent_scale,
            report,
        },
        recon: reconstruction_metrics(&bundle.vae, &val)?,
        classification: ClassificationRecord {
            fold,
            val_ids: split.val.clone(),
            val_labels: val.iter().map(|s| s.patch.pni).collect(),
            runs,
            ablation,
        },
        synthetic,
    })
}

/// Full experiment: every fold, every ratio, plus the FID comparison.
pub fn run_crossval(cfg: &RunConfig, log: Log) -> Result<CrossvalOutcome> {
    let data = build_dataset(cfg)?;
    run_crossval_on(cfg, &data, log)
}

pub fn run_crossval_on(cfg: &RunConfig, data: &Dataset, log: Log) -> Result<CrossvalOutcome> {
    cfg.validate()?;
    let mut folds = Vec::new();
    for split in &data.folds {
        folds.push(run_fold(cfg, data, split, log)?);
    }
    let synthetic: Vec<Sample> = folds.iter().flat_map(|f| f.synthetic.iter().cloned()).collect();
    let fid = fid_comparison(&data.samples, &synthetic, cfg.fid_shift)?;
    Ok(CrossvalOutcome {
        config_hash: cfg.hash(),
        ratios: cfg.ratios.clone(),
        model: model_name(cfg),
        folds,
        fid,
    })
}
