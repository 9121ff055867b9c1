//! Stage commands. Each one checks its prerequisites through their
//! manifests, skips itself when already complete, and records its own
//! manifest last.

use std::time::Instant;

use anyhow::{bail, Context, Result};
use pnigen_core::cohort::{stratified_kfold, FoldSplit, Sample};
use pnigen_core::controlnet::{init_control_branch, ControlBranch};
use pnigen_core::ldm::{Checkpoint, Denoiser, Vae};
use pnigen_core::nifti::{normalize_intensity, read_label_map, read_volume, write_label_map, write_volume, Datatype};
use pnigen_core::pipeline::report::{self, ratio_label};
use pnigen_core::pipeline::{
    build_phantom_cohort, classify_ladder, fid_comparison, mean_aucs, model_name, reconstruction_metrics,
    run_ablation, seed_for, select, synthesize, train_controlnet_stage, train_ldm_stage, train_vae_stage,
    ClassificationRecord, GenerativeBundle, GenerativeRecord, GenerativeReport, ReconMetrics, StageReport,
};
use pnigen_core::rng::stream;
use pnigen_core::tlcr::tlcr_crop;
use pnigen_core::Grid;
use serde::{Deserialize, Serialize};

use crate::store::{samples_checkpoint, samples_from, Run, SampleInfo, StageKey};

const LATENT_SCALE_ENTRY: &str = "latent_scale";

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Stage {
    Vae,
    Ldm,
    Controlnet,
    Classifier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Evaluation {
    Recon,
    Fid,
    Classification,
}

impl Evaluation {
    fn name(self) -> &'static str {
        match self {
            Evaluation::Recon => "recon",
            Evaluation::Fid => "fid",
            Evaluation::Classification => "classification",
        }
    }
}

fn log(line: &str) {
    eprintln!("{line}");
}

#[derive(Serialize, Deserialize)]
struct CohortData {
    cases: Vec<SampleInfo>,
    excluded: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct PatchData {
    cases: Vec<SampleInfo>,
    folds: Vec<FoldSplit>,
}

/// Generative stage manifest payload.
#[derive(Serialize, Deserialize)]
struct StageData {
    train_ids: Vec<String>,
    latent_scale: Option<f64>,
    report: StageReport,
}

#[derive(Serialize, Deserialize)]
struct SyntheticData {
    train_ids: Vec<String>,
    ratio: f64,
    cases: Vec<SampleInfo>,
}

pub fn phantom(run: &Run) -> Result<()> {
    let key = StageKey::Phantom;
    if run.up_to_date(&key)? {
        return Ok(());
    }
    let t0 = Instant::now();
    let (cohort, excluded) = build_phantom_cohort(&run.cfg)?;
    let mut artifacts = vec!["config.toml".to_string()];
    run.write_text("config.toml", &run.cfg.to_toml())?;
    let mut cases = Vec::new();
    for c in &cohort.cases {
        let (img, lab) = (format!("phantom/{}_image.nii", c.id), format!("phantom/{}_labels.nii", c.id));
        crate::store::ensure_parent(&run.path(&img))?;
        write_volume(run.path(&img), &c.volume, Datatype::F32)?;
        write_label_map(run.path(&lab), &c.labels)?;
        artifacts.extend([img, lab]);
        cases.push(SampleInfo {
            id: c.id.clone(),
            pni: c.pni,
            provenance: c.provenance.as_str().into(),
            donor: None,
        });
    }
    let (pos, neg) = cohort.counts();
    run.write_manifest(&key, artifacts, CohortData { cases, excluded }, t0.elapsed().as_secs_f64())?;
    println!("phantom: {pos} positive and {neg} negative cases in {}", run.path("phantom").display());
    Ok(())
}

pub fn tlcr(run: &Run) -> Result<()> {
    let key = StageKey::Tlcr;
    if run.up_to_date(&key)? {
        return Ok(());
    }
    let t0 = Instant::now();
    let cohort: CohortData = run.require(&StageKey::Phantom)?.data()?;
    let crop = run.cfg.crop_spec()?;
    let mut samples = Vec::new();
    for c in &cohort.cases {
        let vol = read_volume(run.path(format!("phantom/{}_image.nii", c.id)))?;
        let lab = read_label_map(run.path(format!("phantom/{}_labels.nii", c.id)))?;
        let patch = tlcr_crop(&normalize_intensity(&vol), &lab, crop, c.pni)?;
        samples.push(Sample {
            id: c.id.clone(),
            patch,
            donor: None,
        });
    }
    let members: Vec<(String, u8)> = cohort.cases.iter().map(|c| (c.id.clone(), c.pni)).collect();
    let folds = stratified_kfold(&members, run.cfg.folds, seed_for(&run.cfg, "folds", 0))?;
    let (ckpt, cases) = samples_checkpoint(&samples);
    run.save_checkpoint("patches/patches.ckpt", &ckpt)?;
    run.write_manifest(
        &key,
        vec!["patches/patches.ckpt".into()],
        PatchData { cases, folds },
        t0.elapsed().as_secs_f64(),
    )?;
    println!("tlcr: {} patches of {:?}", samples.len(), run.cfg.crop);
    Ok(())
}

struct Patches {
    samples: Vec<Sample>,
    folds: Vec<FoldSplit>,
}

fn patches(run: &Run) -> Result<Patches> {
    let data: PatchData = run.require(&StageKey::Tlcr)?.data()?;
    let ckpt = run.load_checkpoint("patches/patches.ckpt")?;
    Ok(Patches {
        samples: samples_from(&ckpt, &data.cases, "patches/patches.ckpt")?,
        folds: data.folds,
    })
}

fn split(p: &Patches, fold: usize) -> Result<&FoldSplit> {
    p.folds
        .iter()
        .find(|f| f.fold == fold)
        .with_context(|| format!("fold {fold} does not exist (folds are 1..={})", p.folds.len()))
}

pub fn folds_arg(run: &Run, fold: Option<usize>) -> Result<Vec<usize>> {
    match fold {
        Some(k) if k == 0 || k > run.cfg.folds => bail!("fold {k} outside 1..={}", run.cfg.folds),
        Some(k) => Ok(vec![k]),
        None => Ok((1..=run.cfg.folds).collect()),
    }
}

fn load_vae(run: &Run, fold: usize) -> Result<Vae> {
    run.require(&StageKey::Vae(fold))?;
    let mut vae = Vae::new(run.cfg.vae.clone(), &mut stream(0));
    run.load_checkpoint(&format!("fold{fold}/vae.ckpt"))?.load_into("", &mut vae)?;
    Ok(vae)
}

fn load_denoiser(run: &Run, fold: usize) -> Result<(Denoiser, f64)> {
    run.require(&StageKey::Ldm(fold))?;
    let rel = format!("fold{fold}/ldm.ckpt");
    let ckpt = run.load_checkpoint(&rel)?;
    let mut den = Denoiser::new(run.cfg.denoiser.clone(), &mut stream(0));
    ckpt.load_into("", &mut den)?;
    let scale = ckpt
        .scalar(LATENT_SCALE_ENTRY)
        .with_context(|| format!("{}: no latent scale entry", run.path(&rel).display()))?;
    Ok((den, scale))
}

fn load_branch(run: &Run, fold: usize, den: &Denoiser) -> Result<ControlBranch> {
    run.require(&StageKey::Controlnet(fold))?;
    let mut branch = init_control_branch(den);
    run.load_checkpoint(&format!("fold{fold}/controlnet.ckpt"))?.load_into("", &mut branch)?;
    Ok(branch)
}

pub fn train(run: &Run, stage: Stage, fold: usize) -> Result<()> {
    match stage {
        Stage::Vae => train_vae(run, fold),
        Stage::Ldm => train_ldm(run, fold),
        Stage::Controlnet => train_controlnet(run, fold),
        Stage::Classifier => train_classifier(run, fold),
    }
}

fn train_vae(run: &Run, fold: usize) -> Result<()> {
    let key = StageKey::Vae(fold);
    if run.up_to_date(&key)? {
        return Ok(());
    }
    let t0 = Instant::now();
    let p = patches(run)?;
    let s = split(&p, fold)?;
    let train = select(&p.samples, &s.train)?;
    let (vae, report) = train_vae_stage(&run.cfg, fold, &train)?;
    log(&format!(
        "fold {fold}: vae reconstruction L1 {:.4} -> {:.4}",
        report.eval_init, report.eval_trained
    ));
    let rel = format!("fold{fold}/vae.ckpt");
    run.save_checkpoint(&rel, &Checkpoint::from_model(&vae))?;
    let data = StageData {
        train_ids: s.train.clone(),
        latent_scale: None,
        report,
    };
    run.write_manifest(&key, vec![rel], data, t0.elapsed().as_secs_f64())?;
    println!("vae (fold {fold}): trained");
    Ok(())
}

fn train_ldm(run: &Run, fold: usize) -> Result<()> {
    let key = StageKey::Ldm(fold);
    if run.up_to_date(&key)? {
        return Ok(());
    }
    let t0 = Instant::now();
    let p = patches(run)?;
    let s = split(&p, fold)?;
    let train = select(&p.samples, &s.train)?;
    let vae = load_vae(run, fold)?;
    let (den, scale, report) = train_ldm_stage(&run.cfg, fold, &vae, &train)?;
    log(&format!("fold {fold}: ldm loss {:.4} -> {:.4}", report.eval_init, report.eval_trained));
    let mut ckpt = Checkpoint::from_model(&den);
    ckpt.push(LATENT_SCALE_ENTRY, Grid::scalar(scale));
    let rel = format!("fold{fold}/ldm.ckpt");
    run.save_checkpoint(&rel, &ckpt)?;
    let data = StageData {
        train_ids: s.train.clone(),
        latent_scale: Some(scale),
        report,
    };
    run.write_manifest(&key, vec![rel], data, t0.elapsed().as_secs_f64())?;
    println!("ldm (fold {fold}): trained");
    Ok(())
}

fn train_controlnet(run: &Run, fold: usize) -> Result<()> {
    let key = StageKey::Controlnet(fold);
    if run.up_to_date(&key)? {
        return Ok(());
    }
    let t0 = Instant::now();
    let p = patches(run)?;
    let s = split(&p, fold)?;
    let train = select(&p.samples, &s.train)?;
    let vae = load_vae(run, fold)?;
    let (den, scale) = load_denoiser(run, fold)?;
    let (branch, report) = train_controlnet_stage(&run.cfg, fold, &vae, &den, scale, &train)?;
    log(&format!(
        "fold {fold}: controlnet loss {:.4} -> {:.4}",
        report.eval_init, report.eval_trained
    ));
    let rel = format!("fold{fold}/controlnet.ckpt");
    run.save_checkpoint(&rel, &Checkpoint::from_model(&branch))?;
    let data = StageData {
        train_ids: s.train.clone(),
        latent_scale: Some(scale),
        report,
    };
    run.write_manifest(&key, vec![rel], data, t0.elapsed().as_secs_f64())?;
    println!("controlnet (fold {fold}): trained");
    Ok(())
}

fn ratio_key(fold: usize, ratio: f64) -> StageKey {
    StageKey::Generate(fold, ratio_label(ratio))
}

pub fn ratios_arg(run: &Run, ratio: Option<f64>) -> Result<Vec<f64>> {
    match ratio {
        Some(r) if !(0.0..=1.0).contains(&r) => bail!("ratio {r} outside [0, 1]"),
        Some(r) => Ok(vec![r]),
        None => Ok(run.cfg.ratios.clone()),
    }
}

pub fn generate(run: &Run, fold: usize, ratios: &[f64]) -> Result<()> {
    let todo: Vec<f64> = ratios
        .iter()
        .copied()
        .filter(|&r| !run.up_to_date(&ratio_key(fold, r)).unwrap_or(false))
        .collect();
    if todo.is_empty() {
        return Ok(());
    }
    let t0 = Instant::now();
    let p = patches(run)?;
    let s = split(&p, fold)?;
    let train = select(&p.samples, &s.train)?;
    let vae = load_vae(run, fold)?;
    let (denoiser, latent_scale) = load_denoiser(run, fold)?;
    let branch = load_branch(run, fold, &denoiser)?;
    let bundle = GenerativeBundle {
        fold,
        train_ids: s.train.clone(),
        vae,
        denoiser,
        branch,
        latent_scale,
        schedule: run.cfg.schedule.build()?,
    };
    let sets = synthesize(&run.cfg, &bundle, &train, &todo)?;
    let elapsed = t0.elapsed().as_secs_f64();
    for (r, set) in todo.iter().zip(sets) {
        let key = ratio_key(fold, *r);
        let synthetic = &set[train.len()..];
        let rel = format!("fold{fold}/synthetic_{}.ckpt", ratio_label(*r));
        let (ckpt, cases) = samples_checkpoint(synthetic);
        run.save_checkpoint(&rel, &ckpt)?;
        let data = SyntheticData {
            train_ids: s.train.clone(),
            ratio: *r,
            cases,
        };
        run.write_manifest(&key, vec![rel], data, elapsed)?;
        println!("generate (fold {fold}, ratio {r}): {} synthetic cases", synthetic.len());
    }
    Ok(())
}

fn synthetic_set(run: &Run, fold: usize, ratio: f64) -> Result<Vec<Sample>> {
    let data: SyntheticData = run.require(&ratio_key(fold, ratio))?.data()?;
    let rel = format!("fold{fold}/synthetic_{}.ckpt", ratio_label(ratio));
    samples_from(&run.load_checkpoint(&rel)?, &data.cases, &rel)
}

fn train_classifier(run: &Run, fold: usize) -> Result<()> {
    let key = StageKey::Classifier(fold);
    if run.up_to_date(&key)? {
        return Ok(());
    }
    let t0 = Instant::now();
    let p = patches(run)?;
    let s = split(&p, fold)?;
    let train = select(&p.samples, &s.train)?;
    let val = select(&p.samples, &s.val)?;
    let vae = load_vae(run, fold)?;
    let ladder = run
        .cfg
        .ratios
        .iter()
        .map(|&r| {
            let mut set = train.clone();
            set.extend(synthetic_set(run, fold, r)?);
            Ok(set)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sink = log;
    let (nets, runs) = classify_ladder(&run.cfg, fold, &vae, &ladder, &val, &mut sink)?;
    let ablation = run_ablation(&run.cfg, fold, &vae, &train, &val)?;
    let mut artifacts = Vec::new();
    for (r, net) in run.cfg.ratios.iter().zip(&nets) {
        let rel = format!("fold{fold}/classifier_{}.ckpt", ratio_label(*r));
        run.save_checkpoint(&rel, &Checkpoint::from_model(&net.net))?;
        artifacts.push(rel);
    }
    let record = ClassificationRecord {
        fold,
        val_ids: s.val.clone(),
        val_labels: val.iter().map(|v| v.patch.pni).collect(),
        runs,
        ablation,
    };
    let aucs: Vec<String> = record.runs.iter().map(|r| format!("{:.3}", r.auc)).collect();
    run.write_manifest(&key, artifacts, &record, t0.elapsed().as_secs_f64())?;
    println!("classifier (fold {fold}): val AUC by ratio {}", aucs.join(" "));
    Ok(())
}

fn generative_record(run: &Run, fold: usize) -> Result<GenerativeRecord> {
    let vae: StageData = run.require(&StageKey::Vae(fold))?.data()?;
    let ldm: StageData = run.require(&StageKey::Ldm(fold))?.data()?;
    let cn: StageData = run.require(&StageKey::Controlnet(fold))?.data()?;
    Ok(GenerativeRecord {
        fold,
        train_ids: vae.train_ids,
        latent_scale: ldm.latent_scale.context("ldm manifest lacks the latent scale")?,
        report: GenerativeReport {
            vae: vae.report,
            ldm: ldm.report,
            controlnet: cn.report,
        },
    })
}

pub fn evaluate(run: &Run, what: Evaluation) -> Result<()> {
    let key = StageKey::Evaluate(what.name().into());
    if run.up_to_date(&key)? {
        return Ok(());
    }
    let t0 = Instant::now();
    let folds = folds_arg(run, None)?;
    let (reports, data) = match what {
        Evaluation::Recon => {
            let p = patches(run)?;
            let mut generative = Vec::new();
            let mut recon: Vec<(usize, ReconMetrics)> = Vec::new();
            for &k in &folds {
                generative.push(generative_record(run, k)?);
                let val = select(&p.samples, &split(&p, k)?.val)?;
                recon.push((k, reconstruction_metrics(&load_vae(run, k)?, &val)?));
            }
            (report::generative_reports(&generative, &recon)?, serde_json::to_value(&recon)?)
        }
        Evaluation::Fid => {
            let p = patches(run)?;
            let last = *run.cfg.ratios.last().context("no ratios configured")?;
            let mut synthetic = Vec::new();
            for &k in &folds {
                synthetic.extend(synthetic_set(run, k, last)?);
            }
            let c = fid_comparison(&p.samples, &synthetic, run.cfg.fid_shift)?;
            (report::fid_reports(&c)?, serde_json::to_value(&c)?)
        }
        Evaluation::Classification => {
            let records = folds
                .iter()
                .map(|&k| run.require(&StageKey::Classifier(k))?.data())
                .collect::<Result<Vec<ClassificationRecord>>>()?;
            let means = mean_aucs(&records);
            (
                report::classification_reports(&model_name(&run.cfg), &run.cfg.ratios, &records)?,
                serde_json::to_value(&means)?,
            )
        }
    };
    let paths = report::write_reports(&run.path("reports"), &reports)?;
    let artifacts = reports.iter().map(|(n, _)| format!("reports/{n}")).collect();
    run.write_manifest(&key, artifacts, data, t0.elapsed().as_secs_f64())?;
    for p in paths {
        println!("evaluate {}: wrote {}", what.name(), p.display());
    }
    Ok(())
}

/// Every stage of every fold, then all reports.
pub fn crossval(run: &Run) -> Result<()> {
    let t0 = Instant::now();
    phantom(run)?;
    tlcr(run)?;
    for k in folds_arg(run, None)? {
        for stage in [Stage::Vae, Stage::Ldm, Stage::Controlnet] {
            train(run, stage, k)?;
        }
        generate(run, k, &run.cfg.ratios)?;
        train(run, Stage::Classifier, k)?;
    }
    for what in [Evaluation::Recon, Evaluation::Fid, Evaluation::Classification] {
        evaluate(run, what)?;
    }
    let means: Vec<f64> = run.require(&StageKey::Evaluate("classification".into()))?.data()?;
    let line: Vec<String> = run
        .cfg
        .ratios
        .iter()
        .zip(&means)
        .map(|(r, m)| format!("{}={m:.4}", ratio_label(*r)))
        .collect();
    run.write_manifest(&StageKey::Crossval, Vec::new(), &means, t0.elapsed().as_secs_f64())?;
    println!("crossval: mean val AUC {}", line.join(" "));
    println!("crossval: reports in {}", run.path("reports").display());
    Ok(())
}
