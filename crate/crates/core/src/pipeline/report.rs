//! CSV renderings of experiment records. Column order is fixed and floats
//! use a fixed number of decimals, so equal runs give equal bytes.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::ldm::checkpoint::write_atomic;
use crate::metrics::View;

use super::experiment::{mean_aucs, ClassificationRecord, CrossvalOutcome, FidComparison, GenerativeRecord, ReconMetrics};

fn render(header: &[&str], rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn f(v: f64) -> String {
    format!("{v:.6}")
}

pub fn ratio_label(r: f64) -> String {
    format!("r{r:.2}")
}

/// Fold × ratio grid of validation AUCs for one model, closed by a mean row.
pub fn auc_grid(model: &str, ratios: &[f64], records: &[ClassificationRecord]) -> Result<String> {
    let mut header = vec!["model".to_string(), "fold".to_string()];
    header.extend(ratios.iter().map(|&r| ratio_label(r)));
    let mut rows: Vec<Vec<String>> = records
        .iter()
        .map(|rec| {
            let mut r = vec![model.to_string(), rec.fold.to_string()];
            r.extend(rec.runs.iter().map(|run| f(run.auc)));
            r
        })
        .collect();
    let mut mean = vec![model.to_string(), "mean".to_string()];
    mean.extend(mean_aucs(records).into_iter().map(f));
    rows.push(mean);
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    render(&h, rows)
}

pub fn predictions(records: &[ClassificationRecord]) -> Result<String> {
    let rows = records
        .iter()
        .flat_map(|r| r.predictions())
        .map(|p| {
            vec![
                p.case_id,
                p.fold.to_string(),
                ratio_label(p.ratio),
                p.provenance,
                p.pni_true.to_string(),
                f(p.probability),
            ]
        })
        .collect();
    render(&["case_id", "fold", "ratio", "provenance", "pni_true", "probability"], rows)
}

/// ROC points per fold and ratio; thresholds are logits.
pub fn roc_points(records: &[ClassificationRecord]) -> Result<String> {
    let mut rows = Vec::new();
    for rec in records {
        for run in &rec.runs {
            for p in rec.roc(run)? {
                rows.push(vec![rec.fold.to_string(), ratio_label(run.ratio), f(p.threshold), f(p.fpr), f(p.tpr)]);
            }
        }
    }
    render(&["fold", "ratio", "threshold", "fpr", "tpr"], rows)
}

/// Per-epoch classifier training loss and validation AUC.
pub fn classifier_curves(records: &[ClassificationRecord]) -> Result<String> {
    let mut rows = Vec::new();
    for rec in records {
        for run in &rec.runs {
            let h = &run.history;
            for (i, (l, a)) in h.train_losses.iter().zip(&h.val_aucs).enumerate() {
                rows.push(vec![rec.fold.to_string(), ratio_label(run.ratio), (i + 1).to_string(), f(*l), f(*a)]);
            }
        }
    }
    render(&["fold", "ratio", "epoch", "train_loss", "val_auc"], rows)
}

pub fn ablation(records: &[ClassificationRecord]) -> Result<String> {
    let mut rows = Vec::new();
    let names: Vec<String> = records
        .first()
        .map(|r| r.ablation.iter().map(|a| a.0.clone()).collect())
        .unwrap_or_default();
    for (i, name) in names.iter().enumerate() {
        let mut total = 0.0;
        for rec in records {
            let auc = rec
                .ablation
                .get(i)
                .ok_or_else(|| Error::Invalid(format!("fold {} lacks ablation variant {name}", rec.fold)))?
                .1;
            rows.push(vec![name.clone(), rec.fold.to_string(), f(auc)]);
            total += auc;
        }
        rows.push(vec![name.clone(), "mean".into(), f(total / records.len() as f64)]);
    }
    render(&["variant", "fold", "auc"], rows)
}

/// Per-step training losses of the three generative stages.
pub fn generative_losses(records: &[GenerativeRecord]) -> Result<String> {
    let mut rows = Vec::new();
    for g in records {
        let r = &g.report;
        for (stage, rep) in [("vae", &r.vae), ("ldm", &r.ldm), ("controlnet", &r.controlnet)] {
            for (i, l) in rep.history.losses.iter().enumerate() {
                rows.push(vec![stage.into(), g.fold.to_string(), (i + 1).to_string(), f(*l)]);
            }
        }
    }
    render(&["stage", "fold", "step", "loss"], rows)
}

/// Fixed-set evaluation losses before and after each generative stage.
pub fn generative_summary(records: &[GenerativeRecord]) -> Result<String> {
    let mut rows = Vec::new();
    for g in records {
        let r = &g.report;
        let fold = g.fold.to_string();
        for (stage, rep) in [("vae", &r.vae), ("ldm", &r.ldm), ("controlnet", &r.controlnet)] {
            rows.push(vec![stage.into(), fold.clone(), "eval_init".into(), f(rep.eval_init)]);
            rows.push(vec![stage.into(), fold.clone(), "eval_trained".into(), f(rep.eval_trained)]);
            rows.push(vec![stage.into(), fold.clone(), "best_loss".into(), f(rep.history.best_loss)]);
        }
        rows.push(vec!["ldm".into(), fold, "latent_scale".into(), f(g.latent_scale)]);
    }
    render(&["stage", "fold", "quantity", "value"], rows)
}

pub fn recon(records: &[(usize, ReconMetrics)]) -> Result<String> {
    let mut rows = Vec::new();
    let n = records.len().max(1) as f64;
    for (name, get) in [
        ("psnr", (|m: &ReconMetrics| m.psnr) as fn(&ReconMetrics) -> f64),
        ("ssim", |m| m.ssim),
        ("tumor_dice", |m| m.tumor_dice),
    ] {
        for (fold, m) in records {
            rows.push(vec![name.to_string(), fold.to_string(), f(get(m))]);
        }
        let mean = records.iter().map(|(_, m)| get(m)).sum::<f64>() / n;
        rows.push(vec![name.to_string(), "mean".into(), f(mean)]);
    }
    render(&["metric", "fold", "value"], rows)
}

pub fn fid(c: &FidComparison) -> Result<String> {
    let mut rows = Vec::new();
    for (name, rep) in [
        ("real_vs_real_subset", &c.real_vs_subset),
        ("real_vs_synthetic", &c.real_vs_synthetic),
        ("real_vs_shifted_synthetic", &c.real_vs_shifted),
    ] {
        for v in View::ALL {
            rows.push(vec![name.to_string(), v.as_str().to_string(), f(rep.get(v))]);
        }
        rows.push(vec![name.to_string(), "average".into(), f(rep.average)]);
    }
    render(&["comparison", "view", "fid"], rows)
}

pub const CLASSIFICATION_REPORTS: [&str; 5] =
    ["crossval_auc.csv", "predictions.csv", "roc.csv", "classifier_curves.csv", "ablation.csv"];
pub const GENERATIVE_REPORTS: [&str; 3] = ["generative_losses.csv", "generative.csv", "recon.csv"];
pub const FID_REPORTS: [&str; 1] = ["fid.csv"];

pub fn classification_reports(
    model: &str,
    ratios: &[f64],
    records: &[ClassificationRecord],
) -> Result<Vec<(&'static str, String)>> {
    let texts = [
        auc_grid(model, ratios, records)?,
        predictions(records)?,
        roc_points(records)?,
        classifier_curves(records)?,
        ablation(records)?,
    ];
    Ok(CLASSIFICATION_REPORTS.into_iter().zip(texts).collect())
}

pub fn generative_reports(
    generative: &[GenerativeRecord],
    recon_metrics: &[(usize, ReconMetrics)],
) -> Result<Vec<(&'static str, String)>> {
    let texts = [
        generative_losses(generative)?,
        generative_summary(generative)?,
        recon(recon_metrics)?,
    ];
    Ok(GENERATIVE_REPORTS.into_iter().zip(texts).collect())
}

pub fn fid_reports(c: &FidComparison) -> Result<Vec<(&'static str, String)>> {
    Ok(vec![(FID_REPORTS[0], fid(c)?)])
}

/// Every report of a cross-validation run, in a fixed order.
pub fn all_reports(o: &CrossvalOutcome) -> Result<Vec<(&'static str, String)>> {
    let mut v = classification_reports(&o.model, &o.ratios, &o.classification())?;
    v.extend(generative_reports(&o.generative(), &o.recon())?);
    v.extend(fid_reports(&o.fid)?);
    Ok(v)
}

pub fn write_reports(dir: &Path, reports: &[(&'static str, String)]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for (name, text) in reports {
        let p = dir.join(name);
        write_atomic(&p, text.as_bytes())?;
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pattennet::ClassifierHistory;
    use crate::pipeline::experiment::RatioRun;

    fn record(fold: usize, aucs: &[f64]) -> ClassificationRecord {
        ClassificationRecord {
            fold,
            val_ids: vec!["a".into(), "b".into()],
            val_labels: vec![0, 1],
            runs: aucs
                .iter()
                .enumerate()
                .map(|(i, &auc)| RatioRun {
                    ratio: i as f64 / 2.0,
                    n_train: 4,
                    history: ClassifierHistory::default(),
                    auc,
                    logits: vec![-1.0, 1.0],
                })
                .collect(),
            ablation: vec![("2xdual".into(), 0.5)],
        }
    }

    #[test]
    fn auc_grid_layout() {
        let recs = [record(1, &[0.5, 1.0]), record(2, &[1.0, 1.0])];
        let text = auc_grid("m", &[0.0, 0.5], &recs).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "model,fold,r0.00,r0.50");
        assert_eq!(lines[1], "m,1,0.500000,1.000000");
        assert_eq!(lines[3], "m,mean,0.750000,1.000000");
        assert_eq!(lines.len(), 4);
    }

    #[test]
    fn predictions_and_roc_rows() {
        let recs = [record(3, &[0.5])];
        let p = predictions(&recs).unwrap();
        assert_eq!(p.lines().count(), 3);
        assert!(p.lines().nth(2).unwrap().starts_with("b,3,r0.00,real,1,0.731"));
        let roc = roc_points(&recs).unwrap();
        assert_eq!(roc.lines().nth(1).unwrap(), "3,r0.00,inf,0.000000,0.000000");
        let abl = ablation(&recs).unwrap();
        assert_eq!(abl.lines().last().unwrap(), "2xdual,mean,0.500000");
    }
}
