//! On-disk layout of a run: stage manifests, checkpoints and patch sets.
//!
//! Every stage writes its artifacts first and its manifest last, both
//! atomically, so a manifest on disk always describes complete outputs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pnigen_core::cohort::Sample;
use pnigen_core::ldm::checkpoint::write_atomic;
use pnigen_core::ldm::Checkpoint;
use pnigen_core::pipeline::RunConfig;
use pnigen_core::tlcr::{PatchPair, Provenance};
use pnigen_core::Grid;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum StageKey {
    Phantom,
    Tlcr,
    Vae(usize),
    Ldm(usize),
    Controlnet(usize),
    Generate(usize, String),
    Classifier(usize),
    Evaluate(String),
    Crossval,
}

impl StageKey {
    pub fn name(&self) -> String {
        match self {
            StageKey::Phantom => "phantom".into(),
            StageKey::Tlcr => "tlcr".into(),
            StageKey::Vae(k) => format!("vae (fold {k})"),
            StageKey::Ldm(k) => format!("ldm (fold {k})"),
            StageKey::Controlnet(k) => format!("controlnet (fold {k})"),
            StageKey::Generate(k, r) => format!("generate (fold {k}, ratio {r})"),
            StageKey::Classifier(k) => format!("classifier (fold {k})"),
            StageKey::Evaluate(w) => format!("evaluate {w}"),
            StageKey::Crossval => "crossval".into(),
        }
    }

    /// Manifest location relative to the run directory.
    pub fn manifest_path(&self) -> PathBuf {
        match self {
            StageKey::Phantom => "phantom/manifest.json".into(),
            StageKey::Tlcr => "patches/manifest.json".into(),
            StageKey::Vae(k) => format!("fold{k}/vae.json").into(),
            StageKey::Ldm(k) => format!("fold{k}/ldm.json").into(),
            StageKey::Controlnet(k) => format!("fold{k}/controlnet.json").into(),
            StageKey::Generate(k, r) => format!("fold{k}/synthetic_{r}.json").into(),
            StageKey::Classifier(k) => format!("fold{k}/classifier.json").into(),
            StageKey::Evaluate(w) => format!("reports/{w}.json").into(),
            StageKey::Crossval => "crossval.json".into(),
        }
    }

    /// Command that produces this stage.
    pub fn command(&self) -> String {
        match self {
            StageKey::Phantom => "pnigen phantom".into(),
            StageKey::Tlcr => "pnigen tlcr".into(),
            StageKey::Vae(k) => format!("pnigen train --stage vae --fold {k}"),
            StageKey::Ldm(k) => format!("pnigen train --stage ldm --fold {k}"),
            StageKey::Controlnet(k) => format!("pnigen train --stage controlnet --fold {k}"),
            StageKey::Generate(k, r) => format!("pnigen generate --fold {k} --ratio {}", &r[1..]),
            StageKey::Classifier(k) => format!("pnigen train --stage classifier --fold {k}"),
            StageKey::Evaluate(w) => format!("pnigen evaluate --what {w}"),
            StageKey::Crossval => "pnigen crossval".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub elapsed_secs: f64,
    /// Outputs of this stage, relative to the run directory.
    pub artifacts: Vec<String>,
    pub data: serde_json::Value,
}

impl Manifest {
    pub fn data<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.data.clone()).with_context(|| format!("malformed {} manifest", self.stage))
    }
}

/// Index entry of a stored patch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleInfo {
    pub id: String,
    pub pni: u8,
    pub provenance: String,
    pub donor: Option<String>,
}

pub struct Run {
    pub dir: PathBuf,
    pub cfg: RunConfig,
    pub hash: String,
    pub force: bool,
}

impl Run {
    pub fn new(root: &Path, cfg: RunConfig, force: bool) -> Self {
        let hash = cfg.hash();
        Run {
            dir: root.join(format!("run-{}", &hash[..12])),
            cfg,
            hash,
            force,
        }
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.dir.join(rel)
    }

    /// Completed manifest for `key` under the current config, if any.
    pub fn completed(&self, key: &StageKey) -> Result<Option<Manifest>> {
        let p = self.path(key.manifest_path());
        if !p.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        let m: Manifest = serde_json::from_str(&text).with_context(|| format!("malformed manifest {}", p.display()))?;
        if m.config_hash != self.hash || m.artifacts.iter().any(|a| !self.path(a).exists()) {
            return Ok(None);
        }
        Ok(Some(m))
    }

    /// Manifest of a stage the caller depends on.
    pub fn require(&self, key: &StageKey) -> Result<Manifest> {
        match self.completed(key)? {
            Some(m) => Ok(m),
            None => bail!(
                "missing prerequisite: stage {} has not been run for this configuration; run `{}` first",
                key.name(),
                key.command()
            ),
        }
    }

    /// Whether `key` can be skipped; prints the no-op notice.
    pub fn up_to_date(&self, key: &StageKey) -> Result<bool> {
        if self.force {
            return Ok(false);
        }
        if self.completed(key)?.is_some() {
            println!("{}: up to date", key.name());
            return Ok(true);
        }
        Ok(false)
    }

    pub fn write_manifest(&self, key: &StageKey, artifacts: Vec<String>, data: impl Serialize, elapsed: f64) -> Result<()> {
        let m = Manifest {
            stage: key.name(),
            config_hash: self.hash.clone(),
            seed: self.cfg.seed,
            elapsed_secs: elapsed,
            artifacts,
            data: serde_json::to_value(data)?,
        };
        let p = self.path(key.manifest_path());
        ensure_parent(&p)?;
        write_atomic(&p, serde_json::to_string_pretty(&m)?.as_bytes())?;
        Ok(())
    }

    pub fn save_checkpoint(&self, rel: &str, ckpt: &Checkpoint) -> Result<()> {
        let p = self.path(rel);
        ensure_parent(&p)?;
        ckpt.save(&p)?;
        Ok(())
    }

    pub fn load_checkpoint(&self, rel: &str) -> Result<Checkpoint> {
        Ok(Checkpoint::load(&self.path(rel))?)
    }

    pub fn write_text(&self, rel: &str, text: &str) -> Result<()> {
        let p = self.path(rel);
        ensure_parent(&p)?;
        write_atomic(&p, text.as_bytes())?;
        Ok(())
    }
}

pub fn ensure_parent(p: &Path) -> Result<()> {
    if let Some(d) = p.parent() {
        std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    Ok(())
}

pub fn samples_checkpoint(samples: &[Sample]) -> (Checkpoint, Vec<SampleInfo>) {
    let mut c = Checkpoint::default();
    let mut index = Vec::new();
    for s in samples {
        c.push(&format!("{}/image", s.id), s.patch.image.clone());
        c.push(&format!("{}/labels", s.id), s.patch.labels.clone());
        index.push(SampleInfo {
            id: s.id.clone(),
            pni: s.patch.pni,
            provenance: s.patch.provenance.as_str().into(),
            donor: s.donor.clone(),
        });
    }
    (c, index)
}

pub fn samples_from(c: &Checkpoint, index: &[SampleInfo], origin: &str) -> Result<Vec<Sample>> {
    index
        .iter()
        .map(|info| {
            let get = |part: &str| -> Result<Grid> {
                c.get(&format!("{}/{part}", info.id))
                    .cloned()
                    .with_context(|| format!("{origin}: no {part} for case {}", info.id))
            };
            let provenance = match info.provenance.as_str() {
                "real" => Provenance::Real,
                "synthetic" => Provenance::Synthetic,
                other => bail!("{origin}: unknown provenance {other:?}"),
            };
            let patch = PatchPair {
                image: get("image")?,
                labels: get("labels")?,
                provenance,
                pni: info.pni,
            };
            patch.validate()?;
            Ok(Sample {
                id: info.id.clone(),
                patch,
                donor: info.donor.clone(),
            })
        })
        .collect()
}
