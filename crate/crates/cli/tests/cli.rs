use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pnigen_core::pipeline::report::all_reports;
use pnigen_core::pipeline::{run_crossval, RunConfig};

const TINY: &str = r#"
dims = [16, 16, 12]
crop = [8, 8, 8]
n_pos = 4
n_neg = 8
folds = 2
ratios = [0.0, 1.0]

[schedule]
steps = 5

[vae_train]
steps = 3
checkpoint_every = 1

[ldm_train]
steps = 3
checkpoint_every = 1

[controlnet_train]
steps = 3
checkpoint_every = 1

[classifier_train]
max_epochs = 2
patience = 1
"#;

struct Env {
    _tmp: tempfile::TempDir,
    config: PathBuf,
    output: PathBuf,
}

impl Env {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let config = tmp.path().join("tiny.toml");
        std::fs::write(&config, TINY).unwrap();
        let output = tmp.path().join("out");
        Env {
            _tmp: tmp,
            config,
            output,
        }
    }

    fn pnigen(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_pnigen"))
            .args(args)
            .args(["--preset", "desk", "--config"])
            .arg(&self.config)
            .arg("--output")
            .arg(&self.output)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.pnigen(args);
        assert!(
            out.status.success(),
            "pnigen {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn fail(&self, args: &[&str]) -> String {
        let out = self.pnigen(args);
        assert!(!out.status.success(), "pnigen {args:?} unexpectedly succeeded");
        String::from_utf8(out.stderr).unwrap()
    }

    fn run_dir(&self) -> PathBuf {
        let cfg = tiny_config();
        self.output.join(format!("run-{}", &cfg.hash()[..12]))
    }
}

fn tiny_config() -> RunConfig {
    RunConfig::from_toml(TINY, &RunConfig::desk()).unwrap()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn staged_commands_match_in_memory_crossval() {
    let env = Env::new();
    env.ok(&["phantom"]);
    env.ok(&["tlcr"]);
    for stage in ["vae", "ldm", "controlnet"] {
        env.ok(&["train", "--stage", stage]);
    }
    env.ok(&["generate", "--fold", "1"]);
    env.ok(&["generate", "--fold", "2", "--ratio", "0"]);
    env.ok(&["generate", "--fold", "2", "--ratio", "1"]);
    env.ok(&["train", "--stage", "classifier"]);
    for what in ["recon", "fid", "classification"] {
        env.ok(&["evaluate", "--what", what]);
    }

    let outcome = run_crossval(&tiny_config(), &mut |_| {}).unwrap();
    let reports = all_reports(&outcome).unwrap();
    assert_eq!(reports.len(), 9);
    for (name, text) in reports {
        assert_eq!(read(&env.run_dir().join("reports").join(name)), text, "{name} differs");
    }
}

#[test]
fn completed_stages_are_skipped_until_forced() {
    let env = Env::new();
    env.ok(&["crossval"]);
    let auc = env.run_dir().join("reports/crossval_auc.csv");
    let first = read(&auc);
    let vae = env.run_dir().join("fold1/vae.ckpt");
    let stamp = std::fs::metadata(&vae).unwrap().modified().unwrap();

    let again = env.ok(&["crossval"]);
    assert!(again.contains("phantom: up to date"));
    assert!(again.contains("vae (fold 1): up to date"));
    assert!(again.contains("evaluate classification: up to date"));
    assert!(!again.contains("trained"));
    assert_eq!(std::fs::metadata(&vae).unwrap().modified().unwrap(), stamp);

    let forced = env.ok(&["train", "--stage", "vae", "--fold", "1", "--force"]);
    assert!(forced.contains("vae (fold 1): trained"));
    assert_eq!(read(&auc), first);
}

#[test]
fn crossval_reports_are_deterministic() {
    let (a, b) = (Env::new(), Env::new());
    a.ok(&["crossval"]);
    b.ok(&["crossval"]);
    let dir = a.run_dir().join("reports");
    let mut names: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .filter(|n| n.to_string_lossy().ends_with(".csv"))
        .collect();
    names.sort();
    assert_eq!(names.len(), 9);
    for n in names {
        assert_eq!(read(&dir.join(&n)), read(&b.run_dir().join("reports").join(&n)), "{n:?}");
    }
    let header = read(&dir.join("crossval_auc.csv"));
    assert!(header.starts_with("model,fold,r0.00,r1.00\n"));
    assert_eq!(header.lines().count(), 4);
}

#[test]
fn missing_prerequisite_names_the_command() {
    let env = Env::new();
    let err = env.fail(&["train", "--stage", "ldm", "--fold", "1"]);
    assert!(err.starts_with("error: missing prerequisite"), "{err}");
    assert!(err.contains("`pnigen tlcr`"), "{err}");
    assert_eq!(err.lines().count(), 1);

    env.ok(&["phantom"]);
    env.ok(&["tlcr"]);
    let err = env.fail(&["train", "--stage", "ldm", "--fold", "1"]);
    assert!(err.contains("`pnigen train --stage vae --fold 1`"), "{err}");
    let err = env.fail(&["generate", "--fold", "2", "--ratio", "0.5"]);
    assert!(err.contains("missing prerequisite"), "{err}");
}

#[test]
fn corrupt_checkpoint_error_names_the_file() {
    let env = Env::new();
    env.ok(&["phantom"]);
    env.ok(&["tlcr"]);
    env.ok(&["train", "--stage", "vae", "--fold", "1"]);
    let ckpt = env.run_dir().join("fold1/vae.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(&ckpt, bytes).unwrap();
    let err = env.fail(&["train", "--stage", "ldm", "--fold", "1"]);
    assert!(err.contains(&ckpt.display().to_string()), "{err}");
}

#[test]
fn invalid_arguments_are_rejected() {
    let env = Env::new();
    let err = env.fail(&["train", "--stage", "vae", "--fold", "3"]);
    assert!(err.contains("fold 3"), "{err}");
    std::fs::write(&env.config, "folds = 1\n").unwrap();
    let err = env.fail(&["phantom"]);
    assert!(err.contains("folds"), "{err}");
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) {
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files_under(&p, out);
        } else {
            out.push(p);
        }
    }
}

#[test]
fn every_output_belongs_to_exactly_one_manifest() {
    let env = Env::new();
    env.ok(&["crossval"]);
    let dir = env.run_dir();
    let mut files = Vec::new();
    files_under(&dir, &mut files);

    let mut owners = std::collections::BTreeMap::<String, usize>::new();
    let mut manifests = std::collections::BTreeMap::new();
    for p in &files {
        let rel = p.strip_prefix(&dir).unwrap().to_string_lossy().into_owned();
        if !rel.ends_with(".json") {
            owners.entry(rel).or_default();
            continue;
        }
        let m: serde_json::Value = serde_json::from_str(&read(p)).unwrap();
        assert_eq!(m["config_hash"], tiny_config().hash(), "{rel}");
        manifests.insert(rel, m);
    }
    for m in manifests.values() {
        for a in m["artifacts"].as_array().unwrap() {
            *owners.entry(a.as_str().unwrap().to_owned()).or_default() += 1;
        }
    }
    for (file, n) in &owners {
        assert_eq!(*n, 1, "{file} is listed by {n} manifests");
        assert!(dir.join(file).exists(), "{file} listed but missing");
    }

    for fold in 1..=2 {
        let val: Vec<&str> = manifests[&format!("fold{fold}/classifier.json")]["data"]["val_ids"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_str().unwrap())
            .collect();
        assert!(!val.is_empty());
        for stage in ["vae", "ldm", "controlnet"] {
            let train = manifests[&format!("fold{fold}/{stage}.json")]["data"]["train_ids"].as_array().unwrap();
            assert!(train.iter().all(|id| !val.contains(&id.as_str().unwrap())), "fold {fold} {stage} trained on validation cases");
        }
    }
}
