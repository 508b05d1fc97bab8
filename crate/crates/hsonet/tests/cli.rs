mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::TINY_TOML;
use hsonet::checkpoint::FORMAT_VERSION;
use hsonet::io::{read_mask, read_prob16};

fn hsonet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsonet")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = hsonet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::write(root.join("tiny.toml"), TINY_TOML).unwrap();
        Self { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn synth(&self, name: &str, n: usize, seed: u64) -> PathBuf {
        let out = self.path(name);
        ok(&[
            "--config", s(&self.path("tiny.toml")),
            "--seed", &seed.to_string(),
            "--out", s(&out),
            "synth", "--n", &n.to_string(),
        ]);
        out
    }

    fn train(&self, name: &str, data: &Path, extra: &[&str]) -> PathBuf {
        let (out, cfg) = (self.path(name), self.path("tiny.toml"));
        let mut args = vec!["--config", s(&cfg), "--out", s(&out)];
        let tail = ["train", "--data", s(data)];
        args.extend(tail);
        args.extend(extra);
        ok(&args);
        out
    }
}

#[test]
fn synth_is_deterministic() {
    let f = Fixture::new();
    let a = f.synth("a", 8, 7);
    let b = f.synth("b", 8, 7);
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 8 * 4 + 1);
    assert_eq!(ta, tb);
    let c = f.synth("c", 8, 8);
    assert_ne!(tree(&c), ta);
}

#[test]
fn synth_zero_writes_only_the_manifest() {
    let f = Fixture::new();
    let d = f.synth("empty", 0, 1);
    let files: Vec<_> = tree(&d).into_keys().collect();
    assert_eq!(files, [PathBuf::from("manifest.json")]);
}

#[test]
fn synth_hard_case_rate_sets_tagged_share() {
    let f = Fixture::new();
    let out = f.path("hard");
    ok(&[
        "--config", s(&f.path("tiny.toml")), "--seed", "5", "--out", s(&out),
        "synth", "--n", "100", "--width", "128", "--height", "128", "--hard-case-rate", "0.5",
    ]);
    let ds = hsonet::io::load_folder(&out).unwrap();
    let (mut changed, mut tagged) = (0usize, 0usize);
    for lp in &ds.pairs {
        for (&m, &t) in lp.mask.pixels().iter().zip(lp.hardness.pixels()) {
            changed += usize::from(m == 1);
            tagged += usize::from(m == 1 && t.is_hard());
        }
    }
    let share = tagged as f64 / changed as f64;
    assert!((share - 0.5).abs() <= 0.1, "tagged share {share}");
}

#[test]
fn missing_dataset_exits_with_usage_code() {
    let f = Fixture::new();
    let missing = f.path("nowhere");
    let out = hsonet(&["--out", s(&f.path("o")), "train", "--data", s(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
    assert!(!f.path("o").exists());
}

#[test]
fn invalid_config_lists_every_problem() {
    let f = Fixture::new();
    let data = f.synth("d", 2, 1);
    let out = hsonet(&[
        "--config", s(&f.path("tiny.toml")), "--out", s(&f.path("o")),
        "train", "--data", s(&data), "--batch-size", "0", "--lr=-1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("batch_size") && err.contains("learning_rate"), "{err}");
    assert!(!f.path("o").exists());

    std::fs::write(f.path("bad.toml"), "[train]\nstepz = 3\n").unwrap();
    let out = hsonet(&["--config", s(&f.path("bad.toml")), "train", "--data", s(&data)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cli_flags_override_the_config_file() {
    let f = Fixture::new();
    let data = f.synth("d", 2, 1);
    let run = f.train("run", &data, &["--steps", "1", "--no-augment"]);
    let cfg = hsonet::config::Config::load(&run.join("config.toml")).unwrap();
    assert_eq!(cfg.train.steps, 1);
    assert_eq!(cfg.train.batch_size, 2);
    assert!(!cfg.train.augment);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["train"]["steps"], 1);
    assert!(manifest["build"].is_string());
}

#[test]
fn bce_and_eo_gamma_zero_log_the_same_first_loss() {
    let f = Fixture::new();
    let data = f.synth("d", 4, 2);
    let flags = ["--steps", "1", "--eval-interval", "1"];
    let bce = f.train("bce", &data, &[&flags[..], &["--loss", "bce"]].concat());
    let eo = f.train("eo", &data, &[&flags[..], &["--loss", "eo", "--gamma", "0"]].concat());
    let read = |d: &Path| std::fs::read_to_string(d.join("curve.csv")).unwrap();
    assert_eq!(read(&bce), read(&eo));
    assert_eq!(read(&bce).lines().count(), 2);
}

#[test]
fn train_eval_predict_metrics_round() {
    let f = Fixture::new();
    let data = f.synth("d", 4, 3);
    let run = f.train("run", &data, &[]);
    for name in ["model.ckpt", "curve.csv", "manifest.json", "config.toml"] {
        assert!(run.join(name).is_file(), "{name}");
    }
    let ckpt = run.join("model.ckpt");

    // eval: the seven metrics, plus the hardness breakdown
    let ev = f.path("ev");
    ok(&["--out", s(&ev), "eval", "--ckpt", s(&ckpt), "--data", s(&data), "--colorize"]);
    let csv = std::fs::read_to_string(ev.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "step,P,R,F1,OA,mIOU,IOU,Kappa");
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["metrics"].as_object().unwrap().len(), 7);
    assert!(report["hardness"].is_object());
    assert_eq!(tree(&ev.join("overlays")).len(), 4);

    // predict each pair, then score the written masks with the metrics command
    let preds = f.path("preds");
    std::fs::create_dir_all(&preds).unwrap();
    for i in 0..4 {
        let name = hsonet::io::sample_name(i);
        let out = f.path(&format!("p{i}"));
        ok(&[
            "--out", s(&out), "predict", "--ckpt", s(&ckpt),
            "--t1", s(&data.join("A").join(&name)), "--t2", s(&data.join("B").join(&name)),
        ]);
        std::fs::copy(out.join("mask.png"), preds.join(&name)).unwrap();
    }
    let m = f.path("m");
    ok(&["--out", s(&m), "metrics", "--pred", s(&preds), "--gt", s(&data.join("label"))]);
    let mreport: serde_json::Value =
        serde_json::from_slice(&std::fs::read(m.join("report.json")).unwrap()).unwrap();
    assert_eq!(mreport["counts"], report["counts"]);
    assert_eq!(mreport["metrics"], report["metrics"]);
}

#[test]
fn predict_is_deterministic_and_honours_threshold() {
    let f = Fixture::new();
    let data = f.synth("d", 2, 4);
    let run = f.train("run", &data, &["--steps", "2"]);
    let ckpt = run.join("model.ckpt");
    let (t1, t2) = (data.join("A/00000.png"), data.join("B/00000.png"));
    let predict = |name: &str, extra: &[&str]| {
        let out = f.path(name);
        let mut args = vec!["--out", s(&out), "predict", "--ckpt", s(&ckpt), "--t1", s(&t1), "--t2", s(&t2)];
        args.extend(extra);
        ok(&args);
        out
    };
    let a = predict("a", &[]);
    let b = predict("b", &[]);
    assert_eq!(tree(&a), tree(&b));
    assert!(!a.join("overlay.png").exists());

    let c = predict("c", &["--threshold", "0.7", "--gt", s(&data.join("label/00000.png"))]);
    assert!(c.join("overlay.png").is_file());
    let probs = read_prob16(&c.join("prob.png")).unwrap();
    let mask = read_mask(&c.join("mask.png")).unwrap();
    let step = 1.0 / 65535.0;
    for (&p, &m) in probs.pixels().iter().zip(mask.pixels()) {
        if (p - 0.7).abs() > step {
            assert_eq!(m, u8::from(p >= 0.7));
        }
    }
    assert_eq!(tree(&a).get(Path::new("prob.png")), tree(&c).get(Path::new("prob.png")));
}

#[test]
fn eval_rejects_empty_data_and_foreign_checkpoints() {
    let f = Fixture::new();
    let data = f.synth("d", 2, 5);
    let run = f.train("run", &data, &["--steps", "1"]);
    let ckpt = run.join("model.ckpt");

    let empty = f.synth("empty", 0, 1);
    let out = hsonet(&["--out", s(&f.path("e")), "eval", "--ckpt", s(&ckpt), "--data", s(&empty)]);
    assert_eq!(out.status.code(), Some(2));

    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    let future = f.path("future.ckpt");
    std::fs::write(&future, bytes).unwrap();
    let out = hsonet(&["--out", s(&f.path("e")), "eval", "--ckpt", s(&future), "--data", s(&data)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains(&(FORMAT_VERSION + 1).to_string()) && err.contains(&FORMAT_VERSION.to_string()),
        "{err}"
    );
}

#[test]
fn resume_flag_continues_a_run() {
    let f = Fixture::new();
    let data = f.synth("d", 3, 6);
    // the schedules derive from the run length, so pin them
    let pinned = ["--lr-step", "2", "--schedule-step", "4"];
    let full = f.train("full", &data, &[&pinned[..], &["--steps", "4"]].concat());
    let half = f.train("half", &data, &[&pinned[..], &["--steps", "2"]].concat());
    let resumed = f.path("resumed");
    ok(&[
        "--out", s(&resumed), "train", "--data", s(&data),
        "--resume", s(&half.join("model.ckpt")), "--steps", "4",
    ]);
    let a = hsonet::checkpoint::Checkpoint::load(&full.join("model.ckpt")).unwrap();
    let b = hsonet::checkpoint::Checkpoint::load(&resumed.join("model.ckpt")).unwrap();
    assert_eq!(a.t, b.t);
    assert_eq!(a.params, b.params);
}
