use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedsim::fed::read_history;

const BIN: &str = env!("CARGO_BIN_EXE_fedsim");

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Trains the toy config into `dir` and returns the common flags.
fn train_toy(dir: &Path, extra: &[&str]) -> Vec<String> {
    let mut flags = vec![
        "--config".to_string(),
        fixture("toy.toml").display().to_string(),
        "--output-dir".to_string(),
        dir.display().to_string(),
    ];
    flags.extend(extra.iter().map(|s| s.to_string()));
    let mut args = vec!["train".to_string()];
    args.extend(flags.clone());
    let out = Command::new(BIN).args(&args).output().unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    flags
}

fn with<'a>(cmd: &'a str, flags: &'a [String], rest: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd];
    v.extend(flags.iter().map(String::as_str));
    v.extend_from_slice(rest);
    v
}

#[test]
fn train_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    train_toy(dir.path(), &["--rounds", "2"]);
    for f in ["adapters.flra", "history.jsonl", "metrics.json", "roc.csv", "config.toml", "manifest.json", "summary.json"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let history = read_history(dir.path().join("history.jsonl")).unwrap();
    assert_eq!(history.iter().map(|r| r.round).collect::<Vec<_>>(), vec![1, 2]);
    let size = std::fs::metadata(dir.path().join("adapters.flra")).unwrap().len() as usize;
    assert_eq!(history[0].adapter_bytes, size);
    assert_eq!(history[0].bytes_exchanged, 2 * size);
}

#[test]
fn identical_seeds_give_identical_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = train_toy(a.path(), &["--seed", "7", "--rounds", "2"]);
    let fb = train_toy(b.path(), &["--seed", "7", "--rounds", "2"]);
    for f in ["history.jsonl", "adapters.flra", "metrics.json", "summary.json"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
    let synth = a.path().join("synth");
    assert_eq!(code(&run(&with("synth", &fa, &["--out", synth.to_str().unwrap()]))), 0);
    let image = synth.join("class1/00008.png");
    let mut pngs = vec![];
    for (dir, flags) in [(&a, &fa), (&b, &fb)] {
        let ckpt = dir.path().join("adapters.flra");
        let png = dir.path().join("cam.png");
        let args = with(
            "gradcam",
            flags,
            &["--checkpoint", ckpt.to_str().unwrap(), "--image", image.to_str().unwrap(), "--class", "1", "--out", png.to_str().unwrap()],
        );
        let out = run(&args);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        pngs.push(std::fs::read(png).unwrap());
    }
    assert_eq!(pngs[0], pngs[1]);
}

#[test]
fn missing_dataset_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train", "--output-dir", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("no dataset"));
    let out = run(&["train", "--data", dir.path().join("nowhere").to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn invalid_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[optim]\nlr = -1.0\n").unwrap();
    let out = run(&["train", "--synthetic", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("optim.lr"), "{}", stderr(&out));
    std::fs::write(&cfg, "[federation]\nclient = 3\n").unwrap();
    let out = run(&["train", "--synthetic", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("client"), "{}", stderr(&out));
    assert_eq!(code(&run(&["frobnicate"])), 2);
}

#[test]
fn eval_reproduces_recorded_validation_and_overfits_train() {
    let dir = tempfile::tempdir().unwrap();
    let flags = train_toy(dir.path(), &[]);
    let ckpt = dir.path().join("adapters.flra");
    let history = read_history(dir.path().join("history.jsonl")).unwrap();
    let last = history.last().unwrap();

    let report = dir.path().join("val.json");
    let out = run(&with("eval", &flags, &["--checkpoint", ckpt.to_str().unwrap(), "--split", "val", "--out", report.to_str().unwrap()]));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(v["mean_loss"].as_f64().unwrap(), last.validation.loss);
    assert_eq!(v["accuracy"].as_f64().unwrap(), last.validation.accuracy);
    assert_eq!(v["auc_macro"].as_f64().unwrap(), last.validation.auc_macro);
    assert_eq!(v["f1_macro"].as_f64().unwrap(), last.validation.f1_macro);

    let out = run(&with("eval", &flags, &["--checkpoint", ckpt.to_str().unwrap(), "--split", "train"]));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("eval-train.json")).unwrap()).unwrap();
    assert_eq!(v["accuracy"].as_f64().unwrap(), 1.0);

    let out = run(&with("eval", &flags, &["--checkpoint", ckpt.to_str().unwrap(), "--split", "holdout"]));
    assert_eq!(code(&out), 2);
}

#[test]
fn checkpoint_failures_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let flags = train_toy(dir.path(), &["--rounds", "1"]);
    let ckpt = dir.path().join("adapters.flra");

    let bad = dir.path().join("bad.flra");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[..4].copy_from_slice(b"XXXX");
    std::fs::write(&bad, bytes).unwrap();
    let out = run(&with("eval", &flags, &["--checkpoint", bad.to_str().unwrap()]));
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("bad magic"));
    let out = run(&["inspect-checkpoint", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("bad magic"));

    // another seed builds different frozen weights
    let out = run(&with("eval", &flags, &["--seed", "99", "--checkpoint", ckpt.to_str().unwrap()]));
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("fingerprint"));

    let out = run(&with("eval", &flags, &["--checkpoint", dir.path().join("absent.flra").to_str().unwrap()]));
    assert_eq!(code(&out), 3);
}

#[test]
fn inspect_lists_adapters() {
    let dir = tempfile::tempdir().unwrap();
    train_toy(dir.path(), &["--rounds", "1"]);
    let out = run(&["inspect-checkpoint", dir.path().join("adapters.flra").to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("small.block0.attn.q"), "{text}");
    assert!(text.contains("format version 1"));
}

#[test]
fn gradcam_png_and_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let flags = train_toy(dir.path(), &["--rounds", "1"]);
    let ckpt = dir.path().join("adapters.flra");
    let synth = dir.path().join("synth");
    assert_eq!(code(&run(&with("synth", &flags, &["--out", synth.to_str().unwrap()]))), 0);
    assert!(synth.join("manifest.json").is_file());
    let image = synth.join("class2/00019.png");
    let png = dir.path().join("cam.png");
    let args = |class: &'static str| {
        with(
            "gradcam",
            &flags,
            &["--checkpoint", ckpt.to_str().unwrap(), "--image", image.to_str().unwrap(), "--class", class, "--out", png.to_str().unwrap()],
        )
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>()
    };
    let out = Command::new(BIN).args(args("2")).output().unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let decoded = image::open(&png).unwrap();
    assert_eq!((decoded.width(), decoded.height()), (32, 32));

    let golden = fixture("gradcam_golden.png");
    let produced = std::fs::read(&png).unwrap();
    if std::env::var_os("FEDSIM_BLESS").is_some() {
        std::fs::write(&golden, &produced).unwrap();
    }
    assert_eq!(produced, std::fs::read(&golden).unwrap(), "overlay differs from the pinned golden file");

    let out = Command::new(BIN).args(args("4")).output().unwrap();
    assert_eq!(code(&out), 2);
}
