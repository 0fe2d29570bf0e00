use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{"iterations": 6, "batch_size": 2, "record_every": 2,
 "data": {"train_mixtures": 3, "val_mixtures": 1, "crop_frames": 6, "synth": {"duration_s": [0.1, 0.12]}},
 "model": {"hidden": 4, "layers": 1, "embedding_dim": 3}}"#;

fn autoclip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_autoclip")).args(args).output().unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("autoclip-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.in.json");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn gradcheck_reports_are_reproducible() {
    let a = autoclip(&["gradcheck", "--loss", "wkm", "--seed", "3"]);
    let b = autoclip(&["gradcheck", "--loss", "wkm", "--seed", "3"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().all(|l| l.ends_with("PASS") && l.contains("loss=wkm")));
}

#[test]
fn unknown_loss_is_a_usage_error() {
    let out = autoclip(&["gradcheck", "--loss", "psa"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown loss"));
}

#[test]
fn train_writes_deterministic_outputs() {
    let dir = scratch("train");
    let cfg = config(&dir, TINY);
    let (a, b) = (dir.join("a"), dir.join("b"));
    for out in [&a, &b] {
        let o = autoclip(&["train", "--config", &cfg, "--seed", "4", "--loss", "snr", "--p", "25", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["dynamics.csv", "results.csv", "checkpoint.json", "config.json"] {
        assert_eq!(read(&a, name), read(&b, name), "{name}");
    }
    assert!(read(&a, "dynamics.csv").starts_with("iter,loss,grad_norm,clip_threshold,fired,step_size,smoothness\n"));
    let results = read(&a, "results.csv");
    assert!(results.starts_with("p,loss,si_sdr_db,final_train_loss,fire_fraction\n25,snr,"));
    assert!(read(&a, "config.json").contains("\"seed\": 4"));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn no_clipping_run_reports_infinite_threshold() {
    let dir = scratch("none");
    let cfg = config(&dir, TINY);
    let out = dir.join("run");
    assert!(autoclip(&["train", "--config", &cfg, "--p", "none", "--out", out.to_str().unwrap()]).status.success());
    let dynamics = read(&out, "dynamics.csv");
    assert!(dynamics.lines().skip(1).all(|l| l.split(',').nth(3) == Some("inf")));
    assert!(read(&out, "results.csv").lines().nth(1).unwrap().starts_with("none,mi,"));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn resumed_training_matches_a_straight_run() {
    let dir = scratch("resume");
    let cfg = config(&dir, TINY);
    let (straight, half, rest) = (dir.join("straight"), dir.join("half"), dir.join("rest"));
    assert!(autoclip(&["train", "--config", &cfg, "--iterations", "10", "--out", straight.to_str().unwrap()]).status.success());
    assert!(autoclip(&["train", "--config", &cfg, "--iterations", "4", "--out", half.to_str().unwrap()]).status.success());
    let ck = half.join("checkpoint.json");
    let o = autoclip(&["train", "--resume", ck.to_str().unwrap(), "--iterations", "10", "--out", rest.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["dynamics.csv", "results.csv", "checkpoint.json"] {
        assert_eq!(read(&straight, name), read(&rest, name), "{name}");
    }
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn sweep_writes_results_and_table() {
    let dir = scratch("sweep");
    let cfg = config(&dir, TINY);
    let out = dir.join("sweep");
    let o = autoclip(&["sweep", "--config", &cfg, "--p", "10,100,none", "--loss", "mi,dc", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let results = read(&out, "results.csv");
    assert_eq!(results.lines().count(), 7);
    let table = read(&out, "table.csv");
    assert_eq!(table.lines().next(), Some("p,mi,dc"));
    assert_eq!(table.lines().count(), 4);
    assert!(!out.join("errors.txt").exists());
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn exploding_run_exits_nonzero() {
    let dir = scratch("explode");
    let text = TINY.replacen(
        "{",
        r#"{"loss_scale": 1e300, "clip": {"mode": {"kind": "none"}}, "optimizer": {"kind": "sgd", "lr": 1e300},"#,
        1,
    );
    let cfg = config(&dir, &text);
    let out = dir.join("run");
    let o = autoclip(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("iteration"));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn static_sweep_without_threshold_is_rejected() {
    let dir = scratch("static");
    let cfg = config(&dir, TINY);
    let o = autoclip(&["sweep", "--config", &cfg, "--p", "static", "--out", dir.join("s").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("static"));
    fs::remove_dir_all(&dir).unwrap();
}
