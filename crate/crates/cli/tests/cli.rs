use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn vtp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vtp"))
        .args(args)
        .env_remove("VTP_THREADS")
        .output()
        .expect("spawn vtp")
}

fn toy(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("configs")
        .join(name)
        .display()
        .to_string()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn train_toy(dir: &Path, extra: &[&str]) -> Output {
    let cfg = toy("toy_cls.cfg");
    let out = dir.display().to_string();
    let mut args = vec!["--deterministic", "train", "--config", &cfg, "--output-dir", &out, "-q"];
    args.extend(extra);
    vtp(&args)
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn toy_train_writes_three_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let o = train_toy(&dir, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(files(&dir), ["config.cfg", "final.ckpt", "metrics.csv"]);
    let csv = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn missing_config_is_a_usage_error() {
    let o = vtp(&["train"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    let o = vtp(&["train", "--config", "/definitely/not/here.cfg"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn invalid_config_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "task = cls\nblocks.0.c = 12\n").unwrap();
    let o = vtp(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    fs::write(&cfg, "task = cls\nno_such_key = 1\n").unwrap();
    let o = vtp(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
}

#[test]
fn deterministic_reruns_give_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    assert_eq!(code(&train_toy(&dir, &[])), 0);
    let metrics = fs::read(dir.join("metrics.csv")).unwrap();
    let ckpt = fs::read(dir.join("final.ckpt")).unwrap();
    assert_eq!(code(&train_toy(&dir, &[])), 0);
    assert_eq!(metrics, fs::read(dir.join("metrics.csv")).unwrap());
    assert!(ckpt == fs::read(dir.join("final.ckpt")).unwrap());
    assert_eq!(code(&train_toy(&dir, &["--seed", "7"])), 0);
    assert_ne!(metrics, fs::read(dir.join("metrics.csv")).unwrap());
}

fn last_metrics(dir: &Path) -> Vec<String> {
    let csv = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    csv.lines().last().unwrap().split(',').map(str::to_string).collect()
}

#[test]
fn eval_on_train_split_matches_last_epoch() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    assert_eq!(code(&train_toy(&dir, &[])), 0);
    let report = tmp.path().join("report.csv");
    let ckpt = dir.join("final.ckpt");
    let o = vtp(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--split",
        "train",
        "--output",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&report).unwrap();
    let got: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    let last = last_metrics(&dir);
    // loss, OA, mAcc, mIoU on the training set
    assert_eq!(got, last[1..5].iter().map(String::as_str).collect::<Vec<_>>());

    let o = vtp(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--output", report.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(&report).unwrap();
    let got: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(got, last[7..11].iter().map(String::as_str).collect::<Vec<_>>());
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    assert_eq!(code(&train_toy(&dir, &[])), 0);
    let ckpt = dir.join("final.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[0] = b'X';
    let bad = tmp.path().join("bad.ckpt");
    fs::write(&bad, &bytes).unwrap();
    let o = vtp(&["eval", "--checkpoint", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("magic"));
    let o = vtp(&["eval", "--checkpoint", tmp.path().join("none.ckpt").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn empty_datasets_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tmp.path().join("empty.txt");
    fs::write(&manifest, "# nothing here\n").unwrap();
    let dir = tmp.path().join("run");
    assert_eq!(code(&train_toy(&dir, &[])), 0);
    let o = vtp(&[
        "eval",
        "--checkpoint",
        dir.join("final.ckpt").to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3);
    assert!(!String::from_utf8_lossy(&o.stdout).contains("NaN"));

    let cfg = tmp.path().join("empty.cfg");
    fs::write(&cfg, "task = cls\ndata.train_clouds = 0\n").unwrap();
    let o = vtp(&["train", "--config", cfg.to_str().unwrap(), "--output-dir", dir.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
}

#[test]
fn gradcheck_scopes_and_exit_codes() {
    let o = vtp(&["gradcheck", "inner_self_attention"]);
    assert_eq!(code(&o), 0);
    let stdout = String::from_utf8_lossy(&o.stdout);
    let rows: Vec<&str> = stdout.lines().filter(|l| l.ends_with(" ok") || l.ends_with("FAIL")).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("inner_self_attention"));
    assert_eq!(code(&vtp(&["gradcheck", "negative_control"])), 1);
    assert_eq!(code(&vtp(&["gradcheck", "no_such_op"])), 2);
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_vtp"))
        .args(["gradcheck", "relu"])
        .env("VTP_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    let o = Command::new(env!("CARGO_BIN_EXE_vtp"))
        .args(["gradcheck", "relu"])
        .env("VTP_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&vtp(&["--help"])), 0);
    assert_eq!(code(&vtp(&["--version"])), 0);
    assert_eq!(code(&vtp(&["frobnicate"])), 2);
}

fn gen_seg(dir: &Path, format: &str) -> PathBuf {
    let out = dir.display().to_string();
    let o = vtp(&[
        "gen-data", "--task", "seg", "--clouds", "4", "--points", "96", "--format", format, "--output-dir", &out,
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir.join("manifest.txt")
}

#[test]
fn file_backed_training_infer_and_export() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = gen_seg(&tmp.path().join("data"), "ply");
    assert_eq!(fs::read_to_string(&manifest).unwrap().lines().count(), 4);
    let held = gen_seg(&tmp.path().join("held"), "xyzn");
    let cfg = tmp.path().join("files.cfg");
    let base = fs::read_to_string(toy("toy_seg.cfg")).unwrap();
    let base: String = base.lines().filter(|l| !l.starts_with("data.") && !l.starts_with("train.epochs")).map(|l| format!("{l}\n")).collect();
    fs::write(
        &cfg,
        format!(
            "{base}data.source = files\ndata.train_manifest = data/manifest.txt\ndata.eval_manifest = {}\nmodel.categories = 1\ntrain.epochs = 2\n",
            held.display()
        ),
    )
    .unwrap();
    let run = tmp.path().join("run");
    let o = vtp(&["train", "--config", cfg.to_str().unwrap(), "--output-dir", run.to_str().unwrap(), "-q"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = run.join("final.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let cloud = tmp.path().join("data/cloud_00000.ply");
    let cloud = cloud.to_str().unwrap();

    let labeled = tmp.path().join("labeled.xyzn");
    let o = vtp(&["infer", "--checkpoint", ckpt, "--input", cloud, "--category", "0", "--output", labeled.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(&labeled).unwrap().lines().count(), 96);
    assert_eq!(code(&vtp(&["infer", "--checkpoint", ckpt, "--input", cloud])), 2);
    assert_eq!(code(&vtp(&["infer", "--checkpoint", ckpt, "--input", cloud, "--category", "5"])), 3);

    let (a, b) = (tmp.path().join("a.ply"), tmp.path().join("b.ply"));
    for p in [&a, &b] {
        let o = vtp(&["export", "--checkpoint", ckpt, "--input", cloud, "--category", "0", "--output", p.to_str().unwrap()]);
        assert_eq!(code(&o), 0);
    }
    let bytes = fs::read(&a).unwrap();
    assert_eq!(bytes, fs::read(&b).unwrap());
    assert!(String::from_utf8_lossy(&bytes[..200]).contains("element vertex 96"));
}

#[test]
fn ablation_writes_one_csv_per_axis() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().display().to_string();
    let cfg = toy("toy_cls.cfg");
    let o = vtp(&[
        "ablate", "--config", &cfg, "--axes", "feature_mode,aggregation", "--seeds", "2", "--epochs", "1",
        "--output-dir", &out,
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let fm = fs::read_to_string(tmp.path().join("ablation_feature_mode.csv")).unwrap();
    assert_eq!(fm.lines().next().unwrap(), "variant,seed,OA,mean,std");
    assert_eq!(fm.lines().count(), 1 + 5 * 2);
    let agg = fs::read_to_string(tmp.path().join("ablation_aggregation.csv")).unwrap();
    assert_eq!(agg.lines().count(), 1 + 4 * 2);
    assert!(!tmp.path().join("ablation_scale_pairing.csv").exists());
    assert_eq!(code(&vtp(&["ablate", "--config", &cfg, "--axes", "colour"])), 2);
}
