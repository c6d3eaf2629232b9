use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = "seed = 3
data.kind = synthetic_blobs
data.classes = 4
data.train_size = 64
data.test_size = 32
model.arch = vgg
model.width = 0.5
train.epochs = 1
train.batch_size = 16
sweep.ratios = 0.5, 1.0
";

const PLAN: &str = "# quick
mode = cascaded_greedy
layer.all.keep_ratio = 0.5
projection_steps = 5
relaxation_epochs = 0
";

fn cap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cap"))
        .args(args)
        .arg("--config")
        .arg(dir.join("run.cfg"))
        .arg("--out-dir")
        .arg(dir.join("out"))
        .output()
        .expect("spawn cap")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cap(dir, args);
    assert!(out.status.success(), "cap {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn workspace(config: &str, plan: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), config).unwrap();
    fs::write(dir.path().join("run.plan"), plan).unwrap();
    dir
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join("out").join(name)).unwrap()
}

fn plan_arg(dir: &Path) -> String {
    dir.join("run.plan").display().to_string()
}

#[test]
fn train_compress_eval_write_their_artifacts() {
    let w = workspace(CONFIG, PLAN);
    let d = w.path();
    ok(d, &["train"]);
    let metrics = read(d, "metrics.csv");
    assert_eq!(metrics.lines().next(), Some("epoch,lr,train_loss,train_acc,test_loss,test_acc"));
    assert_eq!(metrics.lines().count(), 2);

    ok(d, &["compress", "--plan", &plan_arg(d)]);
    let report = read(d, "report.json");
    let keys = ["\"flops_pct\"", "\"param_pct\"", "\"peak_mem_pct\"", "\"acc_no_ft\"", "\"acc_ft\"", "\"base_acc\""];
    let at: Vec<usize> = keys.iter().map(|k| report.find(k).unwrap_or_else(|| panic!("{k} missing"))).collect();
    assert!(at.windows(2).all(|p| p[0] < p[1]), "report keys out of order");
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert!(v["flops_pct"].as_f64().unwrap() < 100.0);

    let stdout = ok(d, &["eval", "--checkpoint", &d.join("out/compressed.bin").display().to_string()]);
    assert!(stdout.contains("accuracy"));
    let eval: serde_json::Value = serde_json::from_str(&read(d, "eval.json")).unwrap();
    assert_eq!(eval["samples"], 32);
    assert_eq!(eval["cost"]["flops"], v["flops"]);
}

#[test]
fn identical_runs_write_identical_bytes() {
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let w = workspace(CONFIG, PLAN);
            ok(w.path(), &["train"]);
            ok(w.path(), &["compress", "--plan", &plan_arg(w.path())]);
            let bytes = |n: &str| fs::read(w.path().join("out").join(n)).unwrap();
            (bytes("checkpoint.bin"), bytes("metrics.csv"), bytes("compressed.bin"), bytes("report.json"))
        })
        .collect();
    assert!(runs[0] == runs[1]);

    let w = workspace(CONFIG, PLAN);
    ok(w.path(), &["train", "--seed", "4"]);
    assert_ne!(fs::read(w.path().join("out/checkpoint.bin")).unwrap(), runs[0].0);
}

#[test]
fn identity_plan_keeps_every_cost() {
    let w = workspace(CONFIG, &PLAN.replace("keep_ratio = 0.5", "keep_ratio = 1.0"));
    ok(w.path(), &["train"]);
    ok(w.path(), &["compress", "--plan", &plan_arg(w.path())]);
    let v: serde_json::Value = serde_json::from_str(&read(w.path(), "report.json")).unwrap();
    assert_eq!(v["flops_pct"], 100.0);
    assert_eq!(v["param_pct"], 100.0);
    assert_eq!(v["acc_no_ft"], v["base_acc"]);
}

#[test]
fn config_errors_name_the_line() {
    let w = workspace(&format!("{CONFIG}\n# trailing\nmodel.width 2\n"), PLAN);
    let out = cap(w.path(), &["train"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 13"), "{err}");

    let w = workspace(CONFIG, "mode = cascaded_greedy\nlayer.all.keep_ratio = half\n");
    ok(w.path(), &["train"]);
    let out = cap(w.path(), &["compress", "--plan", &plan_arg(w.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn sweep_rejects_protected_layers() {
    let w = workspace(CONFIG, PLAN);
    ok(w.path(), &["train"]);
    ok(w.path(), &["sweep"]);
    let sweep = read(w.path(), "sweep.csv");
    assert_eq!(sweep.lines().next(), Some("layer,ratio,rank,recon_error,accuracy"));

    fs::write(w.path().join("run.cfg"), format!("{CONFIG}sweep.layers = 0\n")).unwrap();
    let out = cap(w.path(), &["sweep"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("protected"));
}

#[test]
fn gradcheck_exits_zero_when_every_suite_passes() {
    let w = workspace(&format!("{CONFIG}gradcheck.instances = 1\n"), PLAN);
    let out = cap(w.path(), &["gradcheck"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(w.path(), "gradcheck.csv");
    assert_eq!(csv.lines().next(), Some("suite,cases,degenerate_skipped,max_rel_err,passed"));
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")), "{csv}");
}

#[test]
fn compress_without_plan_fails() {
    let w = workspace(CONFIG, PLAN);
    ok(w.path(), &["train"]);
    let out = cap(w.path(), &["compress"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--plan"));
}
