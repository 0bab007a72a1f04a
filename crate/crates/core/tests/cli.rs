//! End-to-end runs of the `relalign` binary on a tiny corpus.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_relalign");

fn relalign(data: &Path, args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RELALIGN_DATA", data).output().expect("spawn relalign")
}

fn ok(data: &Path, args: &[&str]) -> Output {
    let out = relalign(data, args);
    assert!(out.status.success(), "relalign {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).expect("json")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
}

fn workspace() -> Workspace {
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path().to_path_buf();
    let data = root.join("data");
    ok(&data, &["gen", "--n-train", "10", "--n-val", "4", "--n-test", "4", "--seed", "5"]);
    Workspace { _dir: dir, root, data }
}

const TINY: [&str; 8] = ["--iterations", "2", "--eval-every", "1", "--batch-size", "2", "--size", "micro"];

#[test]
fn gen_writes_corpus_and_manifest() {
    let w = workspace();
    let m = json(&w.data.join("manifest.json"));
    assert_eq!(m["command"], "gen");
    let files: Vec<&str> = m["files"].as_array().expect("files").iter().map(|f| f["path"].as_str().expect("path")).collect();
    assert!(!files.is_empty());
    assert!(!files.contains(&"manifest.json"));
    for f in m["files"].as_array().expect("files") {
        let p = w.data.join(f["path"].as_str().expect("path"));
        assert_eq!(std::fs::metadata(&p).expect("listed file exists").len(), f["bytes"].as_u64().expect("bytes"));
        assert_eq!(f["sha256"].as_str().expect("sha").len(), 64);
    }
    assert_eq!(m["settings"]["spec"]["n_train"], 10);
}

#[test]
fn gen_is_deterministic() {
    let w = workspace();
    let again = w.root.join("again");
    ok(&again, &["gen", "--n-train", "10", "--n-val", "4", "--n-test", "4", "--seed", "5"]);
    let files = |d: &Path| json(&d.join("manifest.json"))["files"].clone();
    assert_eq!(files(&w.data), files(&again));
}

#[test]
fn config_file_overrides_flags() {
    let w = workspace();
    let cfg = w.root.join("run.cfg");
    std::fs::write(&cfg, "# overrides\nlambda = 2.5\nhead=tied\n\nseed = 9\n").expect("write config");
    let out = w.root.join("run");
    let mut args = vec!["train", "--out", s(&out), "--model", "mini-motifs", "--lambda", "7", "--seed", "1", "--p", "0.2", "--config", s(&cfg)];
    args.extend(TINY);
    ok(&w.data, &args);
    let rec = json(&out.join("run_record.json"));
    let c = &rec["config"];
    assert_eq!(c["align"]["lambda"], 2.5);
    assert_eq!(c["align"]["head_mode"], "tied");
    assert_eq!(c["seed"], 9);
    assert_eq!(c["align"]["p"], 0.2, "flags not mentioned in the config stay");
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["command"], "train");
    assert_eq!(m["settings"]["config"], *c);
    for name in ["run_record.json", "test_metrics.csv", "val_curve.csv", "checkpoints/selected.json"] {
        assert!(m["files"].as_array().unwrap().iter().any(|f| f["path"] == name), "{name} missing from manifest");
    }
}

#[test]
fn tied_head_from_config_reaches_the_record() {
    let w = workspace();
    let cfg = w.root.join("run.cfg");
    std::fs::write(&cfg, "head = tied\nalign = sa\n").expect("write config");
    let out = w.root.join("run");
    let mut args = vec!["train", "--out", s(&out), "--model", "mini-motifs", "--head", "untied", "--align", "ssa", "--config", s(&cfg)];
    args.extend(TINY);
    ok(&w.data, &args);
    let a = &json(&out.join("run_record.json"))["config"]["align"];
    assert_eq!(a["head_mode"], "tied");
    assert_eq!(a["target_mode"], "supervised");
}

#[test]
fn eval_reproduces_the_test_metrics_of_training() {
    let w = workspace();
    let out = w.root.join("run");
    let mut args = vec!["train", "--out", s(&out), "--model", "mini-sgtr", "--mode", "sgdet", "--seed", "3"];
    args.extend(TINY);
    ok(&w.data, &args);
    let ev = w.root.join("eval");
    ok(&w.data, &["eval", "--checkpoint", s(&out.join("checkpoints/selected.json")), "--split", "test", "--k", "20,50,100", "--out", s(&ev)]);
    let trained = json(&out.join("test_metrics.json"));
    let evaluated = json(&ev.join("eval_test_sgdet.json"));
    assert_eq!(trained, evaluated);
    assert!(ev.join("eval_test_sgdet_per_predicate.csv").is_file());
    assert_eq!(json(&ev.join("manifest.json"))["command"], "eval");
}

#[test]
fn report_summarises_runs() {
    let w = workspace();
    let mut runs = Vec::new();
    for align in ["off", "ssa"] {
        let out = w.root.join(format!("run_{align}"));
        let mut args = vec!["train", "--out", s(&out), "--model", "mini-motifs", "--align", align];
        args.extend(TINY);
        ok(&w.data, &args);
        runs.push(out);
    }
    let rep = w.root.join("report");
    let mut args = vec!["report", "--out", s(&rep), "--runs"];
    args.extend(runs.iter().map(|r| s(r)));
    ok(&w.data, &args);
    let csv = std::fs::read_to_string(rep.join("results.csv")).expect("results.csv");
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("run,model,mode,variant,seed,split,metric,K,value"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    for r in &runs {
        let name = r.file_name().unwrap().to_str().unwrap();
        assert!(rows.iter().any(|row| row[0].ends_with(name) && row[6] == "mR"), "{name} has no mR rows:\n{csv}");
    }
    assert!(rep.join("manifest.json").is_file());
}

#[test]
fn errors_are_reported_not_panicked() {
    let w = workspace();
    let out = w.root.join("bad");
    let cases: Vec<Vec<&str>> = vec![
        vec!["train", "--out", s(&out), "--mode", "predcls"],
        vec!["train", "--out", s(&out), "--model", "mini-vgg"],
        vec!["train", "--out", s(&out), "--model", "mini-motifs", "--p", "1.5"],
        vec!["train", "--out", s(&out), "--model", "mini-motifs", "--align", "maybe"],
        vec!["train", "--out", s(&out), "--model", "mini-motifs", "--set", "no_such_key=1"],
        vec!["eval", "--checkpoint", "/nonexistent/ckpt.json", "--out", s(&out)],
        vec!["ablate", "--grid", "/nonexistent.grid", "--out", s(&out)],
    ];
    for args in cases {
        let o = relalign(&w.data, &args);
        assert!(!o.status.success(), "{args:?} unexpectedly succeeded");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(!err.contains("panicked"), "{args:?} panicked: {err}");
    }
    let o = relalign(&w.root.join("missing"), &["train", "--out", s(&out), "--model", "mini-motifs"]);
    assert!(!o.status.success());
}

#[test]
fn eval_rejects_a_checkpoint_from_another_corpus() {
    let w = workspace();
    let out = w.root.join("run");
    let mut args = vec!["train", "--out", s(&out), "--model", "mini-motifs"];
    args.extend(TINY);
    ok(&w.data, &args);
    let other = w.root.join("other");
    ok(&other, &["gen", "--n-train", "10", "--n-val", "4", "--n-test", "4", "--seed", "6"]);
    let o = relalign(&other, &["eval", "--checkpoint", s(&out.join("checkpoints/selected.json")), "--out", s(&w.root.join("ev"))]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("corpus"));
}
