use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use atlascrf::vol1::{read_labels, read_scalar};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_atlascrf"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn atlascrf")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run_in(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn error_kind(out: &Output) -> String {
    let line = String::from_utf8_lossy(&out.stderr);
    let v: serde_json::Value = serde_json::from_str(line.trim()).expect("stderr is one JSON line");
    v["error"].as_str().unwrap().to_string()
}

/// Every file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

const TOY: &[&str] = &["--seed", "3", "toygen", "--size", "16", "--jitter", "1", "--n-train", "3", "--n-val", "1", "--n-test", "1"];

fn toy_dataset(dir: &Path) {
    let mut args = TOY.to_vec();
    args.extend(["--out-dir", "ds"]);
    ok(dir, &args);
}

/// Runs the full command chain into `dir`.
fn pipeline(dir: &Path) {
    toy_dataset(dir);
    ok(dir, &["atlas-build", "--scan", "ds/train_000.scan.vol1", "--labels", "ds/train_000.labels.vol1",
        "--scan", "ds/train_001.scan.vol1", "--labels", "ds/train_001.labels.vol1", "--out-dir", "at"]);
    ok(dir, &["train", "--dataset", "ds/dataset.json", "--stage", "unary", "--epochs", "2", "--out-dir", "s1"]);
    ok(dir, &["train", "--dataset", "ds/dataset.json", "--stage", "joint", "--init", "s1/checkpoint",
        "--epochs", "2", "--out-dir", "s2"]);
    ok(dir, &["infer", "--target", "ds/test_000.scan.vol1", "--checkpoint", "s2/checkpoint", "--atlas", "at/atlas.json",
        "--gt", "ds/test_000.labels.vol1", "--align-translation", "1", "--out-dir", "inf"]);
    ok(dir, &["eval", "--pred", "inf/labels.vol1", "--gt", "ds/test_000.labels.vol1", "--out", "eval.json"]);
    ok(dir, &["--seed", "5", "perturb", "--target", "ds/test_000.scan.vol1", "--cases", "2", "--out-dir", "pt"]);
    ok(dir, &["gradcheck", "--checkpoint", "s2/checkpoint", "--step", "1e-4", "--out", "gc.json"]);
}

#[test]
fn every_command_is_byte_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (k, v) in &sa {
        assert!(v == &sb[k], "{} differs between runs", k.display());
    }
    for f in ["s2/checkpoint/manifest.json", "s2/history.csv", "inf/report.json", "pt/perturb.json", "gc.json"] {
        assert!(sa.contains_key(Path::new(f)), "missing {f}");
    }
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    toy_dataset(dir.path());
    let train = |threads: &str, out: &str| {
        ok(dir.path(), &["--threads", threads, "train", "--dataset", "ds/dataset.json", "--stage", "joint",
            "--from-scratch", "--epochs", "1", "--out-dir", out]);
        snapshot(&dir.path().join(out))
    };
    assert_eq!(train("1", "t1"), train("3", "t3"));
}

#[test]
fn crf_stages_require_a_first_stage_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    toy_dataset(dir.path());
    for stage in ["joint", "separate"] {
        let out = run_in(dir.path(), &["train", "--dataset", "ds/dataset.json", "--stage", stage, "--out-dir", "x"]);
        assert_eq!(out.status.code(), Some(2));
        assert_eq!(error_kind(&out), "config");
    }
    assert!(!dir.path().join("x").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let out = run_in(p, &["infer", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_kind(&out), "config");

    fs::write(p.join("bad.json"), r#"{"unknown_key": 1}"#).unwrap();
    let out = run_in(p, &["--config", "bad.json", "gradcheck"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run_in(p, &["eval", "--pred", "missing.vol1", "--gt", "missing.vol1"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_kind(&out), "io");

    fs::write(p.join("trunc.vol1"), b"VOL1\x01").unwrap();
    let out = run_in(p, &["eval", "--pred", "trunc.vol1", "--gt", "trunc.vol1"]);
    assert_eq!(out.status.code(), Some(3));

    // A zero tolerance cannot be met.
    let out = run_in(p, &["gradcheck", "--param", "mu", "--tolerance", "0"]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_kind(&out), "gradcheck_failed");
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    toy_dataset(p);
    ok(p, &["train", "--dataset", "ds/dataset.json", "--stage", "unary", "--epochs", "1", "--out-dir", "s1"]);
    let manifest = p.join("s1/checkpoint/manifest.json");
    let text = fs::read_to_string(&manifest).unwrap();
    // Flip one digit inside the body; the stored digest no longer matches.
    let pos = text.find("\"epoch\"").unwrap();
    let mut bytes = text.into_bytes();
    let digit = bytes[pos..].iter().position(u8::is_ascii_digit).unwrap() + pos;
    bytes[digit] = if bytes[digit] == b'9' { b'8' } else { bytes[digit] + 1 };
    fs::write(&manifest, bytes).unwrap();
    for args in [
        &["gradcheck", "--checkpoint", "s1/checkpoint"][..],
        &["infer", "--target", "ds/test_000.scan.vol1", "--checkpoint", "s1/checkpoint", "--disable-prior", "--out-dir", "o"][..],
    ] {
        let out = run_in(p, args);
        assert_eq!(out.status.code(), Some(3), "{args:?}");
        assert_eq!(error_kind(&out), "checkpoint_integrity");
    }
}

#[test]
fn perturb_with_zero_cases_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    toy_dataset(dir.path());
    ok(dir.path(), &["perturb", "--target", "ds/test_000.scan.vol1", "--cases", "0", "--out-dir", "pt"]);
    assert!(!dir.path().join("pt").exists());
}

#[test]
fn perturbed_scans_differ_only_inside_the_mask() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    toy_dataset(p);
    ok(p, &["--seed", "11", "perturb", "--target", "ds/test_000.scan.vol1", "--cases", "3", "--count", "2", "--out-dir", "pt"]);
    let clean = read_scalar(p.join("ds/test_000.scan.vol1")).unwrap();
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(p.join("pt/perturb.json")).unwrap()).unwrap();
    let cases = manifest["cases"].as_array().unwrap();
    assert_eq!(cases.len(), 3);
    let mut masks = Vec::new();
    for (i, c) in cases.iter().enumerate() {
        assert_eq!(c["seed"].as_u64(), Some(11 + i as u64));
        let scan = read_scalar(p.join("pt").join(c["scan"].as_str().unwrap())).unwrap();
        let mask = read_labels(p.join("pt").join(c["mask"].as_str().unwrap())).unwrap();
        assert!(mask.count(1) > 0);
        for ((&m, &a), &b) in mask.data().iter().zip(scan.data()).zip(clean.data()) {
            if m == 0 {
                assert_eq!(a, b);
            }
        }
        masks.push(mask);
    }
    assert_ne!(masks[0], masks[1]);
}

#[test]
fn eval_delta_against_itself_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    toy_dataset(p);
    let args = ["eval", "--pred", "ds/test_000.labels.vol1", "--gt", "ds/test_000.labels.vol1"];
    let mut first = args.to_vec();
    first.extend(["--out", "base.json"]);
    ok(p, &first);
    let mut second = args.to_vec();
    second.extend(["--delta", "base.json", "--format", "json"]);
    let out = ok(p, &second);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["mean_delta_dsc"].as_f64(), Some(0.0));
    assert!(v["delta_dsc"].as_array().unwrap().iter().all(|d| d.as_f64() == Some(0.0)));
    // Identical maps score a perfect Dice on each foreground class.
    for c in v["per_class"].as_array().unwrap() {
        assert_eq!(c["dsc"].as_f64(), Some(1.0));
    }
}

#[test]
fn gradcheck_param_filter() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["gradcheck", "--param", "theta_s", "--param", "mu"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(rows, ["mu", "theta_s"]);
    let out = run_in(dir.path(), &["gradcheck", "--param", "no_such_group"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("c.json"), r#"{"toy": {"size": 12, "n_train": 1, "n_val": 0, "n_test": 0, "jitter": 0}, "paths": {"out_dir": "from_cfg"}}"#)
        .unwrap();
    ok(p, &["--config", "c.json", "toygen"]);
    assert_eq!(read_scalar(p.join("from_cfg/train_000.scan.vol1")).unwrap().dims().len(), 12 * 12 * 12);
    ok(p, &["--config", "c.json", "toygen", "--size", "10", "--out-dir", "from_flag"]);
    assert_eq!(read_scalar(p.join("from_flag/train_000.scan.vol1")).unwrap().dims().len(), 1000);
}
