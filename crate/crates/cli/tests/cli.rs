use std::path::Path;
use std::process::{Command, Output};

use hybridwarp::io::{read_hvol, read_json, write_field, write_mask, HvolData};
use hybridwarp::metrics::{BinaryMask, EvalReport};
use hybridwarp::DisplacementField;
use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hybridwarp"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dataset(dir: &Path) -> String {
    ok(&[
        "generate",
        "--out",
        s(dir),
        "--pairs",
        "2",
        "--test-pairs",
        "1",
        "--size",
        "16",
        "--seed",
        "5",
    ]);
    s(&dir.join("manifest.json")).to_string()
}

#[test]
fn help_lists_defaults() {
    let out = run(&["train", "--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for needle in [
        "[default: 10]",
        "[default: 0.1]",
        "[default: 1]",
        "[default: 0.0001]",
        "[default: 1000]",
        "4,8,16,32,64,32,16,8,4",
    ] {
        assert!(text.contains(needle), "missing {needle} in\n{text}");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["train"]).status.code(), Some(2));
    assert_eq!(
        run(&["metrics", "dice", "/nonexistent/a.hvol", "/nonexistent/b.hvol"])
            .status
            .code(),
        Some(5)
    );
    let junk = dir.path().join("junk.hvol");
    std::fs::write(&junk, b"not a volume at all, definitely").unwrap();
    let out = run(&["metrics", "dice", s(&junk), s(&junk)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("offset 0"));
    assert_eq!(
        run(&["--threads", "0", "metrics", "epsilon", "0.5", "0.4"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn metrics_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let m = BinaryMask::from_fn([4, 4, 4], |z, y, _| z == y).unwrap();
    let n = BinaryMask::from_fn([4, 4, 4], |z, _, _| z == 0).unwrap();
    let (pm, pn) = (dir.path().join("m.hvol"), dir.path().join("n.hvol"));
    write_mask(&pm, &m).unwrap();
    write_mask(&pn, &n).unwrap();
    assert_eq!(ok(&["metrics", "dice", s(&pm), s(&pm)])["dice"], 1.0);
    let d = ok(&["metrics", "dice", s(&pm), s(&pn)])["dice"].as_f64().unwrap();
    assert!((d - 2.0 * 4.0 / 32.0).abs() < 1e-12);
    assert_eq!(ok(&["metrics", "kappa", s(&pm), s(&pm)])["kappa"], 1.0);
    let e = ok(&["metrics", "epsilon", "0.5", "0.4"])["epsilon_percent"]
        .as_f64()
        .unwrap();
    assert!((e - 22.2222).abs() < 1e-4);

    let (pu, pv) = (dir.path().join("u.hvol"), dir.path().join("v.hvol"));
    write_field(&pu, &DisplacementField::uniform([4, 4, 4], [3.0, 0.0, 4.0]).unwrap()).unwrap();
    write_field(&pv, &DisplacementField::zeros([4, 4, 4]).unwrap()).unwrap();
    assert_eq!(ok(&["metrics", "epe", s(&pu), s(&pv)])["endpoint_error"], 5.0);
    assert_eq!(
        ok(&["metrics", "epe", s(&pu), s(&pv), "--roi", s(&pm)])["endpoint_error"],
        5.0
    );
}

#[test]
fn warp_preserves_dtype() {
    let dir = tempfile::tempdir().unwrap();
    let m = BinaryMask::from_fn([4, 4, 4], |_, _, x| x < 2).unwrap();
    let (pm, pu) = (dir.path().join("m.hvol"), dir.path().join("u.hvol"));
    write_mask(&pm, &m).unwrap();
    write_field(&pu, &DisplacementField::uniform([4, 4, 4], [1.0, 0.0, 0.0]).unwrap()).unwrap();
    let near = dir.path().join("near.hvol");
    ok(&[
        "warp",
        "--image",
        s(&pm),
        "--disp",
        s(&pu),
        "--interp",
        "nearest",
        "--out",
        s(&near),
    ]);
    match read_hvol(&near).unwrap().data {
        HvolData::U8(v) => assert_eq!(v.iter().filter(|&&b| b == 1).count(), 16),
        other => panic!("nearest mask warp gave {other:?}"),
    }
    let tri = dir.path().join("tri.hvol");
    ok(&["warp", "--image", s(&pm), "--disp", s(&pu), "--out", s(&tri)]);
    assert!(matches!(read_hvol(&tri).unwrap().data, HvolData::F64(_)));
}

#[test]
fn external_ground_truth_fields_give_perfect_consistency() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path());
    let ck = dir.path().join("reg.ck");
    let quiet = dir.path().join("reg.log");
    ok_train(&[
        "--data",
        &manifest,
        "--mode",
        "regnet",
        "--iters",
        "1",
        "--out",
        s(&ck),
        "--reg-widths",
        "2,4,2",
        "--log",
        s(&quiet),
    ]);
    let report = dir.path().join("ext.json");
    let gt = dir.path().join("gt");
    ok(&[
        "eval",
        "--ckpt",
        s(&ck),
        "--data",
        &manifest,
        "--external-disp",
        s(&gt),
        "--direction",
        "forward",
        "--report",
        s(&report),
    ]);
    let r: EvalReport = read_json(&report).unwrap();
    assert_eq!(r.method, "regnet+external");
    assert_eq!(r.records.len(), 3);
    for rec in &r.records {
        assert_eq!(rec.consistency_fwd, Some(1.0), "{}", rec.sample_id);
        assert_eq!(rec.endpoint_error, Some(0.0));
    }
    // Both orderings need a field of their own.
    let out = run(&[
        "eval",
        "--ckpt",
        s(&ck),
        "--data",
        &manifest,
        "--external-disp",
        s(&gt),
        "--report",
        s(&report),
    ]);
    assert_eq!(out.status.code(), Some(5));
}

fn ok_train(args: &[&str]) {
    let mut full = vec!["train"];
    full.extend_from_slice(args);
    let out = run(&full);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for line in String::from_utf8(out.stdout).unwrap().lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        for k in ["iter", "seg", "reg", "def", "cons", "total"] {
            assert!(v.get(k).is_some(), "log line lacks {k}: {line}");
        }
    }
}

#[test]
fn untrained_registration_matches_unregistered_overlap() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path());
    let ck = dir.path().join("reg.ck");
    // One step at a negligible rate leaves the near-identity initialization.
    ok_train(&[
        "--data",
        &manifest,
        "--mode",
        "regnet",
        "--iters",
        "1",
        "--lr",
        "1e-12",
        "--out",
        s(&ck),
        "--log",
        s(&dir.path().join("l")),
    ]);
    let report = dir.path().join("r.json");
    ok(&[
        "eval",
        "--ckpt",
        s(&ck),
        "--data",
        &manifest,
        "--split",
        "test",
        "--report",
        s(&report),
    ]);
    let r: EvalReport = read_json(&report).unwrap();
    for rec in &r.records {
        let (c, u) = (rec.consistency_fwd.unwrap(), rec.unregistered_dice.unwrap());
        assert!((c - u).abs() < 1e-9, "{}: {c} vs {u}", rec.sample_id);
    }
}

#[test]
fn segnet_ignores_registration_weights_with_warning() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path());
    let ck = dir.path().join("seg.ck");
    let out = run(&[
        "train",
        "--data",
        &manifest,
        "--mode",
        "segnet",
        "--iters",
        "2",
        "--alpha",
        "3",
        "--out",
        s(&ck),
        "--seg-widths",
        "2,4,2",
    ]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--alpha has no effect"));
    let ck = hybridwarp::io::load_checkpoint(&ck).unwrap();
    assert!(ck.phi.is_none() && ck.adam_phi.is_none());
    assert_eq!(ck.iteration, 2);
}
