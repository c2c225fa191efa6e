//! Black-box tests of the `msgn` binary: exit codes, conversion, and the
//! config override syntax.

use std::path::Path;
use std::process::{Command, Output};

fn msgn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msgn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth_file(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("synth.msgn");
    let o = msgn(&[
        "synth",
        "--out",
        path.to_str().unwrap(),
        "--per-class",
        "3",
        "--frames",
        "8",
        "--seed",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    path
}

#[test]
fn verify_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_file(dir.path());
    let o = msgn(&["verify", "--data", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("12"), "expected record count in: {out}");
}

#[test]
fn missing_data_file_is_a_generic_error() {
    let o = msgn(&["verify", "--data", "/nonexistent/path.msgn"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn bad_config_override_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_file(dir.path());
    let o = msgn(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out-dir",
        dir.path().join("out").to_str().unwrap(),
        "--set",
        "model.scales.nope=1",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = msgn(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--set",
        "no-equals-sign",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn inspect_params_prints_both_totals() {
    let o = msgn(&["inspect", "params", "--set", "model.scales=[20]"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("729720"), "with-affine total missing: {out}");
    assert!(out.contains("726904"), "without-affine total missing: {out}");
}

#[test]
fn convert_parses_a_raw_capture() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("S001C001P001R001A007.skeleton");
    let mut text = String::from("2\n");
    for _ in 0..2 {
        text.push_str("1\n7 0 0 0 0 0 0 0 0 2\n25\n");
        for j in 0..25 {
            text.push_str(&format!("0.{j} 1.{j} 0.5 0 0 0 0 1 0 0 0 2\n"));
        }
    }
    std::fs::write(&raw, text).unwrap();
    let out = dir.path().join("converted.msgn");
    let o = msgn(&[
        "convert",
        raw.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = msgn(&["verify", "--data", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    // truncated capture -> parse error, exit 3
    std::fs::write(&raw, "2\n1\n7 0 0 0 0 0 0 0 0 2\n25\n0 0 0\n").unwrap();
    let o = msgn(&[
        "convert",
        raw.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn train_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_file(dir.path());
    let out_dir = dir.path().join("run");
    let common = [
        "--set",
        "model.classes=4",
        "--set",
        "model.scales=[4]",
        "--set",
        "model.c1=4",
        "--set",
        "model.c2=4",
        "--set",
        "model.gcn_dims=[6]",
        "--set",
        "model.c4=8",
        "--set",
        "model.fi_hidden=4",
        "--set",
        "train.epochs=1",
        "--set",
        "train.batch_size=4",
        "--set",
        "train.eval_views=1",
        "--set",
        "data.ids=all-train",
        "--set",
        "data.val_fraction=0.25",
    ];
    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ];
    args.extend_from_slice(&common);
    let o = msgn(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out_dir.join("checkpoint.bin").exists());
    assert!(out_dir.join("metrics.csv").exists());
    let out = stdout(&o);
    assert!(out.contains("manifest digest"), "{out}");
    assert!(out.contains("parameters"), "{out}");

    // eval on the val carve-out via the same protocol settings
    let ck = out_dir.join("checkpoint.bin");
    let mut args = vec!["eval", "--checkpoint", ck.to_str().unwrap(), "--data", data.to_str().unwrap()];
    args.extend_from_slice(&common);
    let o = msgn(&args);
    // all-train has an empty test split; the eval must say so, not crash
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    // corrupting the checkpoint must be detected
    let mut bytes = std::fs::read(&ck).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(&ck, &bytes).unwrap();
    let o = msgn(&["eval", "--checkpoint", ck.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}
