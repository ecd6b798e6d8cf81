//! The `ptta` binary: subcommands, report files and exit codes.

use std::path::Path;
use std::process::Command;

const TINY: &[&str] = &[
    "--set",
    "data.train_profile.point_count=120",
    "--set",
    "data.train_pairs=4",
    "--set",
    "data.val_pairs=2",
    "--set",
    "data.test_pairs=3",
    "--set",
    "encoder={feature_dim=8, hidden=8, agg_hidden=8, k=6, decoder_hidden=8, proj_hidden=8, proj_dim=8, head_hidden=8}",
    "--set",
    "train.batch_size=2",
    "--set",
    "train.joint_epochs=1",
    "--set",
    "train.meta_epochs=1",
    "--set",
    "train.inner_steps=1",
];

fn ptta(cmd: &str, out: &Path, extra: &[&str]) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_ptta"))
        .arg(cmd)
        .args(TINY)
        .arg("--out-dir")
        .arg(out)
        .args(extra)
        .env("PTTA_THREADS", "1")
        .output()
        .unwrap();
    (o.status.code().unwrap(), String::from_utf8_lossy(&o.stdout).into_owned())
}

#[test]
fn pipeline_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(ptta("generate", out, &["--seed", "3"]).0, 0);
    assert_eq!(ptta("train-joint", out, &["--seed", "3"]).0, 0);
    assert_eq!(ptta("train-meta", out, &["--seed", "3", "--use-meta", "true"]).0, 0);
    let (code, stdout) = ptta("eval", out, &["--seed", "3", "--mode", "tta", "--tta-steps", "2", "--alpha", "1e-4"]);
    assert_eq!(code, 0, "{stdout}");
    assert!(stdout.contains("mode tta"));
    for f in ["report.csv", "report.txt", "curves.csv", "joint.ckpt", "meta.ckpt", "losses.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(ptta("eval", out, &["--set", "train.bogus=1"]).0, 2);
    assert_eq!(ptta("eval", out, &["--mode", "sideways"]).0, 2);
    assert_eq!(ptta("train-joint", out, &[]).0, 3);
    let o = Command::new(env!("CARGO_BIN_EXE_ptta"))
        .args(["generate", "--out-dir"])
        .arg(out)
        .env("PTTA_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));

    let bad = out.join("bad.xyz");
    std::fs::write(&bad, "0 0 nan?\n").unwrap();
    let bad = bad.to_str().unwrap();
    assert_eq!(ptta("register", out, &[bad, bad]).0, 3);
}
