//! Command-line contract: exit codes, one JSON summary line per command and
//! byte-identical artifacts across repeated runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn config_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/acceptance.toml")
}

fn gsdistill(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsdistill"))
        .arg("-c")
        .arg(config_path())
        .args(args)
        .output()
        .unwrap()
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    out
}

#[test]
fn synth_prints_one_summary_and_is_reproducible() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    for dir in [&a, &b] {
        let out = gsdistill(&["-o", dir.path().to_str().unwrap(), "synth"]);
        assert_eq!(out.status.code(), Some(0));
        let stdout = String::from_utf8(out.stdout).unwrap();
        assert_eq!(stdout.lines().count(), 1);
        let summary: Value = serde_json::from_str(stdout.trim()).unwrap();
        assert_eq!(summary["command"], "synth");
    }
    let (first, second) = (files_under(a.path()), files_under(b.path()));
    assert!(first
        .keys()
        .any(|p| p.extension().is_some_and(|e| e == "ply")));
    assert_eq!(first, second);
}

#[test]
fn failures_map_to_documented_exit_codes() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(gsdistill(&["--bogus"]).status.code(), Some(1));
    assert_eq!(
        gsdistill(&["-o", out, "--threads", "0", "synth"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        gsdistill(&["-o", out, "--set", "nosuch.key=1", "synth"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        gsdistill(&["-o", out, "--set", "uplift.tau_w=oops", "synth"])
            .status
            .code(),
        Some(2)
    );
    let missing = dir.path().join("missing.ply");
    let code = gsdistill(&["-o", out, "render", "--scene", missing.to_str().unwrap()])
        .status
        .code();
    assert_eq!(code, Some(3));
    let garbage = dir.path().join("garbage.ply");
    std::fs::write(&garbage, b"ply\nformat ascii 1.0\nend_header\n").unwrap();
    let code = gsdistill(&["-o", out, "render", "--scene", garbage.to_str().unwrap()])
        .status
        .code();
    assert_eq!(code, Some(3));
}
