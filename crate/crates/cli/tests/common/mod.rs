#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcrmta"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("spawn dcrmta")
}

/// Runs and panics with stderr on a non-zero exit.
pub fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "dcrmta {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Writes `config.json` into `dir`, with output going to `dir/out`.
pub fn config(dir: &Path, json: serde_json::Value) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&json).unwrap()).unwrap();
    path
}

/// A small synthetic run: `n` journeys, tiny model, few epochs.
pub fn small(n: usize, epochs: usize) -> serde_json::Value {
    serde_json::json!({
        "generator": {"n_journeys": n},
        "model": {"max_epochs": epochs, "batch_size": 64, "encoder": {"hidden": 16}, "cam": {"d_p": 8, "user_dim": 8}},
        "out_dir": "out"
    })
}

pub fn read_tsv(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect()
}
