#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub fn pimnb(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pimnb"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .env_remove("PIMNB_DATA_DIR")
        .output()
        .expect("spawn pimnb")
}

/// Runs a command that must succeed and returns its stdout.
pub fn ok(dir: &Path, args: &[&str]) -> String {
    let out = pimnb(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// `--set` pairs for each assignment.
pub fn sets<'a>(assignments: &[&'a str]) -> Vec<&'a str> {
    assignments.iter().flat_map(|a| ["--set", *a]).collect()
}

pub fn without_timestamp(text: &str) -> String {
    text.lines().filter(|l| !l.starts_with("# timestamp:")).map(|l| format!("{l}\n")).collect()
}

/// Data rows (header excluded) split into fields.
pub fn rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

pub fn header(text: &str) -> &str {
    text.lines().find(|l| !l.starts_with('#')).unwrap_or("")
}
