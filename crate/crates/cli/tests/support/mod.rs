#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

/// Runs the `adadepth` binary with `args`.
pub fn adadepth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adadepth"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Asserts a zero exit status and returns stdout.
pub fn ok(out: Output) -> String {
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), stderr(&out));
    String::from_utf8_lossy(&out.stdout).into_owned()
}
