//! End-to-end checks of the binary: argument handling, exit codes, file
//! outputs. Everything runs on deliberately tiny grids.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_openbose"))
}

fn tempdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("obcli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn tiny(out_dir: &Path) -> String {
    format!(
        r#"
[physical]
meanN0 = 1.2
[grid]
nSites = 6
[profile]
kind = "flatTop"
width = 1.0
[schedule]
tEnd = 0.1
dt = 0.001
recordEvery = 0.05
chiMax = 12
[interaction]
mode = "pureDissipative"
gAbs = 10.0
[outputs]
outDir = "{}"
"#,
        out_dir.display().to_string().replace('\\', "/")
    )
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("process exited")
}

#[test]
fn presets_are_listed() {
    let out = bin().arg("presets").output().unwrap();
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for name in ["fig3-desk", "fig4-desk", "fig5-desk", "fig6-desk"] {
        assert!(text.contains(name), "missing {name} in:\n{text}");
    }
}

#[test]
fn check_prints_resolved_plan() {
    let dir = tempdir("check");
    let cfg = write_config(&dir, "exp.toml", &tiny(&dir.join("out")));
    let out = bin().arg("check").arg(&cfg).output().unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("config hash:"));
    assert!(text.contains("tau_c ="));
    assert!(text.contains("|G| = 10"));
    assert!(text.contains("[interaction]"));
    // Validation only: no outputs are produced.
    assert!(!dir.join("out").exists());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn unknown_key_exits_two() {
    let dir = tempdir("badkey");
    let cfg = write_config(
        &dir,
        "exp.toml",
        "mystery = 1\n[interaction]\nmode = \"pureDissipative\"\ngAbs = 1.0\n",
    );
    let out = bin().arg("check").arg(&cfg).output().unwrap();
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("mystery"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn positive_imaginary_coupling_exits_two() {
    let dir = tempdir("gain");
    let cfg = write_config(
        &dir,
        "exp.toml",
        "[interaction]\nmode = \"custom\"\ngReal = 1.0\ngImag = 0.25\n",
    );
    let out = bin().arg("check").arg(&cfg).output().unwrap();
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("gImag"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn nonexistent_target_exits_two() {
    let out = bin()
        .arg("run")
        .arg("/definitely/not/a/config.toml")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("preset"), "{err}");
}

#[test]
fn run_produces_outputs_and_honors_overrides() {
    let dir = tempdir("run");
    let out_a = dir.join("out-a");
    let cfg = write_config(&dir, "exp.toml", &tiny(&out_a));
    let out = bin().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_a.join("G10.series.tsv").is_file());
    assert!(out_a.join("G10.summary.toml").is_file());

    // --out-dir and --t-end redirect and shorten the run.
    let out_b = dir.join("out-b");
    let out = bin()
        .arg("run")
        .arg(&cfg)
        .arg("--t-end")
        .arg("0.05")
        .arg("--out-dir")
        .arg(out_b.to_str().unwrap())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let series = std::fs::read_to_string(out_b.join("G10.series.tsv")).unwrap();
    let rows = series.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(rows, 2, "records at 0 and 0.05 only");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn resume_of_missing_file_fails_cleanly() {
    let out = bin()
        .arg("resume")
        .arg("/definitely/not/a/file.ckpt")
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}
