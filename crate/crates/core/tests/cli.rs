//! The `bernstein` binary: run, check, output-directory precedence and exit
//! codes.

use std::path::Path;
use std::process::Command;

use bernstein::experiment::{ExperimentConfig, ExperimentKind, GridSize, Manifest, OUT_DIR_ENV};
use bernstein::simulate::BridgeTestConfig;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bernstein"));
    c.env_remove(OUT_DIR_ENV);
    c
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> std::path::PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn small_bridge() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::template(ExperimentKind::BridgeTest);
    cfg.bridge = Some(BridgeTestConfig {
        n_paths: 20_000,
        ..BridgeTestConfig::default()
    });
    cfg
}

fn manifest(dir: &Path) -> Manifest {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn reruns_reproduce_every_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::template(ExperimentKind::ClassicalCompare);
    cfg.grid = GridSize { nx: 61, nt: 41 };
    let config = write_config(tmp.path(), &cfg);
    for name in ["a", "b"] {
        let st = bin()
            .args(["run", config.to_str().unwrap(), "--out"])
            .arg(tmp.path().join(name))
            .status()
            .unwrap();
        assert!(st.success());
    }
    let (a, b) = (manifest(&tmp.path().join("a")), manifest(&tmp.path().join("b")));
    assert_eq!(a.files, b.files);
    assert_eq!(a.config_sha256, b.config_sha256);
    assert!(a.all_passed);
    let listed: Vec<_> = a.files.iter().map(|f| f.path.as_str()).collect();
    assert_eq!(listed, ["config.json", "classical.csv", "classical_report.json"]);
    for f in &a.files {
        let bytes = std::fs::read(tmp.path().join("a").join(&f.path)).unwrap();
        assert_eq!(bernstein::io::sha256_bytes(&bytes), f.sha256);
    }
}

#[test]
fn seed_flag_changes_monte_carlo_output() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &small_bridge());
    let run = |name: &str, seed: &str| {
        let st = bin()
            .args(["run", config.to_str().unwrap(), "--seed", seed, "--out"])
            .arg(tmp.path().join(name))
            .status()
            .unwrap();
        assert!(st.success());
        manifest(&tmp.path().join(name))
    };
    let (a, b, c) = (run("a", "1"), run("b", "1"), run("c", "2"));
    assert_eq!(a.files, b.files);
    assert_eq!(a.seed, 1);
    assert_ne!(a.files, c.files);
    assert_ne!(a.config_sha256, c.config_sha256);
}

#[test]
fn output_directory_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_bridge();
    cfg.output_dir = Some(tmp.path().join("from-config"));
    let config = write_config(tmp.path(), &cfg);
    let c = config.to_str().unwrap();

    assert!(bin().args(["run", c]).status().unwrap().success());
    assert!(tmp.path().join("from-config/manifest.json").exists());

    let env_dir = tmp.path().join("from-env");
    assert!(bin().args(["run", c]).env(OUT_DIR_ENV, &env_dir).status().unwrap().success());
    assert!(env_dir.join("manifest.json").exists());

    let flag_dir = tmp.path().join("from-flag");
    let st = bin()
        .args(["run", c, "--out"])
        .arg(&flag_dir)
        .env(OUT_DIR_ENV, &env_dir)
        .status()
        .unwrap();
    assert!(st.success());
    assert!(flag_dir.join("manifest.json").exists());
}

#[test]
fn failed_check_gives_nonzero_exit() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_bridge();
    // no honest p-value clears this
    cfg.bridge.as_mut().unwrap().significance = 0.999_999;
    let config = write_config(tmp.path(), &cfg);
    let out = bin()
        .args(["run", config.to_str().unwrap(), "--out"])
        .arg(tmp.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("[FAIL] bridge_p_value"));
    let m = manifest(&tmp.path().join("o"));
    assert!(!m.all_passed);
}

#[test]
fn bad_configs_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.json");
    std::fs::write(&p, "{\"experiment\": \"sec9\"}").unwrap();
    let out = bin().args(["run", p.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("sec9") && err.contains("stopping-dist"), "{err}");

    std::fs::write(&p, "{\n  \"experiment\": \"schrodinger\",\n  \"schrodinger\": {\"tol\": 1}\n}").unwrap();
    let out = bin().args(["run", p.to_str().unwrap()]).output().unwrap();
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("tol") && err.contains("line 3"), "{err}");
}

#[test]
fn print_config_round_trips() {
    for kind in ExperimentKind::ALL {
        let out = bin().args(["print-config", kind.name()]).output().unwrap();
        assert!(out.status.success());
        let cfg = ExperimentConfig::from_json(&String::from_utf8(out.stdout).unwrap()).unwrap();
        assert_eq!(cfg, ExperimentConfig::template(kind));
    }
}

#[test]
fn check_subcommand_reports_one_line_per_criterion() {
    let out = bin().args(["check", "--criterion", "6", "--criterion", "7"]).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("criterion")).count(), 2, "{text}");
    assert!(out.status.success(), "{text}");
}
