//! Config-driven runs as done by the `bernstein run` command: build a
//! config in code, run it into a directory and read back the manifest.
//!
//! ```bash
//! cargo run --release --example experiment_runner -- /tmp/bernstein-out
//! ```

use std::path::PathBuf;

use bernstein::experiment::{run_experiment, ExperimentConfig, ExperimentKind, GridSize};

fn main() -> bernstein::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("bernstein-example"));
    let mut cfg = ExperimentConfig::template(ExperimentKind::ClassicalCompare);
    cfg.grid = GridSize { nx: 201, nt: 401 };
    let manifest = run_experiment(&cfg, &out)?;
    println!("config hash {}", manifest.config_sha256);
    for f in &manifest.files {
        println!("  {:<24} {} ({} bytes)", f.path, &f.sha256[..16], f.bytes);
    }
    for c in &manifest.checks {
        println!("  check {:<34} {:.3e} pass={}", c.name, c.value, c.pass);
    }
    println!("all passed: {}", manifest.all_passed);
    Ok(())
}
