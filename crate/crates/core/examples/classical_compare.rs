//! Allowing the process to stop lowers the value: compare `U` with the
//! fixed-horizon value `H~` computed by the same scheme.
//!
//! ```bash
//! cargo run --release --example classical_compare
//! ```

use std::sync::Arc;

use bernstein::grid::{build_grid, ProblemSpec};
use bernstein::hjb::{classical_value, solve_forward_obstacle, value_from_eta, Orientation, SolverConfig};

fn main() -> bernstein::Result<()> {
    let spec = ProblemSpec::worked_example(1.0, 1.0);
    let grid = Arc::new(build_grid(&spec, 301, 501)?);
    let cfg = SolverConfig::default();
    let stopped = value_from_eta(&solve_forward_obstacle(&spec, &grid, &cfg)?, spec.hbar)?;
    let fixed = classical_value(&spec, &grid, Orientation::Forward, &cfg)?;

    let k = grid.nearest_t(0.0);
    println!("{:>6} {:>10} {:>10} {:>10} {:>10}", "x", "U", "H~", "drift", "drift~");
    for x in [-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0] {
        let i = grid.nearest_x(x);
        println!(
            "{x:>6.2} {:>10.5} {:>10.5} {:>10.4} {:>10.4}",
            stopped.value.get(k, i),
            fixed.value.get(k, i),
            stopped.drift.get(k, i),
            fixed.drift.get(k, i)
        );
    }
    let gap = stopped
        .value
        .values()
        .iter()
        .zip(fixed.value.values())
        .map(|(u, h)| u - h)
        .fold(f64::NEG_INFINITY, f64::max);
    println!("max over the grid of U - H~: {gap:.2e}");
    Ok(())
}
