//! Backward (time-reversed) problem with initial cost `S* = ln(1 + |x|)`.
//!
//! ```bash
//! cargo run --release --example example_backward
//! ```

use std::sync::Arc;

use bernstein::analytic::ExampleOracle;
use bernstein::grid::{build_grid, ProblemSpec};
use bernstein::hjb::{solve_backward_obstacle, value_from_eta, SolverConfig};

fn main() -> bernstein::Result<()> {
    let spec = ProblemSpec::worked_example(1.0, 1.0);
    let grid = Arc::new(build_grid(&spec, 301, 501)?);
    let sol = solve_backward_obstacle(&spec, &grid, &SolverConfig::default())?;
    let value = value_from_eta(&sol, spec.hbar)?;
    let oracle = ExampleOracle::new(spec.hbar, spec.horizon());

    let mut worst: f64 = 0.0;
    for (k, &t) in grid.ts().iter().enumerate().step_by(25) {
        for (i, &x) in grid.xs().iter().enumerate().step_by(10) {
            if (0.1..=2.5).contains(&x.abs()) {
                let exact = oracle.value_star(t, x)?;
                worst = worst.max((value.value.get(k, i) - exact).abs() / exact);
            }
        }
    }
    println!("max relative error of U* on a sample of nodes: {worst:.2e}");

    let k = grid.nearest_t(0.5);
    println!("free boundary at t = {:.2}: {:?}", grid.ts()[k], sol.boundary[k]);
    for x in [-2.0, -1.0, 1.0, 2.0] {
        let i = grid.nearest_x(x);
        println!("  B*(1/2, {x:+.1}) = {:+.4}  (exact {:+.4})", value.drift.get(k, i), oracle.drift_star(0.5, x)?);
    }
    Ok(())
}
