//! Forward stopping problem on the worked example (`V = 0`, `S = |x|`):
//! solve for `eta`, recover `U` and the optimal drift, and compare against
//! the closed form.
//!
//! ```bash
//! cargo run --release --example example_forward
//! ```

use std::sync::Arc;

use bernstein::analytic::ExampleOracle;
use bernstein::grid::{build_grid, ProblemSpec, Region};
use bernstein::hjb::{lcp_residual, solve_forward_obstacle, value_from_eta, SolverConfig};

fn main() -> bernstein::Result<()> {
    let spec = ProblemSpec::worked_example(1.0, 1.0);
    let grid = Arc::new(build_grid(&spec, 301, 501)?);
    let sol = solve_forward_obstacle(&spec, &grid, &SolverConfig::default())?;
    let value = value_from_eta(&sol, spec.hbar)?;
    let oracle = ExampleOracle::new(spec.hbar, spec.horizon());

    println!(
        "{} x {} grid, {} PSOR sweeps, scaled LCP residual {:.1e}",
        grid.nx(),
        grid.nt(),
        sol.stats.total_sweeps,
        lcp_residual(&sol, &spec, &grid)?.scaled_inf_norm
    );
    println!("{:>6} {:>6} {:>10} {:>10} {:>9} {:>9}", "t", "x", "U", "exact", "drift", "exact");
    for &(t, x) in &[(-0.5, 1.0), (-0.5, -2.0), (0.0, 0.5), (0.25, 2.0), (0.45, -0.3)] {
        let (k, i) = (grid.nearest_t(t), grid.nearest_x(x));
        println!(
            "{t:>6.2} {x:>6.2} {:>10.6} {:>10.6} {:>9.4} {:>9.4}",
            value.value.get(k, i),
            oracle.value(t, x)?,
            value.drift.get(k, i),
            oracle.drift(t, x)?
        );
    }

    // The stopping set is the column x = 0 plus the final slice.
    let i0 = grid.nearest_x(0.0);
    let column = (0..grid.nt()).all(|k| sol.mask.get(k, i0) == Region::Stopping);
    println!(
        "stopping nodes: {} (x = 0 column stopping at every t: {column})",
        sol.mask.count(Region::Stopping)
    );
    Ok(())
}
