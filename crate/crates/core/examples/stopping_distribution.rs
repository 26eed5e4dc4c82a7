//! Distribution of the optimal stopping time: the survival function
//! `q(t, x) = P(tau > T~)` from its PDE against Monte Carlo under the
//! optimal policy.
//!
//! ```bash
//! cargo run --release --example stopping_distribution
//! ```

use std::sync::Arc;

use bernstein::grid::{build_grid, ProblemSpec};
use bernstein::hjb::{solve_forward_obstacle, value_from_eta, Orientation, SolverConfig};
use bernstein::simulate::{simulate_forward, SimConfig};
use bernstein::stopping::{empirical_survival, martingale_check, threshold_sweep};

fn main() -> bernstein::Result<()> {
    let spec = ProblemSpec::worked_example(1.0, 1.0);
    // dt = 1e-3 so that the Monte Carlo steps land on grid slices
    let grid = Arc::new(build_grid(&spec, 601, 1001)?);
    let value = value_from_eta(&solve_forward_obstacle(&spec, &grid, &SolverConfig::default())?, spec.hbar)?;
    let thresholds = [-0.25, 0.0, 0.25];
    let sols = threshold_sweep(&value.drift, &value.mask, spec.hbar, Orientation::Forward, &thresholds)?;

    let x0 = 1.0;
    let mut cfg = SimConfig::new(1e-3, 20_000, 1, (-0.5, x0), Orientation::Forward);
    cfg.checkpoints = vec![-0.4, -0.3];
    let ens = simulate_forward(&spec, &value.drift, &value.mask, &cfg)?;
    let summary = ens.summary();
    println!(
        "from (-1/2, {x0}): mean stopping time {:.4} ± {:.4}, stopped before T/2: {:.3}",
        summary.stop_time.mean, summary.stop_time.stderr, summary.boundary_fraction.mean
    );

    println!("{:>8} {:>9} {:>9} {:>8}", "T~", "q (PDE)", "MC", "stderr");
    for sol in &sols {
        let e = empirical_survival(&ens, sol.threshold);
        println!(
            "{:>8.2} {:>9.4} {:>9.4} {:>8.4}",
            sol.threshold,
            sol.value(-0.5, x0)?,
            e.mean,
            e.stderr
        );
    }

    // q(t, Z_t) is a martingale up to the stopping time.
    let report = martingale_check(&sols[1], &ens, &cfg.checkpoints)?;
    for r in &report.rows {
        println!("E q(t, Z_t) at t = {:.2}: {:.4} ± {:.4} (q0 = {:.4})", r.t, r.mean, r.stderr, report.q0);
    }
    Ok(())
}
