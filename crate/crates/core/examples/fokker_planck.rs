//! Density of the optimally controlled process by the forward Kolmogorov
//! equation, with killing on the stopping set, against a histogram of
//! simulated survivors.
//!
//! ```bash
//! cargo run --release --example fokker_planck
//! ```

use std::sync::Arc;

use bernstein::grid::{build_grid, ProblemSpec};
use bernstein::hjb::{solve_forward_obstacle, value_from_eta, Orientation, SolverConfig};
use bernstein::simulate::{fokker_planck, histogram_on_nodes, simulate_forward, SimConfig};

fn main() -> bernstein::Result<()> {
    let spec = ProblemSpec::worked_example(1.0, 1.0);
    let grid = Arc::new(build_grid(&spec, 301, 1001)?);
    let value = value_from_eta(&solve_forward_obstacle(&spec, &grid, &SolverConfig::default())?, spec.hbar)?;

    // narrow Gaussian around x = 1
    let (x0, s0) = (1.0, 0.05);
    let mut rho0: Vec<f64> = grid.xs().iter().map(|x| (-0.5 * ((x - x0) / s0).powi(2)).exp()).collect();
    let mass = grid.dx() * rho0.iter().sum::<f64>();
    rho0.iter_mut().for_each(|r| *r /= mass);
    let fp = fokker_planck(&value.drift, &rho0, spec.hbar, Some(&value.mask))?;
    println!("max cell Peclet number {:.2}", fp.max_cell_peclet);
    for k in (0..grid.nt()).step_by(200) {
        println!("t = {:+.2}: surviving mass {:.4}", grid.ts()[k], fp.mass[k]);
    }

    // Monte Carlo from x0 (the point mass limit of rho0) for comparison at t = 0.
    let cfg = SimConfig {
        checkpoints: vec![0.0],
        ..SimConfig::new(1e-3, 20_000, 5, (-0.5, x0), Orientation::Forward)
    };
    let ens = simulate_forward(&spec, &value.drift, &value.mask, &cfg)?;
    let alive: Vec<f64> = ens
        .checkpoint_states(0)
        .into_iter()
        .zip(&ens.records)
        .filter(|(_, r)| r.stop_time > 0.0)
        .map(|(x, _)| x)
        .collect();
    let k = grid.nearest_t(0.0);
    println!(
        "t = 0: surviving fraction MC {:.4}, Fokker-Planck {:.4}",
        alive.len() as f64 / cfg.n_paths as f64,
        fp.mass[k]
    );
    let hist = histogram_on_nodes(&alive, &grid, cfg.n_paths);
    let tv: f64 = 0.5 * grid.dx() * hist.iter().zip(fp.rho.row(k)).map(|(h, r)| (h - r).abs()).sum::<f64>();
    println!("total variation between histogram and density: {tv:.3}");
    Ok(())
}
