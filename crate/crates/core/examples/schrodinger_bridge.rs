//! Schrodinger system between two Gaussians: Sinkhorn for the boundary
//! factors, kernel propagation for `eta`, `eta*`, and the density and drifts
//! of the resulting Bernstein process.
//!
//! ```bash
//! cargo run --release --example schrodinger_bridge
//! ```

use std::sync::Arc;

use bernstein::grid::SpaceTimeGrid;
use bernstein::schrodinger::{
    bernstein_density, kernel_matrix_for_grid, propagate_eta_star_with_gradient, propagate_eta_with_gradient,
    sinkhorn_solve, slice_masses, trapezoid, MarginalPair, SinkhornConfig,
};
use bernstein::simulate::reversed_drift;

fn main() -> bernstein::Result<()> {
    let hbar = 1.0;
    let grid = Arc::new(SpaceTimeGrid::new(-6.0, 6.0, -0.5, 0.5, 201, 101)?);
    let marginals = MarginalPair::gaussian(grid.xs(), (-1.0, 0.6), (1.0, 0.8))?;
    let kernel = kernel_matrix_for_grid(&grid, hbar)?;
    let factors = sinkhorn_solve(&marginals, &kernel, &SinkhornConfig::default())?;
    println!(
        "Sinkhorn: {} iterations, marginal residual {:.1e}",
        factors.iterations, factors.final_marginal_error
    );

    let eta = propagate_eta_with_gradient(&factors, &grid, hbar)?;
    let eta_star = propagate_eta_star_with_gradient(&factors, &grid, hbar)?;
    let rho = bernstein_density(&eta.value, &eta_star.value)?;
    let masses = slice_masses(&rho);
    let mass_err = masses.iter().map(|m| (m - 1.0).abs()).fold(0.0, f64::max);
    println!("max |mass - 1| over {} slices: {mass_err:.1e}", masses.len());

    println!("{:>6} {:>9} {:>9}", "t", "mean", "std");
    for k in (0..grid.nt()).step_by(20) {
        let row = rho.row(k);
        let m1: Vec<f64> = row.iter().zip(grid.xs()).map(|(r, x)| r * x).collect();
        let m2: Vec<f64> = row.iter().zip(grid.xs()).map(|(r, x)| r * x * x).collect();
        let mean = trapezoid(grid.xs(), &m1);
        let var = trapezoid(grid.xs(), &m2) - mean * mean;
        println!("{:>6.2} {mean:>9.4} {:>9.4}", grid.ts()[k], var.sqrt());
    }

    // B - hbar d/dx ln rho against B* = -hbar d/dx ln eta* at mid-time.
    let drift = eta.log_gradient.map(|v| hbar * v)?;
    let reversed = reversed_drift(&drift, &rho, hbar)?;
    let k = grid.nearest_t(0.0);
    for x in [-2.0, 0.0, 2.0] {
        let i = grid.nearest_x(x);
        println!(
            "x = {x:+.1}: B = {:+.5}, reversed {:+.5}, -hbar d ln eta* = {:+.5}",
            drift.get(k, i),
            reversed.drift.get(k, i),
            -hbar * eta_star.log_gradient.get(k, i)
        );
    }
    Ok(())
}
