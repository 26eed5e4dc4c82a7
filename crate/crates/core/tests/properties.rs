//! Invariants over randomised inputs.

use std::sync::Arc;

use bernstein::experiment::compare_report;
use bernstein::grid::{build_grid, ProblemSpec, ScalarField, ScalarFn, SpaceTimeGrid};
use bernstein::hjb::{classical_value, solve_forward_obstacle, value_from_eta, Orientation, SolverConfig};
use bernstein::schrodinger::{
    bernstein_density, kernel_matrix_for_grid, propagate_eta, propagate_eta_star, sinkhorn_solve, slice_masses,
    MarginalPair, SinkhornConfig,
};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn stopping_never_raises_the_value(scale in 0.2f64..3.0, hbar in 0.5f64..2.0) {
        let spec = ProblemSpec {
            terminal_cost: ScalarFn::Abs { scale },
            ..ProblemSpec::worked_example(hbar, 1.0)
        };
        let grid = Arc::new(build_grid(&spec, 61, 41).unwrap());
        let cfg = SolverConfig::default();
        let sol = solve_forward_obstacle(&spec, &grid, &cfg).unwrap();
        for (e, o) in sol.eta.values().iter().zip(sol.obstacle.values()) {
            prop_assert!(*e >= o * (1.0 - 1e-12));
        }
        let u = value_from_eta(&sol, hbar).unwrap();
        let h = classical_value(&spec, &grid, Orientation::Forward, &cfg).unwrap();
        for (a, b) in u.value.values().iter().zip(h.value.values()) {
            prop_assert!(*a <= b + 1e-6);
        }
    }

    // the domain must hold the factors' growth when the final marginal is
    // wider than the propagated initial one
    #[test]
    fn bernstein_density_is_normalised_and_gauge_free(
        m0 in -1.5f64..1.5, s0 in 0.4f64..1.2, m1 in -1.5f64..1.5, s1 in 0.4f64..1.2, c in 0.01f64..100.0,
    ) {
        let grid = Arc::new(SpaceTimeGrid::new(-10.0, 10.0, -0.5, 0.5, 201, 11).unwrap());
        let m = MarginalPair::gaussian(grid.xs(), (m0, s0), (m1, s1)).unwrap();
        let k = kernel_matrix_for_grid(&grid, 1.0).unwrap();
        let f = sinkhorn_solve(&m, &k, &SinkhornConfig::default()).unwrap();
        let rho = bernstein_density(&propagate_eta(&f, &grid, 1.0).unwrap(), &propagate_eta_star(&f, &grid, 1.0).unwrap()).unwrap();
        for mass in slice_masses(&rho) {
            prop_assert!((mass - 1.0).abs() < 1e-6, "mass {}", mass);
        }
        let g = f.rescaled(c);
        let rho_g = bernstein_density(&propagate_eta(&g, &grid, 1.0).unwrap(), &propagate_eta_star(&g, &grid, 1.0).unwrap()).unwrap();
        for (a, b) in rho.values().iter().zip(rho_g.values()) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn shifted_field_has_inf_norm_of_the_shift(shift in -5.0f64..5.0) {
        let grid = Arc::new(SpaceTimeGrid::new(-1.0, 1.0, 0.0, 1.0, 11, 5).unwrap());
        let b = ScalarField::from_fn(grid, |t, x| (t * x).sin()).unwrap();
        let a = b.map(|v| v + shift).unwrap();
        let r = compare_report(&a, &b, None).unwrap();
        prop_assert!((r.full.inf - shift.abs()).abs() < 1e-12);
    }
}
