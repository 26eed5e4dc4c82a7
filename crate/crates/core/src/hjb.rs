//! Free-boundary HJB solvers.
//!
//! The exponential substitution `eta = exp(-U / hbar)` turns the forward
//! problem into the obstacle problem
//!
//! ```text
//! min{ -hbar ∂t eta - (hbar^2/2) ∂xx eta + V eta,  eta - exp(-S/hbar) } = 0,   eta(T/2) = exp(-S/hbar)
//! ```
//!
//! and the backward one into its time mirror with `S*`. Each time step is an
//! implicit Euler heat step posed as a linear complementarity problem and
//! solved by projected SOR; the projection keeps `eta >= obstacle` exactly.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    gradient_row, region_from_eta_with, ProblemSpec, Region, RegionMask, RegionTolerance,
    ScalarField, ScalarFn, SpaceTimeGrid,
};

/// Direction of the control problem: `Forward` is posed with a terminal
/// cost at `T/2` and marched downwards in time, `Backward` with an initial
/// cost at `-T/2` and marched upwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Orientation {
    Forward,
    Backward,
}

impl Orientation {
    /// Row holding the boundary data.
    pub fn boundary_row(self, nt: usize) -> usize {
        match self {
            Orientation::Forward => nt - 1,
            Orientation::Backward => 0,
        }
    }

    /// Rows in marching order, boundary row excluded, paired with the row
    /// they are computed from.
    pub fn march(self, nt: usize) -> Vec<(usize, usize)> {
        match self {
            Orientation::Forward => (0..nt - 1).rev().map(|k| (k, k + 1)).collect(),
            Orientation::Backward => (1..nt).map(|k| (k, k - 1)).collect(),
        }
    }

    pub fn mirrored(self) -> Self {
        match self {
            Orientation::Forward => Orientation::Backward,
            Orientation::Backward => Orientation::Forward,
        }
    }
}

/// Treatment of the two truncation nodes `x_min`, `x_max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FarField {
    /// `eta` pinned to the obstacle: the far field is treated as stopped.
    Obstacle,
    /// The value function is extrapolated linearly past the edge: the ghost
    /// node keeps the outward ratio `eta_edge / eta_inner` of the previous
    /// time row.
    LogLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Bound on the complementarity residual scaled by `max(1, |b|_inf)`.
    pub psor_tol: f64,
    /// Bound on the nodewise residual relative to `|b_i|`, so that small
    /// tail values of `eta` are resolved as well; 0 disables it.
    pub psor_rel_tol: f64,
    pub psor_omega: f64,
    pub psor_max_iter: usize,
    pub region_abs_tol: f64,
    pub region_rel_tol: f64,
    pub far_field: FarField,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            psor_tol: 1e-10,
            psor_rel_tol: 1e-8,
            psor_omega: 1.5,
            psor_max_iter: 10_000,
            region_abs_tol: 1e-9,
            region_rel_tol: 1e-8,
            far_field: FarField::LogLinear,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.psor_tol > 0.0) {
            return Err(Error::Config(format!("psor_tol must be > 0, got {}", self.psor_tol)));
        }
        if !(self.psor_rel_tol >= 0.0) {
            return Err(Error::Config(format!("psor_rel_tol must be >= 0, got {}", self.psor_rel_tol)));
        }
        if !(self.psor_omega > 0.0 && self.psor_omega < 2.0) {
            return Err(Error::Config(format!(
                "psor_omega must lie in (0, 2), got {}",
                self.psor_omega
            )));
        }
        if self.psor_max_iter == 0 {
            return Err(Error::Config("psor_max_iter must be >= 1".into()));
        }
        if !(self.region_abs_tol >= 0.0 && self.region_rel_tol >= 0.0) {
            return Err(Error::Config("region tolerances must be >= 0".into()));
        }
        Ok(())
    }

    pub fn region_tolerance(&self) -> RegionTolerance {
        RegionTolerance {
            abs_tol: self.region_abs_tol,
            rel_tol: self.region_rel_tol,
        }
    }
}

/// Iteration statistics of one solve.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub steps: usize,
    pub total_sweeps: usize,
    pub max_sweeps: usize,
    /// Largest scaled complementarity residual accepted at any step.
    pub max_step_residual: f64,
}

/// `eta` (or `eta*`) with its continuation region and free boundary.
#[derive(Debug, Clone)]
pub struct EtaSolution {
    pub eta: ScalarField,
    pub obstacle: ScalarField,
    pub mask: RegionMask,
    /// Free-boundary positions on each time row.
    pub boundary: Vec<Vec<f64>>,
    pub orientation: Orientation,
    /// The stopping cost the obstacle came from (`S` or `S*`).
    pub cost: ScalarFn,
    pub hbar: f64,
    pub far_field: FarField,
    pub stats: SolveStats,
}

/// Value function, optimal drift and region mask.
#[derive(Debug, Clone)]
pub struct ValueSolution {
    pub value: ScalarField,
    pub drift: ScalarField,
    pub mask: RegionMask,
    pub orientation: Orientation,
}

/// Tridiagonal step operator `(1 + 2r) e_i - r (e_{i-1} + e_{i+1})` with
/// boundary rows adjusted for the far-field condition.
struct StepOperator {
    r: f64,
    diag: Vec<f64>,
    pinned_edges: bool,
}

impl StepOperator {
    fn new(n: usize, r: f64, far_field: FarField, prev: &[f64]) -> Self {
        let mut diag = vec![1.0 + 2.0 * r; n];
        let pinned_edges = far_field == FarField::Obstacle;
        if !pinned_edges {
            let cap = (1.0 + r) / r;
            let g_left = (prev[0] / prev[1]).min(cap);
            let g_right = (prev[n - 1] / prev[n - 2]).min(cap);
            diag[0] -= r * g_left;
            diag[n - 1] -= r * g_right;
        }
        Self {
            r,
            diag,
            pinned_edges,
        }
    }

    fn neighbours(&self, e: &[f64], i: usize) -> f64 {
        let n = e.len();
        let left = if i > 0 { e[i - 1] } else { 0.0 };
        let right = if i + 1 < n { e[i + 1] } else { 0.0 };
        left + right
    }

    /// `(A e - b)_i`.
    fn residual(&self, e: &[f64], b: &[f64], i: usize) -> f64 {
        self.diag[i] * e[i] - self.r * self.neighbours(e, i) - b[i]
    }

    fn is_pinned(&self, i: usize, n: usize) -> bool {
        self.pinned_edges && (i == 0 || i + 1 == n)
    }
}

fn rhs_row(prev: &[f64], potential: &[f64], dt_over_hbar: f64) -> Vec<f64> {
    prev.iter()
        .zip(potential)
        .map(|(&e, &v)| e * (1.0 - dt_over_hbar * v))
        .collect()
}

fn scale_of(b: &[f64]) -> f64 {
    b.iter().fold(1.0_f64, |m, v| m.max(v.abs()))
}

/// Projected SOR for `e >= psi, A e >= b, (e - psi)(A e - b) = 0`. `e` holds
/// the initial guess and receives the solution. Returns the sweep count and
/// the final scaled residual.
fn psor(
    op: &StepOperator,
    b: &[f64],
    psi: &[f64],
    e: &mut [f64],
    cfg: &SolverConfig,
) -> Result<(usize, f64)> {
    let n = e.len();
    let scale = scale_of(b);
    for i in 0..n {
        e[i] = e[i].max(psi[i]);
    }
    let mut trace = Vec::new();
    for sweep in 1..=cfg.psor_max_iter {
        for i in 0..n {
            if op.is_pinned(i, n) {
                e[i] = psi[i];
                continue;
            }
            let gs = (b[i] + op.r * op.neighbours(e, i)) / op.diag[i];
            e[i] = psi[i].max(e[i] + cfg.psor_omega * (gs - e[i]));
        }
        let mut worst: f64 = 0.0;
        let mut rel_ok = true;
        for i in 0..n {
            if op.is_pinned(i, n) {
                continue;
            }
            let m = op.residual(e, b, i).min(e[i] - psi[i]).abs();
            worst = worst.max(m);
            rel_ok &= m <= cfg.psor_rel_tol * b[i].abs() || cfg.psor_rel_tol == 0.0;
        }
        let res = worst / scale;
        if res <= cfg.psor_tol && rel_ok {
            return Ok((sweep, res));
        }
        if trace.len() < 64 {
            trace.push(res);
        }
    }
    Err(Error::NonConvergence {
        solver: "projected SOR",
        iterations: cfg.psor_max_iter,
        residual: trace.last().copied().unwrap_or(f64::NAN),
        trace,
    })
}

/// Thomas algorithm for the unconstrained step.
fn solve_tridiagonal(op: &StepOperator, b: &[f64], psi: &[f64], out: &mut [f64]) {
    let n = b.len();
    let mut c_prime = vec![0.0; n];
    let mut d_prime = vec![0.0; n];
    let sub = |i: usize| if op.is_pinned(i, n) { 0.0 } else { -op.r };
    let diag = |i: usize| if op.is_pinned(i, n) { 1.0 } else { op.diag[i] };
    let rhs = |i: usize| if op.is_pinned(i, n) { psi[i] } else { b[i] };
    c_prime[0] = sub(0) / diag(0);
    d_prime[0] = rhs(0) / diag(0);
    for i in 1..n {
        let m = diag(i) - sub(i) * c_prime[i - 1];
        c_prime[i] = if i + 1 < n { sub(i) / m } else { 0.0 };
        d_prime[i] = (rhs(i) - sub(i) * d_prime[i - 1]) / m;
    }
    out[n - 1] = d_prime[n - 1];
    for i in (0..n - 1).rev() {
        out[i] = d_prime[i] - c_prime[i] * out[i + 1];
    }
}

fn check_grid(spec: &ProblemSpec, grid: &SpaceTimeGrid) -> Result<()> {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + a.abs());
    if !(close(grid.t_min(), spec.t_start()) && close(grid.t_max(), spec.t_end())) {
        return Err(Error::GridMismatch(format!(
            "grid spans t in [{}, {}], problem horizon is [{}, {}]",
            grid.t_min(),
            grid.t_max(),
            spec.t_start(),
            spec.t_end()
        )));
    }
    Ok(())
}

fn stopping_cost(spec: &ProblemSpec, orientation: Orientation) -> ScalarFn {
    match orientation {
        Orientation::Forward => spec.terminal_cost,
        Orientation::Backward => spec.initial_cost,
    }
}

struct March {
    eta: Vec<f64>,
    obstacle_row: Vec<f64>,
    stats: SolveStats,
}

fn march(
    spec: &ProblemSpec,
    grid: &SpaceTimeGrid,
    cfg: &SolverConfig,
    orientation: Orientation,
    project: bool,
) -> Result<March> {
    spec.validate()?;
    cfg.validate()?;
    check_grid(spec, grid)?;
    let (nx, nt) = (grid.nx(), grid.nt());
    let hbar = spec.hbar;
    let cost = stopping_cost(spec, orientation);
    let obstacle_row: Vec<f64> = grid.xs().iter().map(|&x| (-cost.eval(x) / hbar).exp()).collect();
    if let Some(i) = obstacle_row.iter().position(|&o| !(o > 0.0 && o.is_finite())) {
        return Err(Error::Numerical(format!(
            "obstacle exp(-S/hbar) is not positive and finite at x = {}",
            grid.xs()[i]
        )));
    }
    let potential: Vec<f64> = grid.xs().iter().map(|&x| spec.potential.eval(x)).collect();
    let r = hbar * grid.dt() / (2.0 * grid.dx() * grid.dx());
    let dt_over_hbar = grid.dt() / hbar;

    let mut eta = vec![0.0; nx * nt];
    let b0 = orientation.boundary_row(nt);
    eta[b0 * nx..(b0 + 1) * nx].copy_from_slice(&obstacle_row);

    let mut stats = SolveStats::default();
    let mut work = vec![0.0; nx];
    for (k, from) in orientation.march(nt) {
        let prev = &eta[from * nx..(from + 1) * nx];
        let op = StepOperator::new(nx, r, cfg.far_field, prev);
        let b = rhs_row(prev, &potential, dt_over_hbar);
        if project {
            work.copy_from_slice(prev);
            let (sweeps, res) = psor(&op, &b, &obstacle_row, &mut work, cfg)?;
            stats.total_sweeps += sweeps;
            stats.max_sweeps = stats.max_sweeps.max(sweeps);
            stats.max_step_residual = stats.max_step_residual.max(res);
        } else {
            solve_tridiagonal(&op, &b, &obstacle_row, &mut work);
        }
        stats.steps += 1;
        if let Some(i) = work.iter().position(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(Error::Numerical(format!(
                "eta = {} at (t={}, x={}); check dt/dx or whether V is bounded below",
                work[i],
                grid.ts()[k],
                grid.xs()[i]
            )));
        }
        eta[k * nx..(k + 1) * nx].copy_from_slice(&work);
    }
    Ok(March {
        eta,
        obstacle_row,
        stats,
    })
}

/// Solves the obstacle problem for `eta` (forward) or `eta*` (backward).
pub fn solve_obstacle(
    spec: &ProblemSpec,
    grid: &Arc<SpaceTimeGrid>,
    cfg: &SolverConfig,
    orientation: Orientation,
) -> Result<EtaSolution> {
    let March {
        eta,
        obstacle_row,
        stats,
    } = march(spec, grid, cfg, orientation, true)?;
    let eta = ScalarField::new(grid.clone(), eta)?;
    let obstacle = ScalarField::new(
        grid.clone(),
        obstacle_row.iter().cycle().take(grid.nx() * grid.nt()).copied().collect(),
    )?;
    let mask = region_from_eta_with(&eta, &obstacle, cfg.region_tolerance())?;
    let boundary = (0..grid.nt()).map(|k| mask.free_boundary(k)).collect();
    Ok(EtaSolution {
        eta,
        obstacle,
        mask,
        boundary,
        orientation,
        cost: stopping_cost(spec, orientation),
        hbar: spec.hbar,
        far_field: cfg.far_field,
        stats,
    })
}

/// Forward problem: marches from `T/2` down to `-T/2`.
pub fn solve_forward_obstacle(
    spec: &ProblemSpec,
    grid: &Arc<SpaceTimeGrid>,
    cfg: &SolverConfig,
) -> Result<EtaSolution> {
    solve_obstacle(spec, grid, cfg, Orientation::Forward)
}

/// Backward problem: marches from `-T/2` up to `T/2`.
pub fn solve_backward_obstacle(
    spec: &ProblemSpec,
    grid: &Arc<SpaceTimeGrid>,
    cfg: &SolverConfig,
) -> Result<EtaSolution> {
    solve_obstacle(spec, grid, cfg, Orientation::Backward)
}

fn drift_sign(orientation: Orientation) -> f64 {
    match orientation {
        Orientation::Forward => 1.0,
        Orientation::Backward => -1.0,
    }
}

fn value_and_drift(
    eta: &ScalarField,
    hbar: f64,
    orientation: Orientation,
    stopped: Option<(&RegionMask, ScalarFn)>,
) -> Result<(ScalarField, ScalarField)> {
    if let Some(v) = eta.values().iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::Numerical(format!("eta must be positive, found {v}")));
    }
    let grid = eta.grid();
    let nx = grid.nx();
    let log_eta = eta.map(f64::ln)?;
    let value = log_eta.map(|l| -hbar * l)?;
    let sign = drift_sign(orientation);
    let mut drift = vec![0.0; eta.values().len()];
    for (k, out) in drift.chunks_mut(nx).enumerate() {
        gradient_row(log_eta.row(k), grid.dx(), out);
        for (i, d) in out.iter_mut().enumerate() {
            *d *= sign * hbar;
            if let Some((mask, cost)) = stopped {
                if mask.is_stopping(k, i) {
                    // drift boundary data: -∂x S forward, +∂x S* backward
                    *d = -sign * cost.derivative(grid.xs()[i]);
                }
            }
        }
    }
    Ok((value, ScalarField::new(eta.grid_arc().clone(), drift)?))
}

/// `U = -hbar ln eta` and the optimal drift: `hbar ∂x ln eta` forward,
/// `-hbar ∂x ln eta*` backward, replaced on stopping nodes by the
/// stopping-cost gradient.
pub fn value_from_eta(sol: &EtaSolution, hbar: f64) -> Result<ValueSolution> {
    let (value, drift) = value_and_drift(
        &sol.eta,
        hbar,
        sol.orientation,
        Some((&sol.mask, sol.cost)),
    )?;
    Ok(ValueSolution {
        value,
        drift,
        mask: sol.mask.clone(),
        orientation: sol.orientation,
    })
}

/// Complementarity residual of a solved obstacle problem.
#[derive(Debug, Clone)]
pub struct LcpResidual {
    /// Nodewise `min(A eta - b, eta - obstacle)`, each row divided by
    /// `max(1, |b|_inf)`.
    pub field: ScalarField,
    pub scaled_inf_norm: f64,
}

/// Recomputes the discrete complementarity residual row by row.
pub fn lcp_residual(sol: &EtaSolution, spec: &ProblemSpec, grid: &SpaceTimeGrid) -> Result<LcpResidual> {
    check_grid(spec, grid)?;
    if !grid.same_shape(sol.eta.grid()) {
        return Err(Error::GridMismatch("solution and grid differ".into()));
    }
    let (nx, nt) = (grid.nx(), grid.nt());
    let r = spec.hbar * grid.dt() / (2.0 * grid.dx() * grid.dx());
    let dt_over_hbar = grid.dt() / spec.hbar;
    let potential: Vec<f64> = grid.xs().iter().map(|&x| spec.potential.eval(x)).collect();
    let mut out = vec![0.0; nx * nt];
    let b0 = sol.orientation.boundary_row(nt);
    for i in 0..nx {
        out[b0 * nx + i] = sol.eta.get(b0, i) - sol.obstacle.get(b0, i);
    }
    for (k, from) in sol.orientation.march(nt) {
        let prev = sol.eta.row(from);
        let e = sol.eta.row(k);
        let psi = sol.obstacle.row(k);
        let op = StepOperator::new(nx, r, sol.far_field, prev);
        let b = rhs_row(prev, &potential, dt_over_hbar);
        let scale = scale_of(&b);
        for i in 0..nx {
            out[k * nx + i] = if op.is_pinned(i, nx) {
                e[i] - psi[i]
            } else {
                op.residual(e, &b, i).min(e[i] - psi[i]) / scale
            };
        }
    }
    let field = ScalarField::new(grid_arc_of(sol), out)?;
    let scaled_inf_norm = field.max_abs();
    Ok(LcpResidual {
        field,
        scaled_inf_norm,
    })
}

fn grid_arc_of(sol: &EtaSolution) -> Arc<SpaceTimeGrid> {
    sol.eta.grid_arc().clone()
}

/// Fixed-horizon problem: the same heat stepping with the projection
/// switched off. The returned mask is all CONTINUATION.
pub fn classical_value(
    spec: &ProblemSpec,
    grid: &Arc<SpaceTimeGrid>,
    orientation: Orientation,
    cfg: &SolverConfig,
) -> Result<ValueSolution> {
    let March { eta, .. } = march(spec, grid, cfg, orientation, false)?;
    let eta = ScalarField::new(grid.clone(), eta)?;
    let (value, drift) = value_and_drift(&eta, spec.hbar, orientation, None)?;
    Ok(ValueSolution {
        value,
        drift,
        mask: RegionMask::filled(grid.clone(), Region::Continuation),
        orientation,
    })
}

/// Mask statistics and free-boundary trace for reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EtaSummary {
    pub orientation: Orientation,
    pub nx: usize,
    pub nt: usize,
    pub stopping_nodes: usize,
    pub continuation_nodes: usize,
    pub free_boundary: Vec<(f64, Vec<f64>)>,
    pub stats: SolveStats,
    pub lcp_residual: f64,
    pub min_eta_minus_obstacle: f64,
}

impl EtaSolution {
    pub fn summary(&self, spec: &ProblemSpec) -> Result<EtaSummary> {
        let grid = self.eta.grid();
        let res = lcp_residual(self, spec, grid)?;
        let gap = self
            .eta
            .values()
            .iter()
            .zip(self.obstacle.values())
            .map(|(e, o)| e - o)
            .fold(f64::INFINITY, f64::min);
        Ok(EtaSummary {
            orientation: self.orientation,
            nx: grid.nx(),
            nt: grid.nt(),
            stopping_nodes: self.mask.count(Region::Stopping),
            continuation_nodes: self.mask.count(Region::Continuation),
            free_boundary: grid
                .ts()
                .iter()
                .zip(&self.boundary)
                .map(|(&t, b)| (t, b.clone()))
                .collect(),
            stats: self.stats,
            lcp_residual: res.scaled_inf_norm,
            min_eta_minus_obstacle: gap,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::ExampleOracle;
    use crate::grid::build_grid;

    fn zero_spec() -> ProblemSpec {
        ProblemSpec {
            hbar: 1.0,
            half_horizon: 0.5,
            x_min: -2.0,
            x_max: 2.0,
            potential: ScalarFn::Zero,
            terminal_cost: ScalarFn::Zero,
            initial_cost: ScalarFn::Zero,
        }
    }

    fn example_grid(nx: usize, nt: usize) -> (ProblemSpec, Arc<SpaceTimeGrid>) {
        let spec = ProblemSpec::worked_example(1.0, 1.0);
        let grid = Arc::new(build_grid(&spec, nx, nt).unwrap());
        (spec, grid)
    }

    #[test]
    fn zero_cost_stops_everywhere() {
        let spec = zero_spec();
        let grid = Arc::new(build_grid(&spec, 41, 21).unwrap());
        for o in [Orientation::Forward, Orientation::Backward] {
            let sol = solve_obstacle(&spec, &grid, &SolverConfig::default(), o).unwrap();
            assert!(sol.eta.values().iter().all(|&e| (e - 1.0).abs() < 1e-12));
            assert_eq!(sol.mask.count(Region::Continuation), 0);
            let v = value_from_eta(&sol, spec.hbar).unwrap();
            assert!(v.value.max_abs() < 1e-12);
            assert!(v.drift.max_abs() < 1e-12);
        }
    }

    #[test]
    fn log_linear_eta_gives_unit_drift() {
        let spec = zero_spec();
        let grid = Arc::new(build_grid(&spec, 41, 5).unwrap());
        let eta = ScalarField::from_fn(grid.clone(), |_, x| x.exp()).unwrap();
        let (u, b) = value_and_drift(&eta, 1.0, Orientation::Forward, None).unwrap();
        for (k, i) in [(0, 0), (2, 20), (4, 40)] {
            assert!((u.get(k, i) + grid.xs()[i]).abs() < 1e-12);
            assert!((b.get(k, i) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn example_forward_free_boundary_is_the_origin() {
        let (spec, grid) = example_grid(121, 201);
        let sol = solve_forward_obstacle(&spec, &grid, &SolverConfig::default()).unwrap();
        let i0 = grid.nearest_x(0.0);
        for k in 0..grid.nt() - 1 {
            for i in 0..grid.nx() {
                let expect = if i == i0 { Region::Stopping } else { Region::Continuation };
                assert_eq!(sol.mask.get(k, i), expect, "node ({k}, {i})");
            }
            assert!((sol.eta.get(k, i0) - 1.0).abs() < 1e-15);
            assert_eq!(sol.boundary[k], vec![0.0]);
        }
        assert_eq!(sol.mask.row(grid.nt() - 1).iter().filter(|r| **r == Region::Stopping).count(), grid.nx());
    }

    #[test]
    fn example_forward_agrees_with_oracle_at_t0_x1() {
        let (spec, grid) = example_grid(601, 1001);
        let sol = solve_forward_obstacle(&spec, &grid, &SolverConfig::default()).unwrap();
        let v = value_from_eta(&sol, spec.hbar).unwrap();
        let oracle = ExampleOracle::new(1.0, 1.0);
        let (k, i) = (grid.nearest_t(0.0), grid.nearest_x(1.0));
        let exact = oracle.value(0.0, 1.0).unwrap();
        assert!((v.value.get(k, i) / exact - 1.0).abs() < 0.01);
        // far-field drift
        let d = v.drift.get(grid.nearest_t(0.0), grid.nearest_x(-3.0));
        assert!((d - 1.0).abs() < 0.02, "{d}");
    }

    #[test]
    fn example_backward_boundary_row_and_oracle() {
        let (spec, grid) = example_grid(601, 1001);
        let sol = solve_backward_obstacle(&spec, &grid, &SolverConfig::default()).unwrap();
        assert_eq!(sol.eta.get(0, grid.nearest_x(1.0)), 0.5);
        let i0 = grid.nearest_x(0.0);
        for k in 1..grid.nt() {
            assert!((sol.eta.get(k, i0) - 1.0).abs() < 1e-15);
        }
        let oracle = ExampleOracle::new(1.0, 1.0);
        let got = sol.eta.get(grid.nearest_t(0.25), grid.nearest_x(-1.0));
        let exact = oracle.eta_star(0.25, -1.0).unwrap();
        assert!((got / exact - 1.0).abs() < 0.01);
    }

    #[test]
    fn residual_vanishes_on_the_obstacle_and_spikes_when_perturbed() {
        let (spec, grid) = example_grid(61, 41);
        let sol = solve_forward_obstacle(&spec, &grid, &SolverConfig::default()).unwrap();
        let res = lcp_residual(&sol, &spec, &grid).unwrap();
        assert!(res.scaled_inf_norm <= 10.0 * SolverConfig::default().psor_tol);

        // eta = obstacle on stopping nodes contributes nothing
        for k in 0..grid.nt() {
            for i in 0..grid.nx() {
                if sol.mask.is_stopping(k, i) {
                    assert!(res.field.get(k, i).abs() <= 1e-15);
                }
            }
        }

        let (k, i) = (10, 45);
        assert_eq!(sol.mask.get(k, i), Region::Continuation);
        let mut bumped = sol.clone();
        let mut vals = sol.eta.values().to_vec();
        vals[k * grid.nx() + i] += 1.0;
        bumped.eta = ScalarField::new(grid.clone(), vals).unwrap();
        let r1 = lcp_residual(&bumped, &spec, &grid).unwrap();
        assert!(r1.field.get(k, i).abs() > 0.5);
        for kk in 0..grid.nt() {
            for ii in 0..grid.nx() {
                let near = (kk as i64 - k as i64).abs() <= 1 && (ii as i64 - i as i64).abs() <= 1;
                if !near {
                    assert!(r1.field.get(kk, ii).abs() <= 1e-9, "({kk},{ii})");
                }
            }
        }
    }

    #[test]
    fn classical_terminal_row_is_the_cost() {
        let (spec, grid) = example_grid(121, 101);
        let c = classical_value(&spec, &grid, Orientation::Forward, &SolverConfig::default()).unwrap();
        let last = grid.nt() - 1;
        for (i, &x) in grid.xs().iter().enumerate() {
            assert!((c.value.get(last, i) - x.abs()).abs() < 1e-12);
        }
        assert_eq!(c.mask.count(Region::Stopping), 0);
    }

    #[test]
    fn psor_cap_is_reported() {
        let (spec, grid) = example_grid(61, 11);
        let cfg = SolverConfig {
            psor_max_iter: 1,
            psor_tol: 1e-15,
            ..Default::default()
        };
        assert!(matches!(
            solve_forward_obstacle(&spec, &grid, &cfg),
            Err(Error::NonConvergence { .. })
        ));
    }

    #[test]
    fn explicit_potential_step_too_large_is_detected() {
        // dt V / hbar > 1 makes the explicit right-hand side negative
        let spec = ProblemSpec {
            potential: ScalarFn::Constant(1e4),
            ..zero_spec()
        };
        let grid = Arc::new(build_grid(&spec, 21, 3).unwrap());
        let cfg = SolverConfig::default();
        assert!(classical_value(&spec, &grid, Orientation::Forward, &cfg).is_err());
        // the projected problem simply stops everywhere
        let sol = solve_forward_obstacle(&spec, &grid, &cfg).unwrap();
        assert_eq!(sol.mask.count(Region::Continuation), 0);
    }
}
