//! Distribution of the optimal stopping time: the survival functions
//! `q(t, x) = P(tau > T~)` (forward) and `q*(t, x) = P(tau* < T~)` (backward).
//!
//! Nodes whose value is fixed by the stopping structure alone are filled in
//! closed form; the rest solve
//!
//! ```text
//! ∂t q + b ∂x q + (hbar/2) ∂xx q = 0,   q(T~, ·) = 1 on C,   q = 0 on S for t < T~
//! ```
//!
//! by an implicit march from `T~` down to `-T/2`. The backward function is
//! obtained from the same march on the time-mirrored problem.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{RegionMask, ScalarField, SpaceTimeGrid};
use crate::hjb::Orientation;
use crate::simulate::{Estimate, Hit, PathEnsemble};

#[derive(Debug, Clone)]
pub struct SurvivalProblem {
    pub orientation: Orientation,
    pub threshold: f64,
    /// Optimal drift of the orientation: `b` forward, `b*` backward.
    pub drift: ScalarField,
    pub mask: RegionMask,
    pub hbar: f64,
}

/// How a node's value is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ClosedFormClass {
    Zero,
    One,
    Pde,
}

#[derive(Debug, Clone)]
pub struct SurvivalSolution {
    pub q: ScalarField,
    pub classes: Vec<ClosedFormClass>,
    pub threshold: f64,
    pub orientation: Orientation,
}

impl SurvivalSolution {
    pub fn class(&self, k: usize, i: usize) -> ClosedFormClass {
        self.classes[k * self.q.grid().nx() + i]
    }

    pub fn value(&self, t: f64, x: f64) -> Result<f64> {
        self.q.interpolate(t, x)
    }
}

/// Last continuation time of every spatial node (forward), `-inf` for a
/// node that is never in C.
pub fn last_continuation_times(mask: &RegionMask) -> Vec<f64> {
    let g = mask.grid();
    (0..g.nx())
        .map(|i| {
            (0..g.nt())
                .rev()
                .find(|&k| !mask.is_stopping(k, i))
                .map_or(f64::NEG_INFINITY, |k| g.ts()[k])
        })
        .collect()
}

/// First continuation time of every spatial node (backward), `+inf` for a
/// node that is never in C*.
pub fn first_continuation_times(mask: &RegionMask) -> Vec<f64> {
    let g = mask.grid();
    (0..g.nx())
        .map(|i| {
            (0..g.nt())
                .find(|&k| !mask.is_stopping(k, i))
                .map_or(f64::INFINITY, |k| g.ts()[k])
        })
        .collect()
}

/// Closed-form cases. `edge_time` is the last continuation time `t̄(x)`
/// (forward) or the first one `t̲(x)` (backward) of the node.
pub fn classify_closed_form(
    t: f64,
    stopping: bool,
    threshold: f64,
    edge_time: f64,
    orientation: Orientation,
) -> ClosedFormClass {
    match orientation {
        Orientation::Forward => {
            if (stopping && t > threshold) || (!stopping && t >= threshold) {
                ClosedFormClass::One
            } else if stopping || threshold >= edge_time {
                ClosedFormClass::Zero
            } else {
                ClosedFormClass::Pde
            }
        }
        Orientation::Backward => {
            if (stopping && t < threshold) || (!stopping && t <= threshold) {
                ClosedFormClass::One
            } else if stopping || threshold <= edge_time {
                ClosedFormClass::Zero
            } else {
                ClosedFormClass::Pde
            }
        }
    }
}

fn threshold_row(grid: &SpaceTimeGrid, threshold: f64) -> Result<usize> {
    let k = grid.nearest_t(threshold);
    let tk = grid.ts()[k];
    let interior = threshold > grid.t_min() && threshold < grid.t_max();
    if !interior || (tk - threshold).abs() > 1e-9 * (1.0 + threshold.abs()) {
        return Err(Error::InvalidArgument(format!(
            "threshold {threshold} must be an interior time slice of the grid"
        )));
    }
    Ok(k)
}

fn thomas(a: &[f64], b: &[f64], c: &[f64], d: &[f64], x: &mut [f64]) {
    let n = b.len();
    let mut cp = vec![0.0; n];
    let mut dp = vec![0.0; n];
    cp[0] = c[0] / b[0];
    dp[0] = d[0] / b[0];
    for i in 1..n {
        let m = b[i] - a[i] * cp[i - 1];
        cp[i] = c[i] / m;
        dp[i] = (d[i] - a[i] * dp[i - 1]) / m;
    }
    x[n - 1] = dp[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = dp[i] - cp[i] * x[i + 1];
    }
}

fn solve_forward(
    drift: &ScalarField,
    mask: &RegionMask,
    threshold: f64,
    hbar: f64,
) -> Result<(Vec<f64>, Vec<ClosedFormClass>)> {
    let grid = drift.grid();
    let (nx, nt, dx, dt) = (grid.nx(), grid.nt(), grid.dx(), grid.dt());
    let kt = threshold_row(grid, threshold)?;
    // compare against the slice time itself so rows classify exactly
    let threshold = grid.ts()[kt];
    let tbar = last_continuation_times(mask);
    let mut classes = Vec::with_capacity(nx * nt);
    for k in 0..nt {
        let t = grid.ts()[k];
        for i in 0..nx {
            classes.push(classify_closed_form(t, mask.is_stopping(k, i), threshold, tbar[i], Orientation::Forward));
        }
    }
    let mut q: Vec<f64> = classes
        .iter()
        .map(|c| if *c == ClosedFormClass::One { 1.0 } else { 0.0 })
        .collect();
    let d = 0.5 * hbar / (dx * dx);
    let (mut lo, mut di, mut up) = (vec![0.0; nx], vec![0.0; nx], vec![0.0; nx]);
    let mut rhs = vec![0.0; nx];
    let mut row = vec![0.0; nx];
    for k in (0..kt).rev() {
        let b = drift.row(k);
        for i in 0..nx {
            if classes[k * nx + i] != ClosedFormClass::Pde {
                lo[i] = 0.0;
                up[i] = 0.0;
                di[i] = 1.0;
                rhs[i] = q[k * nx + i];
                continue;
            }
            // central advection while it keeps the matrix monotone, upwind otherwise
            let (wl, wr) = if b[i].abs() * dx <= hbar {
                (d - 0.5 * b[i] / dx, d + 0.5 * b[i] / dx)
            } else if b[i] > 0.0 {
                (d, d + b[i] / dx)
            } else {
                (d - b[i] / dx, d)
            };
            di[i] = 1.0 + dt * (wl + wr);
            lo[i] = -dt * wl;
            up[i] = -dt * wr;
            // reflecting ends: the missing neighbour mirrors the node itself
            if i == 0 {
                di[i] += lo[i];
                lo[i] = 0.0;
            }
            if i + 1 == nx {
                di[i] += up[i];
                up[i] = 0.0;
            }
            rhs[i] = q[(k + 1) * nx + i];
        }
        thomas(&lo, &di, &up, &rhs, &mut row);
        for i in 0..nx {
            let v = row[i];
            if !(-1e-9..=1.0 + 1e-9).contains(&v) {
                return Err(Error::MaximumPrinciple {
                    value: v,
                    t: grid.ts()[k],
                    x: grid.xs()[i],
                });
            }
            q[k * nx + i] = v.clamp(0.0, 1.0);
        }
    }
    Ok((q, classes))
}

/// Solves for `q` (forward) or `q*` (backward) on the problem's grid.
pub fn solve_q(problem: &SurvivalProblem) -> Result<SurvivalSolution> {
    if !problem.drift.grid().same_shape(problem.mask.grid()) {
        return Err(Error::GridMismatch("drift and mask grids differ".into()));
    }
    if !(problem.hbar > 0.0) {
        return Err(Error::InvalidArgument("hbar must be > 0".into()));
    }
    match problem.orientation {
        Orientation::Forward => {
            let (q, classes) = solve_forward(&problem.drift, &problem.mask, problem.threshold, problem.hbar)?;
            Ok(SurvivalSolution {
                q: ScalarField::new(problem.drift.grid_arc().clone(), q)?,
                classes,
                threshold: problem.threshold,
                orientation: Orientation::Forward,
            })
        }
        Orientation::Backward => {
            // s = -t turns tau* < T~ into tau' > -T~ for the drift -b*(-s, x)
            let drift = problem.drift.time_mirrored().map(|b| -b)?;
            let mask = problem.mask.time_mirrored();
            let (q, classes) = solve_forward(&drift, &mask, -problem.threshold, problem.hbar)?;
            let nx = drift.grid().nx();
            let mirrored = ScalarField::new(drift.grid_arc().clone(), q)?.time_mirrored();
            let classes = classes.chunks(nx).rev().flatten().copied().collect();
            Ok(SurvivalSolution {
                q: mirrored.with_grid(problem.drift.grid_arc().clone())?,
                classes,
                threshold: problem.threshold,
                orientation: Orientation::Backward,
            })
        }
    }
}

/// Fraction of paths with `tau > T~` (forward) or `tau* < T~` (backward).
pub fn empirical_survival(ensemble: &PathEnsemble, threshold: f64) -> Estimate {
    let fwd = ensemble.config.orientation == Orientation::Forward;
    let ind = ensemble.records.iter().map(|r| {
        let survived = if fwd { r.stop_time > threshold } else { r.stop_time < threshold };
        if survived {
            1.0
        } else {
            0.0
        }
    });
    let e = Estimate::from_samples(ind);
    // binomial stderr, well defined also when every path agrees
    let p = e.mean;
    Estimate {
        stderr: (p * (1.0 - p) / e.n as f64).sqrt(),
        ..e
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MartingaleRow {
    pub t: f64,
    pub mean: f64,
    pub stderr: f64,
    pub difference: f64,
    pub within_3_stderr: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub t0: f64,
    pub x0: f64,
    pub q0: f64,
    pub rows: Vec<MartingaleRow>,
    pub pass: bool,
}

/// Sample mean of `q(t ∧ tau, Z_{t ∧ tau})` at each checkpoint against
/// `q(t0, x0)`. The checkpoints must be among the ensemble's recorded ones.
pub fn martingale_check(sol: &SurvivalSolution, ensemble: &PathEnsemble, checkpoints: &[f64]) -> Result<MartingaleReport> {
    if sol.orientation != ensemble.config.orientation {
        return Err(Error::InvalidArgument("survival solution and ensemble orientations differ".into()));
    }
    let (t0, x0) = ensemble.config.start;
    let fwd = sol.orientation == Orientation::Forward;
    let q0 = sol.value(t0, x0)?;
    let mut rows = Vec::with_capacity(checkpoints.len());
    for &c in checkpoints {
        let inside = if fwd {
            c >= t0 - 1e-12 && c <= sol.threshold + 1e-12
        } else {
            c <= t0 + 1e-12 && c >= sol.threshold - 1e-12
        };
        if !inside {
            return Err(Error::InvalidArgument(format!(
                "checkpoint {c} lies outside [{t0}, {}]",
                sol.threshold
            )));
        }
        let j = ensemble
            .config
            .checkpoints
            .iter()
            .position(|&r| (r - c).abs() <= 1e-9)
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint {c} was not recorded by the ensemble")))?;
        let vals = ensemble
            .records
            .iter()
            .map(|r| {
                let stopped = r.hit != Hit::Horizon && if fwd { r.stop_time <= c } else { r.stop_time >= c };
                if stopped {
                    let late = if fwd { r.stop_time > sol.threshold } else { r.stop_time < sol.threshold };
                    Ok(if late { 1.0 } else { 0.0 })
                } else {
                    Ok(sol.q.interpolate_clamped(c, r.checkpoint_states[j]))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        let e = Estimate::from_samples(vals);
        let difference = e.mean - q0;
        rows.push(MartingaleRow {
            t: c,
            mean: e.mean,
            stderr: e.stderr,
            difference,
            within_3_stderr: difference.abs() <= 3.0 * e.stderr || difference.abs() <= 1e-12,
        });
    }
    let pass = rows.iter().all(|r| r.within_3_stderr);
    Ok(MartingaleReport { t0, x0, q0, rows, pass })
}

/// Solves `q` for several thresholds in parallel.
pub fn threshold_sweep(
    drift: &ScalarField,
    mask: &RegionMask,
    hbar: f64,
    orientation: Orientation,
    thresholds: &[f64],
) -> Result<Vec<SurvivalSolution>> {
    thresholds
        .par_iter()
        .map(|&threshold| {
            solve_q(&SurvivalProblem {
                orientation,
                threshold,
                drift: drift.clone(),
                mask: mask.clone(),
                hbar,
            })
        })
        .collect()
}

/// Long-format CSV `threshold,t,x,q`.
pub fn write_sweep_csv(path: &Path, sols: &[SurvivalSolution]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["threshold", "t", "x", "q"])?;
    for s in sols {
        let g = s.q.grid();
        for (k, &t) in g.ts().iter().enumerate() {
            for (i, &x) in g.xs().iter().enumerate() {
                w.write_record([
                    format!("{:?}", s.threshold),
                    format!("{t:?}"),
                    format!("{x:?}"),
                    format!("{:?}", s.q.get(k, i)),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// The driftless point-barrier problem: zero drift, stopping on the node
/// column at `barrier`.
pub fn driftless_barrier_problem(
    grid: &Arc<SpaceTimeGrid>,
    barrier: f64,
    threshold: f64,
    hbar: f64,
) -> SurvivalProblem {
    SurvivalProblem {
        orientation: Orientation::Forward,
        threshold,
        drift: ScalarField::constant(grid.clone(), 0.0),
        mask: crate::simulate::point_barrier_mask(grid, barrier),
        hbar,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Region;

    #[test]
    fn closed_form_cases() {
        let f = Orientation::Forward;
        assert_eq!(classify_closed_form(0.2, false, 0.2, 0.4, f), ClosedFormClass::One);
        assert_eq!(classify_closed_form(0.3, true, 0.2, 0.4, f), ClosedFormClass::One);
        assert_eq!(classify_closed_form(0.1, true, 0.2, 0.4, f), ClosedFormClass::Zero);
        assert_eq!(classify_closed_form(0.2, true, 0.2, 0.4, f), ClosedFormClass::Zero);
        assert_eq!(classify_closed_form(0.0, false, 0.2, 0.1, f), ClosedFormClass::Zero);
        assert_eq!(classify_closed_form(0.0, false, 0.2, 0.4, f), ClosedFormClass::Pde);
        let b = Orientation::Backward;
        assert_eq!(classify_closed_form(-0.2, false, -0.2, -0.4, b), ClosedFormClass::One);
        assert_eq!(classify_closed_form(0.1, true, -0.2, -0.4, b), ClosedFormClass::Zero);
        assert_eq!(classify_closed_form(0.0, false, -0.2, -0.4, b), ClosedFormClass::Pde);
        assert_eq!(classify_closed_form(0.0, false, -0.2, -0.1, b), ClosedFormClass::Zero);
    }

    #[test]
    fn driftless_barrier_reproduces_reflection_principle() {
        let grid = Arc::new(SpaceTimeGrid::new(-4.0, 6.0, -1.0, 1.0, 1001, 2001).unwrap());
        let sol = solve_q(&driftless_barrier_problem(&grid, 0.0, 0.0, 1.0)).unwrap();
        let exact = statrs::function::erf::erf(1.0 / 2f64.sqrt());
        let got = sol.value(-1.0, 1.0).unwrap();
        assert!((got - exact).abs() < 1e-3, "{got} vs {exact}");
        let kt = grid.nearest_t(0.0);
        let ib = grid.nearest_x(0.0);
        for i in 0..grid.nx() {
            if i != ib {
                assert_eq!(sol.q.get(kt, i), 1.0);
            }
        }
        for k in 0..kt {
            assert_eq!(sol.q.get(k, ib), 0.0);
        }
    }

    #[test]
    fn survival_decreases_with_threshold() {
        let grid = Arc::new(SpaceTimeGrid::new(-3.0, 3.0, -0.5, 0.5, 121, 101).unwrap());
        let p = driftless_barrier_problem(&grid, 0.0, 0.0, 1.0);
        let sols = threshold_sweep(&p.drift, &p.mask, 1.0, Orientation::Forward, &[-0.2, 0.0, 0.3]).unwrap();
        let k = grid.nearest_t(-0.3);
        for i in 0..grid.nx() {
            assert!(sols[0].q.get(k, i) >= sols[1].q.get(k, i) - 1e-12);
            assert!(sols[1].q.get(k, i) >= sols[2].q.get(k, i) - 1e-12);
        }
        assert!(solve_q(&SurvivalProblem { threshold: 0.013, ..p.clone() }).is_err());
        assert!(solve_q(&SurvivalProblem { threshold: 0.5, ..p }).is_err());
    }

    #[test]
    fn backward_is_the_mirror_of_forward() {
        let grid = Arc::new(SpaceTimeGrid::new(-3.0, 3.0, -0.5, 0.5, 121, 101).unwrap());
        let fwd = driftless_barrier_problem(&grid, 0.0, 0.2, 1.0);
        let qf = solve_q(&fwd).unwrap();
        let ib = grid.nearest_x(0.0);
        let mask_b = RegionMask::from_fn(grid.clone(), |k, i| if k == 0 || i == ib { Region::Stopping } else { Region::Continuation });
        let back = SurvivalProblem {
            orientation: Orientation::Backward,
            threshold: -0.2,
            mask: mask_b,
            ..fwd
        };
        let qb = solve_q(&back).unwrap();
        for k in 0..grid.nt() {
            for i in 0..grid.nx() {
                let (a, b) = (qb.q.get(k, i), qf.q.get(grid.nt() - 1 - k, i));
                assert!((a - b).abs() < 1e-14, "{k} {i} {a} {b}");
            }
        }
        assert_eq!(qb.class(grid.nt() - 1, ib), ClosedFormClass::Zero);
    }
}
