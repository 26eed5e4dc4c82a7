//! Monte Carlo engine: Euler–Maruyama paths of the controlled diffusion,
//! stopping at the computed free boundary, action estimates, the
//! Fokker–Planck density, drift reversal and the two-sided Markov test.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::analytic::{bernstein_transition, integrate, KernelParams, QuadratureConfig};
use crate::error::{Error, Result};
use crate::grid::{gradient_row, ProblemSpec, RegionMask, ScalarField, SpaceTimeGrid};
use crate::hjb::Orientation;

/// Sample mean with its standard error `std / sqrt(n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(xs: impl IntoIterator<Item = f64>) -> Self {
        let mut n = 0usize;
        let (mut mean, mut m2) = (0.0, 0.0);
        for x in xs {
            n += 1;
            let d = x - mean;
            mean += d / n as f64;
            m2 += d * (x - mean);
        }
        let stderr = if n > 1 {
            (m2 / (n - 1) as f64 / n as f64).sqrt()
        } else {
            f64::NAN
        };
        Self { mean, stderr, n }
    }

    /// `|mean - target| <= k * stderr`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.stderr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// `(t0, x0)`.
    pub start: (f64, f64),
    pub orientation: Orientation,
    /// Kill a path whose Brownian bridge over a step touches a stopping edge
    /// without the endpoints straddling it.
    #[serde(default = "default_true")]
    pub bridge_correction: bool,
    /// Times (on the `dt` lattice from `t0`) at which `Z_{t ∧ tau}` is kept.
    #[serde(default)]
    pub checkpoints: Vec<f64>,
}

fn default_true() -> bool {
    true
}

impl SimConfig {
    pub fn new(dt: f64, n_paths: usize, seed: u64, start: (f64, f64), orientation: Orientation) -> Self {
        Self {
            dt,
            n_paths,
            seed,
            start,
            orientation,
            bridge_correction: true,
            checkpoints: Vec::new(),
        }
    }
}

/// How a path ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hit {
    /// Reached the stopping region.
    Boundary,
    /// Survived to the end of the horizon.
    Horizon,
    /// Started inside the stopping region.
    Initial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub stop_time: f64,
    pub stopped_state: f64,
    pub action_value: f64,
    pub hit: Hit,
    #[serde(skip)]
    pub checkpoint_states: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub stop_time: Estimate,
    pub stopped_state: Estimate,
    pub action: Estimate,
    pub boundary_fraction: Estimate,
    pub started_stopped: usize,
}

#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub config: SimConfig,
    /// Records in path-index order.
    pub records: Vec<PathRecord>,
}

impl PathEnsemble {
    pub fn summary(&self) -> EnsembleSummary {
        let r = &self.records;
        EnsembleSummary {
            stop_time: Estimate::from_samples(r.iter().map(|p| p.stop_time)),
            stopped_state: Estimate::from_samples(r.iter().map(|p| p.stopped_state)),
            action: action_estimate(self),
            boundary_fraction: Estimate::from_samples(
                r.iter().map(|p| if p.hit == Hit::Horizon { 0.0 } else { 1.0 }),
            ),
            started_stopped: r.iter().filter(|p| p.hit == Hit::Initial).count(),
        }
    }

    /// `Z_{t ∧ tau}` of every path at checkpoint `j`.
    pub fn checkpoint_states(&self, j: usize) -> Vec<f64> {
        self.records.iter().map(|p| p.checkpoint_states[j]).collect()
    }
}

/// Mean and stderr of the per-path action `∫(b²/2 + V) ds + cost(Z_tau)`.
pub fn action_estimate(ensemble: &PathEnsemble) -> Estimate {
    Estimate::from_samples(ensemble.records.iter().map(|p| p.action_value))
}

struct Stepper<'a> {
    spec: &'a ProblemSpec,
    drift: &'a ScalarField,
    mask: &'a RegionMask,
    cfg: &'a SimConfig,
    t_end: f64,
    n_steps: usize,
    checkpoint_steps: Vec<usize>,
    /// Stopping intervals per mask slice, computed once.
    intervals: Vec<Vec<(f64, f64)>>,
}

fn running_cost(spec: &ProblemSpec, b: f64, x: f64) -> f64 {
    0.5 * b * b + spec.potential.eval(x)
}

impl Stepper<'_> {
    fn step_time(&self, j: usize) -> f64 {
        if j == self.n_steps {
            self.t_end
        } else {
            self.cfg.start.0 + j as f64 * self.cfg.dt
        }
    }

    /// Intervals used for a step ending at `t`. The final slice is the
    /// boundary data (all stopped), so the last interior slice is used there.
    fn intervals_at(&self, t: f64) -> &[(f64, f64)] {
        let nt = self.mask.grid().nt();
        let k = self.mask.grid().slice_at(t).min(nt - 2);
        &self.intervals[k]
    }

    fn starts_stopped(&self) -> bool {
        let (t0, x0) = self.cfg.start;
        let g = self.mask.grid();
        let k = g.slice_at(t0);
        if k == g.nt() - 1 {
            return self.mask.is_stopping(k, g.nearest_x(x0));
        }
        let tol = 1e-9 * g.dx();
        self.intervals[k].iter().any(|&(lo, hi)| x0 >= lo - tol && x0 <= hi + tol)
    }

    fn run(&self, path: u64) -> Result<PathRecord> {
        let (t0, x0) = self.cfg.start;
        let n_cp = self.checkpoint_steps.len();
        if self.starts_stopped() {
            return Ok(PathRecord {
                stop_time: t0,
                stopped_state: x0,
                action_value: self.spec.terminal_cost.eval(x0),
                hit: Hit::Initial,
                checkpoint_states: vec![x0; n_cp],
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(path);
        let hbar = self.spec.hbar;
        let mut cps = Vec::with_capacity(n_cp);
        let mut cp_next = 0;
        while cp_next < n_cp && self.checkpoint_steps[cp_next] == 0 {
            cps.push(x0);
            cp_next += 1;
        }
        let mut t = t0;
        let mut z = x0;
        let mut b = self.drift.interpolate_clamped(t, z);
        let mut action = 0.0;
        for j in 1..=self.n_steps {
            let t_new = self.step_time(j);
            let h = t_new - t;
            let xi: f64 = rng.sample(StandardNormal);
            let z_new = z + b * h + (hbar * h).sqrt() * xi;
            if !z_new.is_finite() {
                return Err(Error::Numerical(format!("path {path} left the reals at t={t_new}")));
            }
            let u: f64 = if self.cfg.bridge_correction { rng.random() } else { 1.0 };
            let f0 = running_cost(self.spec, b, z);
            if let Some((theta, edge)) = self.crossing(z, z_new, h, u, t_new) {
                let th = t + theta * h;
                let bh = self.drift.interpolate_clamped(th, edge);
                action += 0.5 * theta * h * (f0 + running_cost(self.spec, bh, edge));
                action += self.spec.terminal_cost.eval(edge);
                cps.resize(n_cp, edge);
                return Ok(PathRecord {
                    stop_time: th,
                    stopped_state: edge,
                    action_value: action,
                    hit: Hit::Boundary,
                    checkpoint_states: cps,
                });
            }
            let b_new = self.drift.interpolate_clamped(t_new, z_new);
            action += 0.5 * h * (f0 + running_cost(self.spec, b_new, z_new));
            t = t_new;
            z = z_new;
            b = b_new;
            while cp_next < n_cp && self.checkpoint_steps[cp_next] == j {
                cps.push(z);
                cp_next += 1;
            }
        }
        action += self.spec.terminal_cost.eval(z);
        Ok(PathRecord {
            stop_time: t,
            stopped_state: z,
            action_value: action,
            hit: Hit::Horizon,
            checkpoint_states: cps,
        })
    }

    /// First stopping edge met on the step `z -> z_new`: the crossing
    /// fraction by linear interpolation and the edge position.
    fn crossing(&self, z: f64, z_new: f64, h: f64, u: f64, t_new: f64) -> Option<(f64, f64)> {
        let ivs = self.intervals_at(t_new);
        let mut best: Option<(f64, f64)> = None;
        let mut consider = |theta: f64, edge: f64| {
            if best.is_none_or(|(b, _)| theta < b) {
                best = Some((theta, edge));
            }
        };
        for &(lo, hi) in ivs {
            if z_new >= lo && z_new <= hi {
                // landed inside: enter through the edge facing z
                let edge = if z < lo { lo } else if z > hi { hi } else { z_new };
                let theta = if z == z_new { 1.0 } else { ((edge - z) / (z_new - z)).clamp(0.0, 1.0) };
                consider(theta, edge);
            } else if (z < lo) != (z_new < lo) {
                let edge = if z < lo { lo } else { hi };
                consider(((edge - z) / (z_new - z)).clamp(0.0, 1.0), edge);
            }
        }
        if best.is_some() || !self.cfg.bridge_correction {
            return best;
        }
        // Brownian-bridge touch probability of the nearest edge on the same side
        let mut p_survive = 1.0;
        let mut nearest: Option<(f64, f64)> = None;
        for &(lo, hi) in ivs {
            let edges = if lo == hi { &[lo][..] } else { &[lo, hi][..] };
            for &edge in edges {
                let (d0, d1) = (z - edge, z_new - edge);
                if d0 * d1 > 0.0 {
                    let p = (-2.0 * d0 * d1 / (self.spec.hbar * h)).exp();
                    p_survive *= 1.0 - p;
                    let d = d0.abs().min(d1.abs());
                    if nearest.is_none_or(|(nd, _)| d < nd) {
                        nearest = Some((d, edge));
                    }
                }
            }
        }
        if u > p_survive {
            nearest.map(|(_, edge)| (0.5, edge))
        } else {
            None
        }
    }
}

fn simulate_oriented(spec: &ProblemSpec, drift: &ScalarField, mask: &RegionMask, cfg: &SimConfig) -> Result<PathEnsemble> {
    spec.validate()?;
    let grid = drift.grid();
    if !grid.same_shape(mask.grid()) {
        return Err(Error::GridMismatch("drift and mask grids differ".into()));
    }
    if cfg.n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be >= 1".into()));
    }
    if !(cfg.dt > 0.0 && cfg.dt <= grid.dt() * (1.0 + 1e-9)) {
        return Err(Error::InvalidArgument(format!(
            "dt must lie in (0, grid dt = {}], got {}",
            grid.dt(),
            cfg.dt
        )));
    }
    let (t0, x0) = cfg.start;
    let t_end = grid.t_max();
    if !(t0 >= grid.t_min() - 1e-12 && t0 <= t_end && x0.is_finite()) {
        return Err(Error::InvalidArgument(format!("start ({t0}, {x0}) outside the horizon")));
    }
    let n_steps = ((t_end - t0) / cfg.dt - 1e-9).ceil().max(0.0) as usize;
    let mut checkpoint_steps = Vec::with_capacity(cfg.checkpoints.len());
    for &c in &cfg.checkpoints {
        let s = (c - t0) / cfg.dt;
        let j = s.round();
        let on_lattice = (s - j).abs() <= 1e-6 || (c - t_end).abs() <= 1e-12;
        if !(c >= t0 - 1e-12 && c <= t_end + 1e-12 && on_lattice) {
            return Err(Error::InvalidArgument(format!(
                "checkpoint {c} is not on the step lattice from {t0} with dt {}",
                cfg.dt
            )));
        }
        checkpoint_steps.push((j as usize).min(n_steps));
    }
    if checkpoint_steps.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidArgument("checkpoints must be nondecreasing".into()));
    }
    let stepper = Stepper {
        spec,
        drift,
        mask,
        cfg,
        t_end,
        n_steps,
        checkpoint_steps,
        intervals: (0..grid.nt()).map(|k| mask.stopping_intervals(k)).collect(),
    };
    let records = (0..cfg.n_paths as u64)
        .into_par_iter()
        .map(|p| stepper.run(p))
        .collect::<Result<Vec<_>>>()?;
    Ok(PathEnsemble {
        config: cfg.clone(),
        records,
    })
}

/// Forward controlled diffusion `dZ = b dt + sqrt(hbar) dW` from
/// `cfg.start`, stopped on entering the stopping region or at `T/2`.
pub fn simulate_forward(spec: &ProblemSpec, drift: &ScalarField, mask: &RegionMask, cfg: &SimConfig) -> Result<PathEnsemble> {
    if cfg.orientation != Orientation::Forward {
        return Err(Error::InvalidArgument("simulate_forward needs a FORWARD config".into()));
    }
    simulate_oriented(spec, drift, mask, cfg)
}

/// Backward diffusion `d*Z = b* d*t + sqrt(hbar) d*W*` run from
/// `cfg.start` down to `-T/2`. Under `s = -t` it is a forward diffusion with
/// drift `-b*(-s, x)`; times are mapped back afterwards.
pub fn simulate_backward(
    spec: &ProblemSpec,
    drift_star: &ScalarField,
    mask_star: &RegionMask,
    cfg: &SimConfig,
) -> Result<PathEnsemble> {
    if cfg.orientation != Orientation::Backward {
        return Err(Error::InvalidArgument("simulate_backward needs a BACKWARD config".into()));
    }
    let mirrored_spec = spec.time_mirrored();
    let drift = drift_star.time_mirrored().map(|b| -b)?;
    let mask = mask_star.time_mirrored();
    let mut mcfg = cfg.clone();
    mcfg.start = (-cfg.start.0, cfg.start.1);
    mcfg.checkpoints = cfg.checkpoints.iter().map(|c| -c).collect();
    let mut ens = simulate_oriented(&mirrored_spec, &drift, &mask, &mcfg)?;
    for r in &mut ens.records {
        r.stop_time = -r.stop_time;
    }
    ens.config = cfg.clone();
    Ok(ens)
}

pub fn simulate(spec: &ProblemSpec, drift: &ScalarField, mask: &RegionMask, cfg: &SimConfig) -> Result<PathEnsemble> {
    match cfg.orientation {
        Orientation::Forward => simulate_forward(spec, drift, mask, cfg),
        Orientation::Backward => simulate_backward(spec, drift, mask, cfg),
    }
}

/// Drift reversal `B* = B - hbar ∂x ln rho`.
#[derive(Debug, Clone)]
pub struct ReversedDrift {
    pub drift: ScalarField,
    /// Nodes where `rho <= floor`; their value is not meaningful.
    pub undefined: Vec<bool>,
}

pub fn reversed_drift(drift: &ScalarField, rho: &ScalarField, hbar: f64) -> Result<ReversedDrift> {
    reversed_drift_with_floor(drift, rho, hbar, 1e-300)
}

pub fn reversed_drift_with_floor(drift: &ScalarField, rho: &ScalarField, hbar: f64, floor: f64) -> Result<ReversedDrift> {
    drift.check_same_grid(rho)?;
    let undefined: Vec<bool> = rho.values().iter().map(|&r| !(r > floor)).collect();
    if undefined.iter().all(|&u| u) {
        return Err(Error::InvalidArgument("rho is nonpositive everywhere".into()));
    }
    let grid = rho.grid();
    let nx = grid.nx();
    let mut out = vec![0.0; nx * grid.nt()];
    let mut logs = vec![0.0; nx];
    for (k, o) in out.chunks_mut(nx).enumerate() {
        for (l, &r) in logs.iter_mut().zip(rho.row(k)) {
            *l = r.max(floor).ln();
        }
        gradient_row(&logs, grid.dx(), o);
        for (v, &b) in o.iter_mut().zip(drift.row(k)) {
            *v = b - hbar * *v;
        }
    }
    Ok(ReversedDrift {
        drift: ScalarField::new(rho.grid_arc().clone(), out)?,
        undefined,
    })
}

/// Density evolved by the forward Kolmogorov equation.
#[derive(Debug, Clone)]
pub struct FokkerPlanck {
    pub rho: ScalarField,
    /// `dx * sum(rho)` per slice.
    pub mass: Vec<f64>,
    pub max_cell_peclet: f64,
}

/// `∂t rho = -∂x(b rho) + (hbar/2) ∂xx rho` on the drift's grid, fully
/// implicit with upwinded face fluxes and no flux through the ends. Nodes
/// marked STOPPING in `absorbing` are set to zero (killed mass).
pub fn fokker_planck(drift: &ScalarField, rho0: &[f64], hbar: f64, absorbing: Option<&RegionMask>) -> Result<FokkerPlanck> {
    let grid = drift.grid();
    let (nx, nt, dx, dt) = (grid.nx(), grid.nt(), grid.dx(), grid.dt());
    if rho0.len() != nx {
        return Err(Error::GridMismatch(format!("rho0 has {} values, grid has {nx} nodes", rho0.len())));
    }
    if rho0.iter().any(|&r| !(r >= 0.0 && r.is_finite())) {
        return Err(Error::InvalidArgument("rho0 must be nonnegative".into()));
    }
    let m0 = dx * rho0.iter().sum::<f64>();
    if (m0 - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("rho0 has mass {m0}, expected 1")));
    }
    if let Some(m) = absorbing {
        if !m.grid().same_shape(grid) {
            return Err(Error::GridMismatch("absorbing mask grid differs".into()));
        }
    }
    let d = 0.5 * hbar / dx;
    let lam = dt / dx;
    let mut rho = Vec::with_capacity(nx * nt);
    rho.extend_from_slice(rho0);
    let mut mass = vec![m0];
    let mut max_pe: f64 = 0.0;
    let (mut lower, mut diag, mut upper) = (vec![0.0; nx], vec![0.0; nx], vec![0.0; nx]);
    for k in 1..nt {
        let b = drift.row(k);
        lower.fill(0.0);
        diag.fill(1.0);
        upper.fill(0.0);
        // face i+1/2 flux: bp rho_i + bm rho_{i+1} - d (rho_{i+1} - rho_i)
        for i in 0..nx - 1 {
            let bf = 0.5 * (b[i] + b[i + 1]);
            max_pe = max_pe.max(bf.abs() * dx / (0.5 * hbar));
            let (bp, bm) = (bf.max(0.0), bf.min(0.0));
            let (ci, ci1) = (bp + d, bm - d);
            diag[i] += lam * ci;
            upper[i] += lam * ci1;
            diag[i + 1] -= lam * ci1;
            lower[i + 1] -= lam * ci;
        }
        let mut rhs = rho[(k - 1) * nx..k * nx].to_vec();
        if let Some(m) = absorbing {
            for i in 0..nx {
                if m.is_stopping(k, i) {
                    lower[i] = 0.0;
                    upper[i] = 0.0;
                    diag[i] = 1.0;
                    rhs[i] = 0.0;
                }
            }
        }
        let next = thomas(&lower, &diag, &upper, &rhs);
        let floor = next.iter().copied().fold(f64::INFINITY, f64::min);
        if floor < -1e-12 {
            return Err(Error::Numerical(format!("Fokker-Planck density went negative ({floor})")));
        }
        mass.push(dx * next.iter().sum::<f64>());
        rho.extend(next.into_iter().map(|v| v.max(0.0)));
    }
    if max_pe > 2.0 {
        log::warn!("Fokker-Planck cell Peclet number {max_pe:.2} exceeds 2; upwinding adds visible diffusion");
    }
    Ok(FokkerPlanck {
        rho: ScalarField::new(drift.grid_arc().clone(), rho)?,
        mass,
        max_cell_peclet: max_pe,
    })
}

fn thomas(a: &[f64], b: &[f64], c: &[f64], d: &[f64]) -> Vec<f64> {
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
    let mut x = vec![0.0; n];
    x[n - 1] = dp[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = dp[i] - cp[i] * x[i + 1];
    }
    x
}

/// Parameters of the two-sided Markov test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BridgeTestConfig {
    pub s: f64,
    pub x: f64,
    pub t: f64,
    pub u: f64,
    pub z: f64,
    pub hbar: f64,
    pub n_paths: usize,
    pub n_bins: usize,
    pub seed: u64,
    pub significance: f64,
}

impl Default for BridgeTestConfig {
    fn default() -> Self {
        Self {
            s: 0.0,
            x: 0.0,
            t: 0.5,
            u: 1.0,
            z: 0.0,
            hbar: 1.0,
            n_paths: 100_000,
            n_bins: 30,
            seed: 0,
            significance: 0.01,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BridgeReport {
    pub mean: Estimate,
    pub variance: f64,
    pub variance_stderr: f64,
    pub skewness: f64,
    pub skewness_stderr: f64,
    pub chi_square: f64,
    pub dof: usize,
    pub p_value: f64,
    pub pass: bool,
    pub bin_edges: Vec<f64>,
    pub observed: Vec<u64>,
    pub expected: Vec<f64>,
}

/// Samples `Z_t` of free paths started at `(s, x)` and pinned to `z` at `u`
/// (a free Brownian path `W` is simulated at `t` and `u` and corrected by
/// `(t-s)/(u-s) (z - W_u)`), then compares its histogram with the
/// Bernstein transition density by a chi-square test.
pub fn bridge_markov_test(cfg: &BridgeTestConfig) -> Result<BridgeReport> {
    let samples = sample_pinned(cfg)?;
    bridge_chi_square(&samples, cfg)
}

/// `Z_t` of `cfg.n_paths` pinned paths, in path-index order.
pub fn sample_pinned(cfg: &BridgeTestConfig) -> Result<Vec<f64>> {
    let &BridgeTestConfig { s, x, t, u, z, hbar, n_paths, seed, .. } = cfg;
    if !(s < t && t < u) {
        return Err(Error::InvalidArgument(format!("need s < t < u, got {s}, {t}, {u}")));
    }
    KernelParams::new(hbar)?;
    let w = (t - s) / (u - s);
    Ok((0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i);
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            let wt = x + (hbar * (t - s)).sqrt() * a;
            let wu = wt + (hbar * (u - t)).sqrt() * b;
            wt + w * (z - wu)
        })
        .collect())
}

/// Chi-square comparison of `samples` with the Bernstein transition density
/// for the endpoints in `cfg`.
pub fn bridge_chi_square(samples: &[f64], cfg: &BridgeTestConfig) -> Result<BridgeReport> {
    let &BridgeTestConfig { s, x, t, u, z, hbar, n_bins, significance, .. } = cfg;
    let n_paths = samples.len();
    if !(s < t && t < u) {
        return Err(Error::InvalidArgument(format!("need s < t < u, got {s}, {t}, {u}")));
    }
    if n_bins < 3 || n_paths < 10 * n_bins {
        return Err(Error::InvalidArgument("need n_bins >= 3 and n_paths >= 10 n_bins".into()));
    }
    let p = KernelParams::new(hbar)?;
    let mean = Estimate::from_samples(samples.iter().copied());
    let n = n_paths as f64;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in samples {
        let d = v - mean.mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
    let variance = m2 * n / (n - 1.0);
    let sd = m2.sqrt();
    // bins over mean ± 4 sd; the two end bins absorb the tails
    let (lo, hi) = (mean.mean - 4.0 * sd, mean.mean + 4.0 * sd);
    let width = (hi - lo) / n_bins as f64;
    let bin_edges: Vec<f64> = (0..=n_bins).map(|j| lo + j as f64 * width).collect();
    let mut observed = vec![0u64; n_bins];
    for &v in samples {
        let j = (((v - lo) / width).floor().max(0.0) as usize).min(n_bins - 1);
        observed[j] += 1;
    }
    let qcfg = QuadratureConfig::default();
    let density = |y: f64| bernstein_transition(s, x, t, y, u, z, &p).unwrap_or(0.0);
    let tail = 12.0 * sd.max((hbar * (t - s) * (u - t) / (u - s)).sqrt());
    let mut expected = Vec::with_capacity(n_bins);
    for j in 0..n_bins {
        let a = if j == 0 { lo - tail } else { bin_edges[j] };
        let b = if j + 1 == n_bins { hi + tail } else { bin_edges[j + 1] };
        expected.push(n * integrate(density, a, b, 4, &qcfg)?);
    }
    let (mut bin_edges, mut observed, mut expected) = (bin_edges, observed, expected);
    // fold end bins inward until each expects at least 5 counts
    while expected.len() > 3 && expected[0] < 5.0 {
        let (o, e) = (observed.remove(0), expected.remove(0));
        observed[0] += o;
        expected[0] += e;
        bin_edges.remove(1);
    }
    while expected.len() > 3 && expected[expected.len() - 1] < 5.0 {
        let (o, e) = (observed.pop().unwrap(), expected.pop().unwrap());
        *observed.last_mut().unwrap() += o;
        *expected.last_mut().unwrap() += e;
        bin_edges.remove(bin_edges.len() - 2);
    }
    if expected.iter().any(|&e| e < 5.0) {
        return Err(Error::Statistics(format!("too many bins for {n_paths} paths")));
    }
    let chi_square: f64 = observed
        .iter()
        .zip(&expected)
        .map(|(&o, &e)| (o as f64 - e).powi(2) / e)
        .sum();
    let dof = expected.len() - 1;
    let dist = ChiSquared::new(dof as f64).map_err(|e| Error::Statistics(e.to_string()))?;
    let p_value = 1.0 - dist.cdf(chi_square);
    Ok(BridgeReport {
        mean,
        variance,
        variance_stderr: ((m4 - m2 * m2) / n).sqrt(),
        skewness: m3 / m2.powf(1.5),
        skewness_stderr: (6.0 / n).sqrt(),
        chi_square,
        dof,
        p_value,
        pass: p_value >= significance,
        bin_edges,
        observed,
        expected,
    })
}

/// Histogram density of `values` on cell-centred bins around the nodes of
/// `grid` (width `dx`), normalised by `n_total`.
pub fn histogram_on_nodes(values: &[f64], grid: &SpaceTimeGrid, n_total: usize) -> Vec<f64> {
    let mut h = vec![0.0; grid.nx()];
    for &v in values {
        if v >= grid.x_min() - 0.5 * grid.dx() && v <= grid.x_max() + 0.5 * grid.dx() {
            h[grid.nearest_x(v)] += 1.0;
        }
    }
    let scale = 1.0 / (n_total as f64 * grid.dx());
    h.iter_mut().for_each(|v| *v *= scale);
    h
}

/// Convenience: a mask that stops only on the node column at `x = barrier`
/// (and everywhere on the final slice).
pub fn point_barrier_mask(grid: &Arc<SpaceTimeGrid>, barrier: f64) -> RegionMask {
    use crate::grid::Region;
    let ib = grid.nearest_x(barrier);
    let last = grid.nt() - 1;
    RegionMask::from_fn(grid.clone(), |k, i| {
        if k == last || i == ib {
            Region::Stopping
        } else {
            Region::Continuation
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Region, ScalarFn};

    fn free_spec(half: f64) -> ProblemSpec {
        ProblemSpec {
            hbar: 1.0,
            half_horizon: half,
            x_min: -6.0,
            x_max: 6.0,
            potential: ScalarFn::Zero,
            terminal_cost: ScalarFn::Zero,
            initial_cost: ScalarFn::Zero,
        }
    }

    fn free_grid(half: f64, nt: usize) -> Arc<SpaceTimeGrid> {
        Arc::new(SpaceTimeGrid::new(-6.0, 6.0, -half, half, 121, nt).unwrap())
    }

    fn never_stop(grid: &Arc<SpaceTimeGrid>) -> RegionMask {
        RegionMask::filled(grid.clone(), Region::Continuation)
    }

    #[test]
    fn estimate_moments() {
        let e = Estimate::from_samples([1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.mean, 2.5);
        assert!((e.stderr - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn brownian_moments_forward_and_backward() {
        let grid = free_grid(0.5, 101);
        let spec = free_spec(0.5);
        let zero = ScalarField::constant(grid.clone(), 0.0);
        let mask = never_stop(&grid);
        let cfg = SimConfig::new(0.01, 20_000, 7, (-0.5, 0.3), Orientation::Forward);
        let ens = simulate_forward(&spec, &zero, &mask, &cfg).unwrap();
        let end = Estimate::from_samples(ens.records.iter().map(|r| r.stopped_state));
        assert!(end.within(0.3, 3.0), "{end:?}");
        let var = Estimate::from_samples(ens.records.iter().map(|r| (r.stopped_state - 0.3).powi(2)));
        assert!(var.within(1.0, 3.0), "{var:?}");
        assert!(ens.records.iter().all(|r| r.hit == Hit::Horizon && r.stop_time == 0.5));

        let cfg = SimConfig::new(0.01, 20_000, 8, (0.5, -0.4), Orientation::Backward);
        let ens = simulate_backward(&spec, &zero, &mask, &cfg).unwrap();
        let end = Estimate::from_samples(ens.records.iter().map(|r| r.stopped_state));
        assert!(end.within(-0.4, 3.0), "{end:?}");
        assert!(ens.records.iter().all(|r| r.stop_time == -0.5));
    }

    #[test]
    fn constant_payoff_action() {
        let grid = free_grid(0.5, 11);
        let spec = ProblemSpec {
            terminal_cost: ScalarFn::Constant(2.5),
            ..free_spec(0.5)
        };
        let zero = ScalarField::constant(grid.clone(), 0.0);
        let cfg = SimConfig::new(0.1, 50, 1, (-0.5, 0.0), Orientation::Forward);
        let ens = simulate_forward(&spec, &zero, &never_stop(&grid), &cfg).unwrap();
        let a = action_estimate(&ens);
        assert_eq!(a.mean, 2.5);
        assert_eq!(a.stderr, 0.0);
    }

    #[test]
    fn deterministic_regardless_of_threads() {
        let grid = free_grid(0.5, 101);
        let spec = free_spec(0.5);
        let zero = ScalarField::constant(grid.clone(), 0.2);
        let mask = point_barrier_mask(&grid, 0.0);
        let cfg = SimConfig::new(0.01, 500, 99, (-0.5, 0.5), Orientation::Forward);
        let a = simulate_forward(&spec, &zero, &mask, &cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| simulate_forward(&spec, &zero, &mask, &cfg).unwrap());
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn driftless_barrier_survival_matches_reflection_principle() {
        let grid = free_grid(1.0, 201);
        let spec = free_spec(1.0);
        let zero = ScalarField::constant(grid.clone(), 0.0);
        let mask = point_barrier_mask(&grid, 0.0);
        let cfg = SimConfig::new(0.01, 40_000, 3, (0.0, 1.0), Orientation::Forward);
        let ens = simulate_forward(&spec, &zero, &mask, &cfg).unwrap();
        let surv = Estimate::from_samples(ens.records.iter().map(|r| if r.hit == Hit::Horizon { 1.0 } else { 0.0 }));
        let exact = statrs::function::erf::erf(1.0 / 2f64.sqrt());
        assert!(surv.within(exact, 3.0), "{surv:?} vs {exact}");
        assert!(ens.records.iter().filter(|r| r.hit == Hit::Boundary).all(|r| r.stopped_state == 0.0));
    }

    #[test]
    fn start_in_stopping_is_flagged() {
        let grid = free_grid(0.5, 11);
        let spec = free_spec(0.5);
        let zero = ScalarField::constant(grid.clone(), 0.0);
        let mask = point_barrier_mask(&grid, 0.0);
        let cfg = SimConfig::new(0.1, 10, 1, (-0.5, 0.0), Orientation::Forward);
        let ens = simulate_forward(&spec, &zero, &mask, &cfg).unwrap();
        assert!(ens.records.iter().all(|r| r.hit == Hit::Initial && r.stop_time == -0.5));
        assert_eq!(ens.summary().started_stopped, 10);
    }

    #[test]
    fn checkpoints_record_stopped_or_current_state() {
        let grid = free_grid(0.5, 101);
        let spec = free_spec(0.5);
        let zero = ScalarField::constant(grid.clone(), 0.0);
        let mask = point_barrier_mask(&grid, 0.0);
        let mut cfg = SimConfig::new(0.01, 200, 5, (-0.5, 0.2), Orientation::Forward);
        cfg.checkpoints = vec![-0.5, 0.0, 0.5];
        let ens = simulate_forward(&spec, &zero, &mask, &cfg).unwrap();
        for r in &ens.records {
            assert_eq!(r.checkpoint_states[0], 0.2);
            assert_eq!(r.checkpoint_states[2], r.stopped_state);
            if r.stop_time <= 0.0 {
                assert_eq!(r.checkpoint_states[1], 0.0);
            }
        }
        cfg.checkpoints = vec![0.005];
        assert!(simulate_forward(&spec, &zero, &mask, &cfg).is_err());
    }

    #[test]
    fn reversal_of_gaussian_density() {
        let grid = free_grid(0.5, 3);
        let rho = ScalarField::from_fn(grid.clone(), |_, x| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()).unwrap();
        let zero = ScalarField::constant(grid.clone(), 0.0);
        let r = reversed_drift(&zero, &rho, 1.0).unwrap();
        for (i, &x) in grid.xs().iter().enumerate() {
            assert!((r.drift.get(1, i) - x).abs() < 1e-9);
        }
        let flat = ScalarField::constant(grid.clone(), 0.3);
        let b = ScalarField::from_fn(grid.clone(), |t, x| t + x).unwrap();
        let r = reversed_drift(&b, &flat, 1.0).unwrap();
        for (x, y) in r.drift.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(reversed_drift(&b, &ScalarField::constant(grid.clone(), 0.0), 1.0).is_err());
    }

    #[test]
    fn fokker_planck_heat_spreading_and_mass() {
        let grid = Arc::new(SpaceTimeGrid::new(-8.0, 8.0, 0.0, 1.0, 801, 401).unwrap());
        let zero = ScalarField::constant(grid.clone(), 0.0);
        let s2 = 0.25;
        let rho0: Vec<f64> = grid.xs().iter().map(|&x| (-x * x / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2).sqrt()).collect();
        let fp = fokker_planck(&zero, &rho0, 1.0, None).unwrap();
        assert!(fp.mass.iter().all(|m| (m - 1.0).abs() < 1e-6));
        let last = fp.rho.row(grid.nt() - 1);
        let var: f64 = grid.xs().iter().zip(last).map(|(x, r)| x * x * r * grid.dx()).sum();
        assert!((var / (s2 + 1.0) - 1.0).abs() < 0.01, "{var}");
    }

    #[test]
    fn fokker_planck_absorbing_removes_mass() {
        let grid = Arc::new(SpaceTimeGrid::new(-4.0, 4.0, 0.0, 1.0, 161, 201).unwrap());
        let zero = ScalarField::constant(grid.clone(), 0.0);
        let mut rho0 = vec![0.0; 161];
        rho0[grid.nearest_x(1.0)] = 1.0 / grid.dx();
        let mask = point_barrier_mask(&grid, 0.0);
        let fp = fokker_planck(&zero, &rho0, 1.0, Some(&mask)).unwrap();
        let surv = fp.mass[grid.nt() - 2];
        assert!((surv - 0.6827).abs() < 0.02, "{surv}");
        assert!(fp.mass.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }

    #[test]
    fn bridge_moments_and_chi_square() {
        let rep = bridge_markov_test(&BridgeTestConfig { n_paths: 50_000, seed: 11, ..Default::default() }).unwrap();
        assert!(rep.mean.within(0.0, 3.0));
        assert!((rep.variance - 0.25).abs() <= 3.0 * rep.variance_stderr);
        assert!(rep.skewness.abs() <= 3.0 * rep.skewness_stderr);
        assert!(rep.pass, "p = {}", rep.p_value);
        let sym = bridge_markov_test(&BridgeTestConfig { x: 0.8, z: 0.8, n_paths: 50_000, seed: 12, ..Default::default() }).unwrap();
        assert!(sym.skewness.abs() <= 3.0 * sym.skewness_stderr);
        assert!(bridge_markov_test(&BridgeTestConfig { n_paths: 100, n_bins: 30, ..Default::default() }).is_err());
    }

    #[test]
    fn wrong_law_is_rejected() {
        let cfg = BridgeTestConfig { n_paths: 50_000, seed: 2, ..Default::default() };
        let samples = sample_pinned(&cfg).unwrap();
        assert!(bridge_chi_square(&samples, &cfg).unwrap().pass);
        // variance 0.25 * 1.1^2 instead of 0.25
        let wide: Vec<f64> = samples.iter().map(|v| 1.1 * v).collect();
        assert!(!bridge_chi_square(&wide, &cfg).unwrap().pass);
    }
}
