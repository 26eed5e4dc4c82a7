//! Experiment configs, the runner and its artifact manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acceptance::convergence_errors;
use crate::analytic::ExampleOracle;
use crate::error::{Error, Result};
use crate::grid::{build_grid, ProblemSpec, ScalarField, SpaceTimeGrid};
use crate::hjb::{
    classical_value, solve_obstacle, value_from_eta, EtaSolution, Orientation, SolverConfig, ValueSolution,
};
use crate::io;
use crate::schrodinger::{
    bernstein_density, kernel_matrix_for_grid, propagate_eta_star_with_gradient, propagate_eta_with_gradient,
    sinkhorn_solve, slice_masses, write_factors, MarginalPair, SinkhornConfig,
};
use crate::simulate::{bridge_markov_test, reversed_drift, simulate, BridgeTestConfig, SimConfig};
use crate::stopping::{empirical_survival, martingale_check, threshold_sweep, write_sweep_csv};

/// Environment variable that overrides the configured output directory.
pub const OUT_DIR_ENV: &str = "BERNSTEIN_OUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    /// Forward stopping problem of the worked example against its closed form.
    #[serde(rename = "sec7-forward")]
    ForwardExample,
    #[serde(rename = "sec7-backward")]
    BackwardExample,
    #[serde(rename = "sec7-classical-compare")]
    ClassicalCompare,
    Schrodinger,
    StoppingDist,
    BridgeTest,
    ConvergenceStudy,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        Self::ForwardExample,
        Self::BackwardExample,
        Self::ClassicalCompare,
        Self::Schrodinger,
        Self::StoppingDist,
        Self::BridgeTest,
        Self::ConvergenceStudy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::ForwardExample => "sec7-forward",
            Self::BackwardExample => "sec7-backward",
            Self::ClassicalCompare => "sec7-classical-compare",
            Self::Schrodinger => "schrodinger",
            Self::StoppingDist => "stopping-dist",
            Self::BridgeTest => "bridge-test",
            Self::ConvergenceStudy => "convergence-study",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
            Error::Config(format!("unknown experiment `{s}`, expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSize {
    pub nx: usize,
    pub nt: usize,
}

impl Default for GridSize {
    fn default() -> Self {
        Self { nx: 601, nt: 2001 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MarginalSource {
    /// `(mean, std)` of the initial and final Gaussians.
    Gaussian { init: (f64, f64), r#final: (f64, f64) },
    /// Two-column `x,density` tables, linearly interpolated onto the grid.
    Csv { init: PathBuf, r#final: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchrodingerExperiment {
    pub hbar: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub t_start: f64,
    pub t_end: f64,
    pub grid: GridSize,
    pub marginals: MarginalSource,
    pub sinkhorn: SinkhornConfig,
    /// Window for the drift-reversal check; defaults to the middle two
    /// thirds of the domain.
    pub check_window: Option<(f64, f64)>,
}

impl Default for SchrodingerExperiment {
    fn default() -> Self {
        Self {
            hbar: 1.0,
            x_min: -6.0,
            x_max: 6.0,
            t_start: -0.5,
            t_end: 0.5,
            grid: GridSize { nx: 201, nt: 101 },
            marginals: MarginalSource::Gaussian {
                init: (-1.0, 0.6),
                r#final: (1.0, 0.8),
            },
            sinkhorn: SinkhornConfig {
                tol: 1e-8,
                max_iter: 500,
            },
            check_window: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoppingExperiment {
    pub orientation: Orientation,
    pub thresholds: Vec<f64>,
    /// Start time; defaults to the start of the horizon in the direction of
    /// motion.
    pub t0: Option<f64>,
    pub start_points: Vec<f64>,
    pub dt: f64,
    pub n_paths: usize,
    /// Checkpoints of the martingale check, run from the first start point;
    /// each threshold uses those between `t0` and itself.
    pub checkpoints: Vec<f64>,
}

impl Default for StoppingExperiment {
    fn default() -> Self {
        Self {
            orientation: Orientation::Forward,
            thresholds: vec![-0.25, 0.0, 0.25],
            t0: None,
            start_points: vec![1.0, -1.5, -0.5, 0.5, 2.0],
            dt: 1e-3,
            n_paths: 20_000,
            checkpoints: vec![-0.4, -0.3, -0.2, -0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceExperiment {
    pub levels: Vec<GridSize>,
    pub min_order: f64,
}

impl Default for ConvergenceExperiment {
    fn default() -> Self {
        Self {
            levels: crate::acceptance::CONVERGENCE_LEVELS
                .iter()
                .map(|&(nx, nt)| GridSize { nx, nt })
                .collect(),
            min_order: 1.0,
        }
    }
}

fn default_spec() -> ProblemSpec {
    ProblemSpec::worked_example(1.0, 1.0)
}

fn default_seed() -> u64 {
    42
}

/// One experiment. Sub-configs other than `spec`, `grid` and `solver` must
/// be present (possibly as `{}`) for the experiments that use them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default = "default_spec")]
    pub spec: ProblemSpec,
    #[serde(default)]
    pub grid: GridSize,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schrodinger: Option<SchrodingerExperiment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stopping: Option<StoppingExperiment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bridge: Option<BridgeTestConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convergence: Option<ConvergenceExperiment>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Master seed. Replaces the seed of the `bridge` section and seeds the
    /// stopping-distribution ensembles as `seed + j` for start point `j`.
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl ExperimentConfig {
    /// A complete config for `kind` with every default spelled out.
    pub fn template(kind: ExperimentKind) -> Self {
        let mut cfg = Self {
            experiment: kind,
            spec: default_spec(),
            grid: GridSize::default(),
            solver: SolverConfig::default(),
            schrodinger: None,
            stopping: None,
            bridge: None,
            convergence: None,
            output_dir: None,
            seed: default_seed(),
        };
        match kind {
            ExperimentKind::Schrodinger => cfg.schrodinger = Some(SchrodingerExperiment::default()),
            ExperimentKind::StoppingDist => {
                cfg.grid = GridSize { nx: 601, nt: 1001 };
                cfg.stopping = Some(StoppingExperiment::default());
            }
            ExperimentKind::BridgeTest => cfg.bridge = Some(BridgeTestConfig::default()),
            ExperimentKind::ConvergenceStudy => cfg.convergence = Some(ConvergenceExperiment::default()),
            _ => {}
        }
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.solver.validate()?;
        let need = |present: bool, key: &str| {
            if present {
                Ok(())
            } else {
                Err(Error::Config(format!("experiment `{}` needs a `{key}` section", self.experiment)))
            }
        };
        match self.experiment {
            ExperimentKind::Schrodinger => need(self.schrodinger.is_some(), "schrodinger"),
            ExperimentKind::StoppingDist => need(self.stopping.is_some(), "stopping"),
            ExperimentKind::BridgeTest => need(self.bridge.is_some(), "bridge"),
            ExperimentKind::ConvergenceStudy => need(self.convergence.is_some(), "convergence"),
            _ => Ok(()),
        }
    }

    /// SHA-256 of the canonical JSON with the output directory removed.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = None;
        Ok(io::sha256_bytes(&serde_json::to_vec(&c)?))
    }

    fn is_worked_example(&self) -> bool {
        let s = &self.spec;
        let reference = ProblemSpec::worked_example(s.hbar, s.horizon());
        s.potential == reference.potential
            && s.terminal_cost == reference.terminal_cost
            && s.initial_cost == reference.initial_cost
    }
}

/// Output directory: explicit argument, then the environment, then the
/// config, then `out`.
pub fn resolve_output_dir(cli: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(p) = cli {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Restriction {
    /// Keep nodes with `lo <= x <= hi`.
    pub x_window: Option<(f64, f64)>,
    /// Keep nodes with `|x| >= min_abs_x`.
    pub min_abs_x: Option<f64>,
}

impl Restriction {
    fn keeps(&self, x: f64) -> bool {
        let eps = 1e-9;
        self.x_window.is_none_or(|(lo, hi)| x >= lo - eps && x <= hi + eps)
            && self.min_abs_x.is_none_or(|m| x.abs() >= m - eps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Norms {
    pub inf: f64,
    /// `max |a - b| / max |b|`.
    pub relative_inf: f64,
    /// Largest nodewise `|a - b| / |b|` over nodes with `b != 0`.
    pub max_pointwise_relative: f64,
    /// `||a - b||_2 / max(||b||_2, 1)` with the grid cell measure.
    pub scaled_l2: f64,
    pub nodes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub full: Norms,
    pub restricted: Option<Norms>,
    pub restriction: Option<Restriction>,
}

fn norms(a: &ScalarField, b: &ScalarField, keep: impl Fn(f64) -> bool) -> Norms {
    let g = a.grid();
    let cell = g.dx() * g.dt();
    let (mut inf, mut bmax, mut rel, mut d2, mut b2, mut nodes) = (0.0f64, 0.0f64, 0.0f64, 0.0, 0.0, 0);
    for k in 0..g.nt() {
        for (i, &x) in g.xs().iter().enumerate() {
            if !keep(x) {
                continue;
            }
            let (va, vb) = (a.get(k, i), b.get(k, i));
            let d = (va - vb).abs();
            inf = inf.max(d);
            bmax = bmax.max(vb.abs());
            if vb != 0.0 {
                rel = rel.max(d / vb.abs());
            }
            d2 += d * d * cell;
            b2 += vb * vb * cell;
            nodes += 1;
        }
    }
    Norms {
        inf,
        relative_inf: if bmax > 0.0 { inf / bmax } else { inf },
        max_pointwise_relative: rel,
        scaled_l2: d2.sqrt() / b2.sqrt().max(1.0),
        nodes,
    }
}

/// Difference norms of `a` against the reference `b`.
pub fn compare_report(a: &ScalarField, b: &ScalarField, restriction: Option<Restriction>) -> Result<CompareReport> {
    a.check_same_grid(b)?;
    Ok(CompareReport {
        full: norms(a, b, |_| true),
        restricted: restriction.map(|r| norms(a, b, |x| r.keeps(x))),
        restriction,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl Check {
    fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            pass: value <= threshold,
        }
    }

    fn at_least(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            pass: value >= threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub package: String,
    pub version: String,
    pub experiment: ExperimentKind,
    pub config: ExperimentConfig,
    pub config_sha256: String,
    pub seed: u64,
    pub files: Vec<FileEntry>,
    pub checks: Vec<Check>,
    pub all_passed: bool,
    /// Wall-clock seconds per stage; not part of any hashed artifact.
    pub timings: BTreeMap<String, f64>,
}

struct Run {
    dir: PathBuf,
    files: Vec<String>,
    checks: Vec<Check>,
    timings: BTreeMap<String, f64>,
}

impl Run {
    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn timed<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = f()?;
        self.timings.insert(stage.to_string(), t0.elapsed().as_secs_f64());
        Ok(out)
    }
}

/// Runs the experiment, writing artifacts and `manifest.json` into
/// `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", out_dir.display())))?;
    let mut run = Run {
        dir: out_dir.to_path_buf(),
        files: Vec::new(),
        checks: Vec::new(),
        timings: BTreeMap::new(),
    };
    let mut canonical = cfg.clone();
    canonical.output_dir = None;
    io::write_json(&run.path("config.json"), &canonical)?;
    match cfg.experiment {
        ExperimentKind::ForwardExample => run_worked_example(cfg, &mut run, Orientation::Forward)?,
        ExperimentKind::BackwardExample => run_worked_example(cfg, &mut run, Orientation::Backward)?,
        ExperimentKind::ClassicalCompare => run_classical(cfg, &mut run)?,
        ExperimentKind::Schrodinger => run_schrodinger(cfg, &mut run)?,
        ExperimentKind::StoppingDist => run_stopping(cfg, &mut run)?,
        ExperimentKind::BridgeTest => run_bridge(cfg, &mut run)?,
        ExperimentKind::ConvergenceStudy => run_convergence(cfg, &mut run)?,
    }
    let files = run
        .files
        .iter()
        .map(|name| {
            let p = out_dir.join(name);
            Ok(FileEntry {
                path: name.clone(),
                sha256: io::sha256_file(&p)?,
                bytes: std::fs::metadata(&p)?.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let all_passed = run.checks.iter().all(|c| c.pass);
    let manifest = Manifest {
        package: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        experiment: cfg.experiment,
        config: cfg.clone(),
        config_sha256: cfg.hash()?,
        seed: cfg.seed,
        files,
        checks: run.checks,
        all_passed,
        timings: run.timings,
    };
    io::write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

fn grid_for(spec: &ProblemSpec, size: GridSize) -> Result<Arc<SpaceTimeGrid>> {
    Ok(Arc::new(build_grid(spec, size.nx, size.nt)?))
}

fn solve_value(
    spec: &ProblemSpec,
    grid: &Arc<SpaceTimeGrid>,
    solver: &SolverConfig,
    orientation: Orientation,
) -> Result<(EtaSolution, ValueSolution)> {
    let eta = solve_obstacle(spec, grid, solver, orientation)?;
    let value = value_from_eta(&eta, spec.hbar)?;
    Ok((eta, value))
}

/// Oracle table on the grid, evaluated in parallel by row.
fn oracle_field(grid: &Arc<SpaceTimeGrid>, f: impl Fn(f64, f64) -> Result<f64> + Sync) -> Result<ScalarField> {
    let rows = (0..grid.nt())
        .into_par_iter()
        .map(|k| grid.xs().iter().map(|&x| f(grid.ts()[k], x)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    ScalarField::new(grid.clone(), rows.concat())
}

fn write_free_boundary(path: &Path, sol: &EtaSolution) -> Result<()> {
    let g = sol.eta.grid();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "x"])?;
    for (k, &t) in g.ts().iter().enumerate() {
        for x in &sol.boundary[k] {
            w.write_record([format!("{t:?}"), format!("{x:?}")])?;
        }
    }
    w.flush()?;
    Ok(())
}

const ORACLE_WINDOW: Restriction = Restriction {
    x_window: Some((-2.5, 2.5)),
    min_abs_x: Some(0.1),
};

fn run_worked_example(cfg: &ExperimentConfig, run: &mut Run, orientation: Orientation) -> Result<()> {
    let spec = &cfg.spec;
    let grid = grid_for(spec, cfg.grid)?;
    let (eta, value) = run.timed("solve", || solve_value(spec, &grid, &cfg.solver, orientation))?;
    io::write_fields_csv(&run.path("eta.csv"), &[("eta", &eta.eta), ("obstacle", &eta.obstacle)])?;
    io::write_fields_csv(&run.path("value.csv"), &[("value", &value.value), ("drift", &value.drift)])?;
    io::write_mask_csv(&run.path("mask.csv"), &eta.mask)?;
    write_free_boundary(&run.path("free_boundary.csv"), &eta)?;
    let summary = eta.summary(spec)?;
    io::write_json(&run.path("solve_summary.json"), &summary)?;
    run.checks.push(Check::at_most(
        "lcp_residual",
        summary.lcp_residual,
        10.0 * cfg.solver.psor_tol,
    ));
    if cfg.is_worked_example() {
        let oracle = ExampleOracle::fast(spec.hbar, spec.horizon());
        let exact = run.timed("oracle", || match orientation {
            Orientation::Forward => oracle_field(&grid, |t, x| oracle.value(t, x)),
            Orientation::Backward => oracle_field(&grid, |t, x| oracle.value_star(t, x)),
        })?;
        let report = compare_report(&value.value, &exact, Some(ORACLE_WINDOW))?;
        io::write_json(&run.path("oracle_comparison.json"), &report)?;
        let rel = report.restricted.map_or(f64::NAN, |n| n.max_pointwise_relative);
        run.checks.push(Check::at_most("oracle_relative_error", rel, 1e-2));
    }
    Ok(())
}

#[derive(Serialize)]
struct ClassicalReport {
    max_value_minus_classical: f64,
    probe: (f64, f64),
    value_at_probe: f64,
    classical_at_probe: f64,
    comparison: CompareReport,
}

fn run_classical(cfg: &ExperimentConfig, run: &mut Run) -> Result<()> {
    let spec = &cfg.spec;
    let grid = grid_for(spec, cfg.grid)?;
    let (_, value) = run.timed("solve", || solve_value(spec, &grid, &cfg.solver, Orientation::Forward))?;
    let classical = run.timed("classical", || classical_value(spec, &grid, Orientation::Forward, &cfg.solver))?;
    io::write_fields_csv(
        &run.path("classical.csv"),
        &[
            ("value", &value.value),
            ("classical_value", &classical.value),
            ("drift", &value.drift),
            ("classical_drift", &classical.drift),
        ],
    )?;
    let gap = value
        .value
        .values()
        .iter()
        .zip(classical.value.values())
        .map(|(u, h)| u - h)
        .fold(f64::NEG_INFINITY, f64::max);
    let probe = (0.0f64.clamp(grid.t_min(), grid.t_max()), 1.0f64.clamp(grid.x_min(), grid.x_max()));
    let (k, i) = (grid.nearest_t(probe.0), grid.nearest_x(probe.1));
    let report = ClassicalReport {
        max_value_minus_classical: gap,
        probe: (grid.ts()[k], grid.xs()[i]),
        value_at_probe: value.value.get(k, i),
        classical_at_probe: classical.value.get(k, i),
        comparison: compare_report(&value.value, &classical.value, None)?,
    };
    io::write_json(&run.path("classical_report.json"), &report)?;
    run.checks.push(Check::at_most("max_value_minus_classical", gap, 1e-6));
    run.checks.push(Check::at_least(
        "classical_minus_value_at_probe",
        report.classical_at_probe - report.value_at_probe,
        1e-6,
    ));
    Ok(())
}

fn run_schrodinger(cfg: &ExperimentConfig, run: &mut Run) -> Result<()> {
    let sc = cfg.schrodinger.as_ref().expect("validated");
    let grid = Arc::new(SpaceTimeGrid::new(
        sc.x_min, sc.x_max, sc.t_start, sc.t_end, sc.grid.nx, sc.grid.nt,
    )?);
    let marginals = match &sc.marginals {
        MarginalSource::Gaussian { init, r#final } => MarginalPair::gaussian(grid.xs(), *init, *r#final)?,
        MarginalSource::Csv { init, r#final } => MarginalPair::from_csv(init, r#final, grid.xs())?,
    };
    let k = kernel_matrix_for_grid(&grid, sc.hbar)?;
    let factors = run.timed("sinkhorn", || sinkhorn_solve(&marginals, &k, &sc.sinkhorn))?;
    write_factors(
        &run.path("factors.csv"),
        &run.path("factors.json"),
        &marginals,
        &factors,
        &sc.sinkhorn,
    )?;
    let (eta, eta_star) = run.timed("propagate", || {
        Ok((
            propagate_eta_with_gradient(&factors, &grid, sc.hbar)?,
            propagate_eta_star_with_gradient(&factors, &grid, sc.hbar)?,
        ))
    })?;
    let rho = bernstein_density(&eta.value, &eta_star.value)?;
    let drift = eta.log_gradient.map(|v| sc.hbar * v)?;
    let drift_star = eta_star.log_gradient.map(|v| -sc.hbar * v)?;
    io::write_fields_csv(
        &run.path("density.csv"),
        &[
            ("eta", &eta.value),
            ("eta_star", &eta_star.value),
            ("rho", &rho),
            ("drift", &drift),
            ("drift_star", &drift_star),
        ],
    )?;
    let masses = slice_masses(&rho);
    io::write_columns_csv(&run.path("masses.csv"), &["t", "mass"], &[grid.ts(), &masses])?;
    let reversed = reversed_drift(&drift, &rho, sc.hbar)?;
    let width = sc.x_max - sc.x_min;
    let window = sc
        .check_window
        .unwrap_or((sc.x_min + width / 6.0, sc.x_max - width / 6.0));
    let report = compare_report(
        &reversed.drift,
        &drift_star,
        Some(Restriction {
            x_window: Some(window),
            min_abs_x: None,
        }),
    )?;
    io::write_json(&run.path("drift_reversal.json"), &report)?;
    run.checks.push(Check::at_most(
        "marginal_residual",
        factors.final_marginal_error,
        sc.sinkhorn.tol,
    ));
    let mass_err = masses.iter().map(|m| (m - 1.0).abs()).fold(0.0, f64::max);
    run.checks.push(Check::at_most("mass_error", mass_err, 1e-6));
    let rev = report.restricted.map_or(f64::NAN, |n| n.relative_inf);
    run.checks.push(Check::at_most("drift_reversal", rev, 1e-3));
    Ok(())
}

#[derive(Serialize)]
struct SurvivalRow {
    t0: f64,
    x0: f64,
    q_pde: f64,
    mc_mean: f64,
    mc_stderr: f64,
    z: f64,
}

fn run_stopping(cfg: &ExperimentConfig, run: &mut Run) -> Result<()> {
    let st = cfg.stopping.as_ref().expect("validated");
    let spec = &cfg.spec;
    let grid = grid_for(spec, cfg.grid)?;
    let (_, value) = run.timed("solve", || solve_value(spec, &grid, &cfg.solver, st.orientation))?;
    let sols = run.timed("survival", || {
        threshold_sweep(&value.drift, &value.mask, spec.hbar, st.orientation, &st.thresholds)
    })?;
    write_sweep_csv(&run.path("survival_pde.csv"), &sols)?;
    let t0 = st.t0.unwrap_or(match st.orientation {
        Orientation::Forward => spec.t_start(),
        Orientation::Backward => spec.t_end(),
    });
    let mut rows = Vec::new();
    let mut martingale = Vec::new();
    for (j, &x0) in st.start_points.iter().enumerate() {
        let mut sim = SimConfig::new(st.dt, st.n_paths, cfg.seed.wrapping_add(j as u64), (t0, x0), st.orientation);
        if j == 0 {
            sim.checkpoints = st.checkpoints.clone();
        }
        let ens = simulate(spec, &value.drift, &value.mask, &sim)?;
        for sol in &sols {
            let e = empirical_survival(&ens, sol.threshold);
            let q = sol.value(t0, x0)?;
            rows.push(SurvivalRow {
                t0,
                x0,
                q_pde: q,
                mc_mean: e.mean,
                mc_stderr: e.stderr,
                z: if e.stderr > 0.0 { (e.mean - q) / e.stderr } else { 0.0 },
            });
            let ok = if e.stderr > 0.0 { e.within(q, 3.0) } else { (e.mean - q).abs() <= 1e-2 };
            run.checks.push(Check {
                name: format!("survival x0={x0} threshold={}", sol.threshold),
                value: (e.mean - q).abs(),
                threshold: 3.0 * e.stderr,
                pass: ok,
            });
        }
        if j == 0 && !st.checkpoints.is_empty() {
            for sol in &sols {
                let usable: Vec<f64> = st
                    .checkpoints
                    .iter()
                    .copied()
                    .filter(|&c| match st.orientation {
                        Orientation::Forward => c >= t0 && c <= sol.threshold,
                        Orientation::Backward => c <= t0 && c >= sol.threshold,
                    })
                    .collect();
                if usable.is_empty() {
                    continue;
                }
                let rep = martingale_check(sol, &ens, &usable)?;
                run.checks.push(Check {
                    name: format!("martingale threshold={}", sol.threshold),
                    value: rep.rows.iter().map(|r| (r.difference / r.stderr.max(1e-300)).abs()).fold(0.0, f64::max),
                    threshold: 3.0,
                    pass: rep.pass,
                });
                martingale.push((sol.threshold, rep));
            }
        }
        if j == 0 {
            io::write_records_csv(&run.path("stop_records.csv"), &ens.records)?;
        }
    }
    io::write_records_csv(&run.path("survival_mc.csv"), &rows)?;
    io::write_json(&run.path("martingale.json"), &martingale)?;
    Ok(())
}

#[derive(Serialize)]
struct BinRow {
    lo: f64,
    hi: f64,
    observed: u64,
    expected: f64,
}

fn run_bridge(cfg: &ExperimentConfig, run: &mut Run) -> Result<()> {
    let bc = BridgeTestConfig {
        seed: cfg.seed,
        ..*cfg.bridge.as_ref().expect("validated")
    };
    let report = run.timed("bridge", || bridge_markov_test(&bc))?;
    let bins: Vec<BinRow> = report
        .bin_edges
        .windows(2)
        .zip(report.observed.iter().zip(&report.expected))
        .map(|(e, (&o, &x))| BinRow {
            lo: e[0],
            hi: e[1],
            observed: o,
            expected: x,
        })
        .collect();
    io::write_records_csv(&run.path("bridge_histogram.csv"), &bins)?;
    io::write_json(&run.path("bridge_report.json"), &report)?;
    run.checks.push(Check::at_least("bridge_p_value", report.p_value, bc.significance));
    Ok(())
}

#[derive(Serialize)]
struct ConvergenceRow {
    nx: usize,
    nt: usize,
    dx: f64,
    dt: f64,
    error: f64,
    order: Option<f64>,
}

fn run_convergence(cfg: &ExperimentConfig, run: &mut Run) -> Result<()> {
    let cc = cfg.convergence.as_ref().expect("validated");
    if cc.levels.len() < 2 {
        return Err(Error::Config("convergence needs at least two levels".into()));
    }
    let levels: Vec<_> = cc.levels.iter().map(|g| (g.nx, g.nt)).collect();
    let errors = run.timed("levels", || convergence_errors(&levels))?;
    let spec = ProblemSpec::worked_example(1.0, 1.0);
    let mut rows = Vec::new();
    let mut min_order = f64::INFINITY;
    for (j, (&(nx, nt), &error)) in levels.iter().zip(&errors).enumerate() {
        let g = build_grid(&spec, nx, nt)?;
        let order = (j > 0).then(|| (errors[j - 1] / error).ln() / (cfg_ratio(&levels, j)).ln());
        if let Some(o) = order {
            min_order = min_order.min(o);
        }
        rows.push(ConvergenceRow {
            nx,
            nt,
            dx: g.dx(),
            dt: g.dt(),
            error,
            order,
        });
    }
    io::write_records_csv(&run.path("convergence.csv"), &rows)?;
    run.checks.push(Check::at_least("min_order", min_order, cc.min_order));
    Ok(())
}

/// Refinement ratio of `dx` between levels `j - 1` and `j`.
fn cfg_ratio(levels: &[(usize, usize)], j: usize) -> f64 {
    (levels[j].0 - 1) as f64 / (levels[j - 1].0 - 1) as f64
}
