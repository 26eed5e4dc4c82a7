//! Schrödinger system: boundary factors by Sinkhorn iteration, their heat
//! propagation across the horizon and the product density `rho = eta eta*`.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::{log_heat_kernel, KernelParams};
use crate::error::{Error, Result};
use crate::grid::{ScalarField, SpaceTimeGrid};
use crate::io;

/// Trapezoid rule on nodes `xs`.
pub fn trapezoid(xs: &[f64], f: &[f64]) -> f64 {
    xs.windows(2)
        .zip(f.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}

/// Endpoint densities on a common uniform grid, each normalised to unit
/// mass under the node-weight rule `dx * sum(p)`. That is the quadrature the
/// kernel matrix uses, so the discrete system is solvable exactly; it
/// differs from the trapezoid mass only by the two edge values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalPair {
    pub xs: Vec<f64>,
    pub p_init: Vec<f64>,
    pub p_final: Vec<f64>,
    /// Masses before renormalisation: what the truncation kept.
    pub raw_mass_init: f64,
    pub raw_mass_final: f64,
}

impl MarginalPair {
    pub fn new(xs: Vec<f64>, p_init: Vec<f64>, p_final: Vec<f64>) -> Result<Self> {
        if xs.len() != p_init.len() || xs.len() != p_final.len() || xs.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "marginals have lengths {}, {} on {} nodes",
                p_init.len(),
                p_final.len(),
                xs.len()
            )));
        }
        if xs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("marginal nodes must increase".into()));
        }
        let w = node_weight(&xs);
        if xs
            .windows(2)
            .any(|p| ((p[1] - p[0]) - w).abs() > 1e-9 * w)
        {
            return Err(Error::InvalidArgument("marginal nodes must be uniformly spaced".into()));
        }
        for (name, p) in [("p_init", &p_init), ("p_final", &p_final)] {
            if let Some(v) = p.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(Error::InvalidArgument(format!("{name} has entry {v}")));
            }
        }
        let mass = |p: &[f64]| w * p.iter().sum::<f64>();
        let (mi, mf) = (mass(&p_init), mass(&p_final));
        if !(mi > 0.0 && mf > 0.0) {
            return Err(Error::InvalidArgument("marginals must have positive mass".into()));
        }
        Ok(Self {
            p_init: p_init.iter().map(|v| v / mi).collect(),
            p_final: p_final.iter().map(|v| v / mf).collect(),
            xs,
            raw_mass_init: mi,
            raw_mass_final: mf,
        })
    }

    /// Gaussian densities `N(m0, s0^2)` and `N(m1, s1^2)` sampled on `xs`.
    pub fn gaussian(xs: &[f64], init: (f64, f64), fin: (f64, f64)) -> Result<Self> {
        let g = |(m, s): (f64, f64)| -> Vec<f64> {
            xs.iter()
                .map(|&x| (-(x - m) * (x - m) / (2.0 * s * s)).exp() / (2.0 * std::f64::consts::PI * s * s).sqrt())
                .collect()
        };
        if !(init.1 > 0.0 && fin.1 > 0.0) {
            return Err(Error::InvalidArgument("Gaussian widths must be > 0".into()));
        }
        Self::new(xs.to_vec(), g(init), g(fin))
    }

    /// Reads two `(x, density)` CSV files and interpolates them linearly onto
    /// `xs` (zero outside the tabulated range).
    pub fn from_csv(init: &Path, fin: &Path, xs: &[f64]) -> Result<Self> {
        let load = |p: &Path| -> Result<Vec<f64>> {
            let (tx, ty) = io::read_two_column_csv(p)?;
            if tx.len() < 2 || tx.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::Config(format!(
                    "{}: need at least two rows with increasing x",
                    p.display()
                )));
            }
            Ok(xs.iter().map(|&x| interp_linear(&tx, &ty, x)).collect())
        };
        Self::new(xs.to_vec(), load(init)?, load(fin)?)
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.p_init.iter().chain(&self.p_final).all(|&v| v > 0.0)
    }
}

fn node_weight(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        1.0
    } else {
        (xs[xs.len() - 1] - xs[0]) / (xs.len() - 1) as f64
    }
}

fn interp_linear(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x < xs[0] || x > xs[xs.len() - 1] {
        return 0.0;
    }
    let j = xs.partition_point(|&v| v <= x).clamp(1, xs.len() - 1);
    let w = (x - xs[j - 1]) / (xs[j] - xs[j - 1]);
    ys[j - 1] + w * (ys[j] - ys[j - 1])
}

/// Dense kernel `K[i][j] = h(s, x_i, t, x_j) * w`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    n: usize,
    data: Vec<f64>,
}

impl KernelMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    /// `K v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.data
            .chunks(self.n)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `K^T v`, accumulated row by row in a fixed order.
    pub fn apply_transpose(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (row, &vi) in self.data.chunks(self.n).zip(v) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * vi;
            }
        }
        out
    }
}

/// Heat kernel between times `s < t` on nodes `xs`, with the quadrature
/// weight `weight` (normally `dx`) absorbed.
pub fn kernel_matrix(xs: &[f64], weight: f64, hbar: f64, s: f64, t: f64) -> Result<KernelMatrix> {
    let p = KernelParams::new(hbar)?;
    if !(t > s) {
        return Err(Error::InvalidArgument(format!("kernel needs t > s, got s={s}, t={t}")));
    }
    let n = xs.len();
    let mut data = Vec::with_capacity(n * n);
    for &x in xs {
        for &y in xs {
            data.push(log_heat_kernel(s, x, t, y, &p)?.exp() * weight);
        }
    }
    if data.iter().any(|&k| !(k > 0.0)) {
        return Err(Error::Numerical(
            "kernel entries underflow to zero; the domain is too wide for hbar (t - s)".into(),
        ));
    }
    Ok(KernelMatrix { n, data })
}

/// Kernel over the full horizon of `grid`.
pub fn kernel_matrix_for_grid(grid: &SpaceTimeGrid, hbar: f64) -> Result<KernelMatrix> {
    kernel_matrix(grid.xs(), grid.dx(), hbar, grid.t_min(), grid.t_max())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 500,
        }
    }
}

/// Boundary factors `eta*` at the initial and `eta` at the final time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchrodingerFactors {
    pub xs: Vec<f64>,
    pub eta_star_init: Vec<f64>,
    pub eta_final: Vec<f64>,
    pub iterations: usize,
    pub final_marginal_error: f64,
    pub residual_trace: Vec<f64>,
    /// False if the residual ever increased after the first sweep.
    pub monotone: bool,
    /// Node where `eta*` is normalised to 1.
    pub gauge_index: usize,
}

impl SchrodingerFactors {
    /// Applies the gauge `(c eta*, eta / c)`.
    pub fn rescaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.eta_star_init.iter_mut().for_each(|v| *v *= c);
        out.eta_final.iter_mut().for_each(|v| *v /= c);
        out
    }
}

fn marginal_residual(m: &MarginalPair, k: &KernelMatrix, es: &[f64], e: &[f64]) -> f64 {
    let ke = k.apply(e);
    let kts = k.apply_transpose(es);
    let r0 = es.iter().zip(&ke).zip(&m.p_init).map(|((a, b), p)| (a * b - p).abs());
    let r1 = e.iter().zip(&kts).zip(&m.p_final).map(|((a, b), p)| (a * b - p).abs());
    r0.chain(r1).fold(0.0, f64::max)
}

/// Alternating exact updates `eta* <- p_init / (K eta)`,
/// `eta <- p_final / (K^T eta*)` until both marginals are reproduced within
/// `cfg.tol` (inf-norm). The gauge is fixed by `eta*(x_mid) = 1`.
pub fn sinkhorn_solve(m: &MarginalPair, k: &KernelMatrix, cfg: &SinkhornConfig) -> Result<SchrodingerFactors> {
    let n = m.xs.len();
    if k.n() != n {
        return Err(Error::GridMismatch(format!("kernel is {}x{}, marginals have {n} nodes", k.n(), k.n())));
    }
    if !m.is_strictly_positive() {
        return Err(Error::InvalidArgument("marginals must be strictly positive".into()));
    }
    let positive = |v: &[f64], what: &str| -> Result<()> {
        match v.iter().position(|x| !(x.is_finite() && *x > 0.0)) {
            Some(i) => Err(Error::Numerical(format!("{what} = {} at x = {}", v[i], m.xs[i]))),
            None => Ok(()),
        }
    };
    let mut eta = vec![1.0; n];
    let mut eta_star = vec![1.0; n];
    let mut trace = Vec::new();
    let mut monotone = true;
    for it in 1..=cfg.max_iter {
        let ke = k.apply(&eta);
        for i in 0..n {
            eta_star[i] = m.p_init[i] / ke[i];
        }
        positive(&eta_star, "eta*")?;
        let kts = k.apply_transpose(&eta_star);
        for j in 0..n {
            eta[j] = m.p_final[j] / kts[j];
        }
        positive(&eta, "eta")?;
        let res = marginal_residual(m, k, &eta_star, &eta);
        if let Some(&last) = trace.last() {
            if it > 2 && res > last * (1.0 + 1e-9) + 1e-15 {
                monotone = false;
            }
        }
        trace.push(res);
        if res <= cfg.tol {
            let mid = n / 2;
            let c = eta_star[mid];
            let f = SchrodingerFactors {
                xs: m.xs.clone(),
                eta_star_init: eta_star,
                eta_final: eta,
                iterations: it,
                final_marginal_error: res,
                residual_trace: trace,
                monotone,
                gauge_index: mid,
            };
            let mut f = f.rescaled(1.0 / c);
            f.final_marginal_error = marginal_residual(m, k, &f.eta_star_init, &f.eta_final);
            return Ok(f);
        }
    }
    Err(Error::NonConvergence {
        solver: "Sinkhorn",
        iterations: cfg.max_iter,
        residual: *trace.last().unwrap_or(&f64::NAN),
        trace,
    })
}

/// A propagated factor and its spatial log-derivative, both computed from
/// the kernel sums.
#[derive(Debug, Clone)]
pub struct Propagated {
    pub value: ScalarField,
    pub log_gradient: ScalarField,
}

fn check_factor_grid(f: &SchrodingerFactors, grid: &SpaceTimeGrid) -> Result<()> {
    let same = f.xs.len() == grid.nx()
        && f.xs.iter().zip(grid.xs()).all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + a.abs()));
    if same {
        Ok(())
    } else {
        Err(Error::GridMismatch("factors were solved on different nodes".into()))
    }
}

/// `sum_j w h(t_a, x_a, t_b, y_j) f_j` in log domain, plus the weighted mean
/// of `y_j - x`.
fn log_kernel_sum(x: f64, ys: &[f64], log_wf: &[f64], var: f64) -> (f64, f64) {
    let mut terms = Vec::with_capacity(ys.len());
    let mut top = f64::NEG_INFINITY;
    for (&y, &l) in ys.iter().zip(log_wf) {
        let d = y - x;
        let v = l - d * d / (2.0 * var);
        top = top.max(v);
        terms.push(v);
    }
    let (mut s, mut sd) = (0.0, 0.0);
    for (&y, &v) in ys.iter().zip(&terms) {
        let e = (v - top).exp();
        s += e;
        sd += e * (y - x);
    }
    let log_norm = -0.5 * (2.0 * std::f64::consts::PI * var).ln();
    (top + s.ln() + log_norm, sd / s)
}

fn propagate(
    grid: &Arc<SpaceTimeGrid>,
    hbar: f64,
    factor: &[f64],
    boundary_row: usize,
) -> Result<Propagated> {
    let (nx, nt) = (grid.nx(), grid.nt());
    let xs = grid.xs();
    let tb = grid.ts()[boundary_row];
    let log_wf: Vec<f64> = factor.iter().map(|&f| (f * grid.dx()).ln()).collect();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..nt)
        .into_par_iter()
        .map(|k| {
            if k == boundary_row {
                let mut lg = vec![0.0; nx];
                let logs: Vec<f64> = factor.iter().map(|v| v.ln()).collect();
                crate::grid::gradient_row(&logs, grid.dx(), &mut lg);
                return (factor.to_vec(), lg);
            }
            let var = hbar * (tb - grid.ts()[k]).abs();
            let mut val = Vec::with_capacity(nx);
            let mut lg = Vec::with_capacity(nx);
            for &x in xs {
                let (l, mean_dy) = log_kernel_sum(x, xs, &log_wf, var);
                val.push(l.exp());
                lg.push(mean_dy / var);
            }
            (val, lg)
        })
        .collect();
    let mut value = Vec::with_capacity(nx * nt);
    let mut log_gradient = Vec::with_capacity(nx * nt);
    for (v, g) in rows {
        value.extend(v);
        log_gradient.extend(g);
    }
    Ok(Propagated {
        value: ScalarField::new(grid.clone(), value)?,
        log_gradient: ScalarField::new(grid.clone(), log_gradient)?,
    })
}

/// `eta(t, x) = int h(t, x, T/2, z) eta_final(z) dz`, with `d/dx ln eta`.
pub fn propagate_eta_with_gradient(f: &SchrodingerFactors, grid: &Arc<SpaceTimeGrid>, hbar: f64) -> Result<Propagated> {
    check_factor_grid(f, grid)?;
    propagate(grid, hbar, &f.eta_final, grid.nt() - 1)
}

/// `eta*(t, x) = int eta*_init(y) h(-T/2, y, t, x) dy`, with `d/dx ln eta*`.
pub fn propagate_eta_star_with_gradient(
    f: &SchrodingerFactors,
    grid: &Arc<SpaceTimeGrid>,
    hbar: f64,
) -> Result<Propagated> {
    check_factor_grid(f, grid)?;
    propagate(grid, hbar, &f.eta_star_init, 0)
}

pub fn propagate_eta(f: &SchrodingerFactors, grid: &Arc<SpaceTimeGrid>, hbar: f64) -> Result<ScalarField> {
    Ok(propagate_eta_with_gradient(f, grid, hbar)?.value)
}

pub fn propagate_eta_star(f: &SchrodingerFactors, grid: &Arc<SpaceTimeGrid>, hbar: f64) -> Result<ScalarField> {
    Ok(propagate_eta_star_with_gradient(f, grid, hbar)?.value)
}

/// `rho = eta eta*` nodewise.
pub fn bernstein_density(eta: &ScalarField, eta_star: &ScalarField) -> Result<ScalarField> {
    eta.zip_map(eta_star, |a, b| a * b)
}

/// Trapezoid mass of every time slice.
pub fn slice_masses(rho: &ScalarField) -> Vec<f64> {
    let xs = rho.grid().xs();
    rho.rows().map(|r| trapezoid(xs, r)).collect()
}

/// Largest relative discrepancy of the heat equations satisfied by the
/// propagated factors, measured with centred differences at interior nodes
/// with `x` in `window`: `∂t eta + (hbar/2) ∂xx eta = 0` and
/// `∂t eta* - (hbar/2) ∂xx eta* = 0`. Each residual is divided by the
/// largest `|∂t|` term in the window. The window should keep clear of the
/// domain edges, where the truncated kernel sums do not solve the equation.
pub fn heat_residual(field: &ScalarField, hbar: f64, backward_heat: bool, window: (f64, f64)) -> f64 {
    let g = field.grid();
    let (dt, dx) = (g.dt(), g.dx());
    let sign = if backward_heat { 1.0 } else { -1.0 };
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for k in 1..g.nt() - 1 {
        for i in 1..g.nx() - 1 {
            let x = g.xs()[i];
            if x < window.0 || x > window.1 {
                continue;
            }
            let ut = (field.get(k + 1, i) - field.get(k - 1, i)) / (2.0 * dt);
            let uxx = (field.get(k, i + 1) - 2.0 * field.get(k, i) + field.get(k, i - 1)) / (dx * dx);
            worst = worst.max((ut + sign * 0.5 * hbar * uxx).abs());
            scale = scale.max(ut.abs());
        }
    }
    if scale > 0.0 {
        worst / scale
    } else {
        worst
    }
}

/// Metadata written next to the factor CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorsMetadata {
    pub tolerance: f64,
    pub iterations: usize,
    pub final_marginal_error: f64,
    pub monotone: bool,
    pub gauge: String,
    pub gauge_x: f64,
    pub raw_mass_init: f64,
    pub raw_mass_final: f64,
}

/// Writes `x, p_init, p_final, eta_star_init, eta_final` and a JSON sidecar.
pub fn write_factors(
    csv_path: &Path,
    json_path: &Path,
    m: &MarginalPair,
    f: &SchrodingerFactors,
    cfg: &SinkhornConfig,
) -> Result<()> {
    io::write_columns_csv(
        csv_path,
        &["x", "p_init", "p_final", "eta_star_init", "eta_final"],
        &[&f.xs, &m.p_init, &m.p_final, &f.eta_star_init, &f.eta_final],
    )?;
    io::write_json(
        json_path,
        &FactorsMetadata {
            tolerance: cfg.tol,
            iterations: f.iterations,
            final_marginal_error: f.final_marginal_error,
            monotone: f.monotone,
            gauge: "eta_star_init(x_mid) = 1".into(),
            gauge_x: f.xs[f.gauge_index],
            raw_mass_init: m.raw_mass_init,
            raw_mass_final: m.raw_mass_final,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn setup(nx: usize, nt: usize, init: (f64, f64), fin: (f64, f64)) -> (Arc<SpaceTimeGrid>, MarginalPair, SchrodingerFactors) {
        let grid = Arc::new(SpaceTimeGrid::new(-6.0, 6.0, -0.5, 0.5, nx, nt).unwrap());
        let m = MarginalPair::gaussian(grid.xs(), init, fin).unwrap();
        let k = kernel_matrix_for_grid(&grid, 1.0).unwrap();
        let f = sinkhorn_solve(&m, &k, &SinkhornConfig { tol: 1e-9, max_iter: 500 }).unwrap();
        (grid, m, f)
    }

    #[test]
    fn single_node_system() {
        let k = kernel_matrix(&[0.3], 0.5, 1.0, 0.0, 1.0).unwrap();
        let m = MarginalPair::new(vec![0.3], vec![1.0], vec![1.0]).unwrap();
        let f = sinkhorn_solve(&m, &k, &SinkhornConfig::default()).unwrap();
        assert_eq!(f.eta_star_init, vec![1.0]);
        assert_abs_diff_eq!(f.eta_final[0], 1.0 / k.get(0, 0), epsilon = 1e-14);
    }

    #[test]
    fn kernel_rows_sum_to_one_and_are_symmetric() {
        let xs: Vec<f64> = (0..401).map(|i| -10.0 + 0.05 * i as f64).collect();
        let k = kernel_matrix(&xs, 0.05, 1.0, 0.0, 1.0).unwrap();
        let s: f64 = k.row(200).iter().sum();
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        assert_eq!(k.get(10, 200), k.get(200, 10));
        assert!(kernel_matrix(&xs, 0.05, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn sinkhorn_reproduces_marginals_and_fixes_gauge() {
        let (grid, m, f) = setup(201, 11, (-1.0, 0.7), (1.5, 0.5));
        let k = kernel_matrix_for_grid(&grid, 1.0).unwrap();
        assert!(f.final_marginal_error <= 1e-9);
        assert!(marginal_residual(&m, &k, &f.eta_star_init, &f.eta_final) <= 1e-9);
        assert_eq!(f.eta_star_init[100], 1.0);
        assert!(f.monotone);
    }

    #[test]
    fn symmetric_marginals_give_equal_factors() {
        let (_, _, f) = setup(201, 11, (0.0, 0.8), (0.0, 0.8));
        let c = (f.eta_final[100] / f.eta_star_init[100]).sqrt();
        let g = f.rescaled(c);
        for (a, b) in g.eta_star_init.iter().zip(&g.eta_final) {
            assert!((a - b).abs() <= 1e-6 * a.max(*b), "{a} {b}");
        }
        // mirrored inputs give mirrored factors
        for i in 0..201 {
            assert!((g.eta_final[i] / g.eta_final[200 - i] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn density_has_the_right_ends_and_unit_mass() {
        let (grid, m, f) = setup(201, 41, (-1.0, 0.7), (1.5, 0.5));
        let eta = propagate_eta(&f, &grid, 1.0).unwrap();
        let eta_star = propagate_eta_star(&f, &grid, 1.0).unwrap();
        assert_eq!(eta.row(40), f.eta_final.as_slice());
        assert_eq!(eta_star.row(0), f.eta_star_init.as_slice());
        let rho = bernstein_density(&eta, &eta_star).unwrap();
        for (a, b) in rho.row(0).iter().zip(&m.p_init) {
            assert!((a - b).abs() <= 1e-8);
        }
        for (a, b) in rho.row(40).iter().zip(&m.p_final) {
            assert!((a - b).abs() <= 1e-8);
        }
        for mass in slice_masses(&rho) {
            assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn gauge_leaves_density_unchanged() {
        let (grid, _, f) = setup(201, 21, (0.5, 1.0), (-0.5, 0.6));
        let rho = |f: &SchrodingerFactors| {
            bernstein_density(&propagate_eta(f, &grid, 1.0).unwrap(), &propagate_eta_star(f, &grid, 1.0).unwrap()).unwrap()
        };
        let a = rho(&f);
        let b = rho(&f.rescaled(37.5));
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn propagated_factors_solve_heat_equations() {
        let (grid, _, f) = setup(401, 401, (-1.0, 0.7), (1.5, 0.5));
        let eta = propagate_eta_with_gradient(&f, &grid, 1.0).unwrap();
        let eta_star = propagate_eta_star(&f, &grid, 1.0).unwrap();
        assert!(heat_residual(&eta.value, 1.0, true, (-4.0, 4.0)) <= 1e-3);
        assert!(heat_residual(&eta_star, 1.0, false, (-4.0, 4.0)) <= 1e-3);
        // kernel log-gradient agrees with differencing ln eta
        let lg = crate::grid::gradient_x(&eta.value.map(f64::ln).unwrap()).unwrap();
        for k in [50, 200, 350] {
            for i in [100, 200, 300] {
                assert!((lg.get(k, i) - eta.log_gradient.get(k, i)).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn csv_marginals_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let xs: Vec<f64> = (0..5).map(|i| i as f64).collect();
        let a = dir.path().join("a.csv");
        std::fs::write(&a, "x,p\n0,1\n4,1\n").unwrap();
        let m = MarginalPair::from_csv(&a, &a, &xs).unwrap();
        assert!(m.p_init.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        assert_abs_diff_eq!(m.raw_mass_init, 5.0);
        let k = kernel_matrix(&xs, 1.0, 1.0, 0.0, 1.0).unwrap();
        let f = sinkhorn_solve(&m, &k, &SinkhornConfig::default()).unwrap();
        write_factors(&dir.path().join("f.csv"), &dir.path().join("f.json"), &m, &f, &SinkhornConfig::default()).unwrap();
        let meta: FactorsMetadata = serde_json::from_str(&std::fs::read_to_string(dir.path().join("f.json")).unwrap()).unwrap();
        assert_eq!(meta.iterations, f.iterations);
        assert_eq!(meta.gauge_x, 2.0);
    }

    #[test]
    fn non_convergence_reports_trace() {
        let grid = Arc::new(SpaceTimeGrid::new(-6.0, 6.0, -0.5, 0.5, 101, 3).unwrap());
        let m = MarginalPair::gaussian(grid.xs(), (-2.0, 0.3), (2.0, 0.3)).unwrap();
        let k = kernel_matrix_for_grid(&grid, 1.0).unwrap();
        match sinkhorn_solve(&m, &k, &SinkhornConfig { tol: 1e-14, max_iter: 3 }) {
            Err(Error::NonConvergence { trace, .. }) => assert_eq!(trace.len(), 3),
            other => panic!("{other:?}"),
        }
    }
}
