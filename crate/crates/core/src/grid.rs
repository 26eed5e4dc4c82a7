//! Problem data, space-time grids, gridded fields and region masks.
//!
//! Everything here is one-dimensional in space. Fields are stored row-major
//! with the time index first, so `field.row(k)` is the spatial profile at
//! `grid.ts()[k]`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Built-in scalar functions of one real variable.
///
/// These are the only functions a [`ProblemSpec`] can carry; they are
/// referenced by name in JSON documents (`"abs"`, or
/// `{"name": "quadratic", "params": [0.5]}`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalarFn {
    Zero,
    Constant(f64),
    /// `scale * |x|`
    Abs { scale: f64 },
    /// `scale * ln(1 + |x|)`
    Log1pAbs { scale: f64 },
    /// `slope * x + intercept`
    Linear { slope: f64, intercept: f64 },
    /// `coeff * (x - center)^2`
    Quadratic { coeff: f64, center: f64 },
}

impl ScalarFn {
    pub const NAMES: [&'static str; 6] = [
        "zero",
        "constant",
        "abs",
        "log1p_abs",
        "linear",
        "quadratic",
    ];

    pub fn from_name(name: &str, params: &[f64]) -> Result<Self> {
        let p = |i: usize, default: f64| params.get(i).copied().unwrap_or(default);
        let max_params = match name {
            "zero" => 0,
            "constant" => 1,
            "abs" | "log1p_abs" => 1,
            "linear" | "quadratic" => 2,
            other => {
                return Err(Error::InvalidSpec(format!(
                    "unknown function `{other}`, expected one of {:?}",
                    Self::NAMES
                )))
            }
        };
        if params.len() > max_params {
            return Err(Error::InvalidSpec(format!(
                "function `{name}` takes at most {max_params} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "function `{name}` has non-finite parameters"
            )));
        }
        Ok(match name {
            "zero" => ScalarFn::Zero,
            "constant" => ScalarFn::Constant(p(0, 0.0)),
            "abs" => ScalarFn::Abs { scale: p(0, 1.0) },
            "log1p_abs" => ScalarFn::Log1pAbs { scale: p(0, 1.0) },
            "linear" => ScalarFn::Linear {
                slope: p(0, 1.0),
                intercept: p(1, 0.0),
            },
            "quadratic" => ScalarFn::Quadratic {
                coeff: p(0, 1.0),
                center: p(1, 0.0),
            },
            _ => unreachable!(),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScalarFn::Zero => "zero",
            ScalarFn::Constant(_) => "constant",
            ScalarFn::Abs { .. } => "abs",
            ScalarFn::Log1pAbs { .. } => "log1p_abs",
            ScalarFn::Linear { .. } => "linear",
            ScalarFn::Quadratic { .. } => "quadratic",
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match *self {
            ScalarFn::Zero => vec![],
            ScalarFn::Constant(c) => vec![c],
            ScalarFn::Abs { scale } | ScalarFn::Log1pAbs { scale } => vec![scale],
            ScalarFn::Linear { slope, intercept } => vec![slope, intercept],
            ScalarFn::Quadratic { coeff, center } => vec![coeff, center],
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            ScalarFn::Zero => 0.0,
            ScalarFn::Constant(c) => c,
            ScalarFn::Abs { scale } => scale * x.abs(),
            ScalarFn::Log1pAbs { scale } => scale * x.abs().ln_1p(),
            ScalarFn::Linear { slope, intercept } => slope * x + intercept,
            ScalarFn::Quadratic { coeff, center } => coeff * (x - center) * (x - center),
        }
    }

    /// Derivative; at kinks the mean of the one-sided derivatives.
    pub fn derivative(&self, x: f64) -> f64 {
        let sign = if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        };
        match *self {
            ScalarFn::Zero | ScalarFn::Constant(_) => 0.0,
            ScalarFn::Abs { scale } => scale * sign,
            ScalarFn::Log1pAbs { scale } => scale * sign / (1.0 + x.abs()),
            ScalarFn::Linear { slope, .. } => slope,
            ScalarFn::Quadratic { coeff, center } => 2.0 * coeff * (x - center),
        }
    }
}

impl fmt::Display for ScalarFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let params = self.params();
        if params.is_empty() {
            write!(f, "{}", self.name())
        } else {
            write!(f, "{}{:?}", self.name(), params)
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum FnRepr {
    Name(String),
    Full {
        name: String,
        #[serde(default)]
        params: Vec<f64>,
    },
}

impl Serialize for ScalarFn {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let params = self.params();
        let repr = if params.is_empty() {
            FnRepr::Name(self.name().to_string())
        } else {
            FnRepr::Full {
                name: self.name().to_string(),
                params,
            }
        };
        repr.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ScalarFn {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let (name, params) = match FnRepr::deserialize(deserializer)? {
            FnRepr::Name(name) => (name, Vec::new()),
            FnRepr::Full { name, params } => (name, params),
        };
        ScalarFn::from_name(&name, &params).map_err(serde::de::Error::custom)
    }
}

/// Data of the pair of adjoint control problems: diffusion constant, horizon
/// `[-T/2, T/2]`, potential, terminal cost `S`, initial cost `S*` and the
/// spatial truncation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub hbar: f64,
    pub half_horizon: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub potential: ScalarFn,
    pub terminal_cost: ScalarFn,
    pub initial_cost: ScalarFn,
}

impl ProblemSpec {
    /// The worked one-dimensional example: `V = 0`, `S = |x|`,
    /// `S* = ln(1 + |x|)` on `[-3, 3]`.
    pub fn worked_example(hbar: f64, horizon: f64) -> Self {
        Self {
            hbar,
            half_horizon: horizon / 2.0,
            x_min: -3.0,
            x_max: 3.0,
            potential: ScalarFn::Zero,
            terminal_cost: ScalarFn::Abs { scale: 1.0 },
            initial_cost: ScalarFn::Log1pAbs { scale: 1.0 },
        }
    }

    pub fn horizon(&self) -> f64 {
        2.0 * self.half_horizon
    }

    pub fn t_start(&self) -> f64 {
        -self.half_horizon
    }

    pub fn t_end(&self) -> f64 {
        self.half_horizon
    }

    /// Checks the scalar invariants and samples the cost functions.
    pub fn validate(&self) -> Result<()> {
        let finite = [self.hbar, self.half_horizon, self.x_min, self.x_max];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "non-finite scalar in {finite:?}"
            )));
        }
        if self.hbar <= 0.0 {
            return Err(Error::InvalidSpec(format!("hbar must be > 0, got {}", self.hbar)));
        }
        if self.half_horizon <= 0.0 {
            return Err(Error::InvalidSpec(format!(
                "half_horizon must be > 0, got {}",
                self.half_horizon
            )));
        }
        if self.x_min >= self.x_max {
            return Err(Error::InvalidSpec(format!(
                "x_min ({}) must be < x_max ({})",
                self.x_min, self.x_max
            )));
        }
        let n = 1001;
        for i in 0..n {
            let x = self.x_min + (self.x_max - self.x_min) * i as f64 / (n - 1) as f64;
            for (label, f) in [
                ("potential", &self.potential),
                ("terminal_cost", &self.terminal_cost),
                ("initial_cost", &self.initial_cost),
            ] {
                if !f.eval(x).is_finite() {
                    return Err(Error::InvalidSpec(format!("{label} is not finite at x = {x}")));
                }
            }
        }
        Ok(())
    }

    /// Largest sampled difference quotient of `S` and `S*` on the truncated
    /// domain. A diagnostic for the Lipschitz assumption, not a proof.
    pub fn lipschitz_estimate(&self, samples: usize) -> f64 {
        let n = samples.max(2);
        let h = (self.x_max - self.x_min) / (n - 1) as f64;
        let mut worst: f64 = 0.0;
        for f in [&self.terminal_cost, &self.initial_cost] {
            let mut prev = f.eval(self.x_min);
            for i in 1..n {
                let cur = f.eval(self.x_min + i as f64 * h);
                worst = worst.max((cur - prev).abs() / h);
                prev = cur;
            }
        }
        worst
    }

    pub fn check_lipschitz(&self, samples: usize, bound: f64) -> Result<f64> {
        let est = self.lipschitz_estimate(samples);
        if est > bound {
            return Err(Error::InvalidSpec(format!(
                "sampled Lipschitz constant {est} exceeds the configured bound {bound}"
            )));
        }
        Ok(est)
    }

    /// Same problem with time reversed: the backward data become forward data.
    pub fn time_mirrored(&self) -> Self {
        Self {
            terminal_cost: self.initial_cost,
            initial_cost: self.terminal_cost,
            ..self.clone()
        }
    }
}

/// Uniform tensor grid over `[x_min, x_max] x [-T/2, T/2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeGrid {
    xs: Vec<f64>,
    ts: Vec<f64>,
    dx: f64,
    dt: f64,
}

fn uniform_nodes(a: f64, b: f64, n: usize) -> Vec<f64> {
    let h = (b - a) / (n - 1) as f64;
    let mut v: Vec<f64> = (0..n).map(|i| a + i as f64 * h).collect();
    v[0] = a;
    v[n - 1] = b;
    v
}

impl SpaceTimeGrid {
    pub fn new(x_min: f64, x_max: f64, t_min: f64, t_max: f64, nx: usize, nt: usize) -> Result<Self> {
        if ![x_min, x_max, t_min, t_max].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "non-finite bounds x=[{x_min}, {x_max}], t=[{t_min}, {t_max}]"
            )));
        }
        if nx < 3 {
            return Err(Error::InvalidGrid(format!("need nx >= 3, got {nx}")));
        }
        if nt < 2 {
            return Err(Error::InvalidGrid(format!("need nt >= 2, got {nt}")));
        }
        if x_min >= x_max {
            return Err(Error::InvalidGrid(format!("x_min ({x_min}) must be < x_max ({x_max})")));
        }
        if t_min >= t_max {
            return Err(Error::InvalidGrid(format!("t_min ({t_min}) must be < t_max ({t_max})")));
        }
        Ok(Self {
            xs: uniform_nodes(x_min, x_max, nx),
            ts: uniform_nodes(t_min, t_max, nt),
            dx: (x_max - x_min) / (nx - 1) as f64,
            dt: (t_max - t_min) / (nt - 1) as f64,
        })
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }
    pub fn ts(&self) -> &[f64] {
        &self.ts
    }
    pub fn nx(&self) -> usize {
        self.xs.len()
    }
    pub fn nt(&self) -> usize {
        self.ts.len()
    }
    pub fn dx(&self) -> f64 {
        self.dx
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn x_min(&self) -> f64 {
        self.xs[0]
    }
    pub fn x_max(&self) -> f64 {
        self.xs[self.xs.len() - 1]
    }
    pub fn t_min(&self) -> f64 {
        self.ts[0]
    }
    pub fn t_max(&self) -> f64 {
        self.ts[self.ts.len() - 1]
    }

    /// Index of the node nearest to `x` (clamped to the grid).
    pub fn nearest_x(&self, x: f64) -> usize {
        let i = ((x - self.x_min()) / self.dx).round();
        i.clamp(0.0, (self.nx() - 1) as f64) as usize
    }

    pub fn nearest_t(&self, t: f64) -> usize {
        let k = ((t - self.t_min()) / self.dt).round();
        k.clamp(0.0, (self.nt() - 1) as f64) as usize
    }

    /// Slice index in force at time `t`: the last grid time `<= t`
    /// (up to rounding), clamped to the grid.
    pub fn slice_at(&self, t: f64) -> usize {
        let s = (t - self.t_min()) / self.dt;
        let k = (s + 1e-9).floor();
        k.clamp(0.0, (self.nt() - 1) as f64) as usize
    }

    pub fn same_shape(&self, other: &SpaceTimeGrid) -> bool {
        self.nx() == other.nx()
            && self.nt() == other.nt()
            && (self.x_min() - other.x_min()).abs() <= 1e-12 * (1.0 + self.x_min().abs())
            && (self.x_max() - other.x_max()).abs() <= 1e-12 * (1.0 + self.x_max().abs())
            && (self.t_min() - other.t_min()).abs() <= 1e-12 * (1.0 + self.t_min().abs())
            && (self.t_max() - other.t_max()).abs() <= 1e-12 * (1.0 + self.t_max().abs())
    }

    /// Grid with time reversed (`t -> -t`). For a symmetric horizon this is
    /// the same node set.
    pub fn time_mirrored(&self) -> Self {
        let mut ts: Vec<f64> = self.ts.iter().rev().map(|t| -t).collect();
        let n = ts.len();
        ts[0] = -self.t_max();
        ts[n - 1] = -self.t_min();
        Self {
            xs: self.xs.clone(),
            ts,
            dx: self.dx,
            dt: self.dt,
        }
    }
}

/// Uniform grid covering the spec's truncated domain and full horizon.
pub fn build_grid(spec: &ProblemSpec, nx: usize, nt: usize) -> Result<SpaceTimeGrid> {
    if !spec.hbar.is_finite() || !spec.half_horizon.is_finite() {
        return Err(Error::InvalidGrid(
            "non-finite hbar or horizon in problem spec".into(),
        ));
    }
    SpaceTimeGrid::new(
        spec.x_min,
        spec.x_max,
        spec.t_start(),
        spec.t_end(),
        nx,
        nt,
    )
}

fn locate(nodes: &[f64], h: f64, v: f64) -> (usize, f64) {
    let n = nodes.len();
    let s = (v - nodes[0]) / h;
    let i = (s.floor().max(0.0) as usize).min(n - 2);
    let w = ((v - nodes[i]) / h).clamp(0.0, 1.0);
    (i, w)
}

/// Real values on every node of a [`SpaceTimeGrid`], indexed `(time, space)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Arc<SpaceTimeGrid>,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Arc<SpaceTimeGrid>, values: Vec<f64>) -> Result<Self> {
        let expected = grid.nx() * grid.nt();
        if values.len() != expected {
            return Err(Error::GridMismatch(format!(
                "field has {} values, grid has {} nodes",
                values.len(),
                expected
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (k, i) = (pos / grid.nx(), pos % grid.nx());
            return Err(Error::Numerical(format!(
                "non-finite field value at (t={}, x={})",
                grid.ts()[k],
                grid.xs()[i]
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: Arc<SpaceTimeGrid>, value: f64) -> Self {
        let n = grid.nx() * grid.nt();
        Self {
            grid,
            values: vec![value; n],
        }
    }

    pub fn from_fn(grid: Arc<SpaceTimeGrid>, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(grid.nx() * grid.nt());
        for &t in grid.ts() {
            for &x in grid.xs() {
                values.push(f(t, x));
            }
        }
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        &self.grid
    }

    pub fn grid_arc(&self) -> &Arc<SpaceTimeGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, k: usize, i: usize) -> f64 {
        self.values[k * self.grid.nx() + i]
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let nx = self.grid.nx();
        &self.values[k * nx..(k + 1) * nx]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.grid.nx())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.grid.clone(), self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_grid(other)?;
        Self::new(
            self.grid.clone(),
            self.values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn check_same_grid(&self, other: &ScalarField) -> Result<()> {
        if Arc::ptr_eq(&self.grid, &other.grid) || self.grid.same_shape(&other.grid) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{}x{} vs {}x{}",
                self.grid.nt(),
                self.grid.nx(),
                other.grid.nt(),
                other.grid.nx()
            )))
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Bilinear interpolation in `(t, x)`.
    pub fn interpolate(&self, t: f64, x: f64) -> Result<f64> {
        let g = &*self.grid;
        let tol_t = 1e-12 * (1.0 + g.t_max().abs().max(g.t_min().abs()));
        let tol_x = 1e-12 * (1.0 + g.x_max().abs().max(g.x_min().abs()));
        let inside = t.is_finite()
            && x.is_finite()
            && t >= g.t_min() - tol_t
            && t <= g.t_max() + tol_t
            && x >= g.x_min() - tol_x
            && x <= g.x_max() + tol_x;
        if !inside {
            return Err(Error::OutOfHull {
                t,
                x,
                t_min: g.t_min(),
                t_max: g.t_max(),
                x_min: g.x_min(),
                x_max: g.x_max(),
            });
        }
        Ok(self.interpolate_clamped(t, x))
    }

    /// Bilinear interpolation with the query clamped into the grid hull.
    pub fn interpolate_clamped(&self, t: f64, x: f64) -> f64 {
        let g = &*self.grid;
        let (k, wt) = locate(g.ts(), g.dt(), t.clamp(g.t_min(), g.t_max()));
        let (i, wx) = locate(g.xs(), g.dx(), x.clamp(g.x_min(), g.x_max()));
        let v00 = self.get(k, i);
        let v01 = self.get(k, i + 1);
        let v10 = self.get(k + 1, i);
        let v11 = self.get(k + 1, i + 1);
        let lo = v00 + wx * (v01 - v00);
        let hi = v10 + wx * (v11 - v10);
        lo + wt * (hi - lo)
    }

    /// Linear interpolation in `x` on a single time slice.
    pub fn interpolate_row(&self, k: usize, x: f64) -> f64 {
        let g = &*self.grid;
        let (i, wx) = locate(g.xs(), g.dx(), x.clamp(g.x_min(), g.x_max()));
        let r = self.row(k);
        r[i] + wx * (r[i + 1] - r[i])
    }

    /// Field on the time-mirrored grid: row `k` becomes row `nt - 1 - k`.
    pub fn time_mirrored(&self) -> Self {
        let grid = Arc::new(self.grid.time_mirrored());
        let mut values = Vec::with_capacity(self.values.len());
        for row in self.values.chunks(self.grid.nx()).rev() {
            values.extend_from_slice(row);
        }
        Self { grid, values }
    }

    pub fn with_grid(self, grid: Arc<SpaceTimeGrid>) -> Result<Self> {
        if !grid.same_shape(&self.grid) {
            return Err(Error::GridMismatch("cannot rebind field to a different grid".into()));
        }
        Ok(Self {
            grid,
            values: self.values,
        })
    }
}

/// Spatial derivative of one row: central differences inside, second-order
/// one-sided differences at both ends. Exact for quadratics.
pub fn gradient_row(row: &[f64], dx: f64, out: &mut [f64]) {
    let n = row.len();
    debug_assert!(n >= 3 && out.len() == n);
    out[0] = (-3.0 * row[0] + 4.0 * row[1] - row[2]) / (2.0 * dx);
    for i in 1..n - 1 {
        out[i] = (row[i + 1] - row[i - 1]) / (2.0 * dx);
    }
    out[n - 1] = (3.0 * row[n - 1] - 4.0 * row[n - 2] + row[n - 3]) / (2.0 * dx);
}

pub fn gradient_x(field: &ScalarField) -> Result<ScalarField> {
    let g = field.grid();
    if g.nx() < 3 {
        return Err(Error::InvalidGrid("gradient_x needs nx >= 3".into()));
    }
    let mut values = vec![0.0; field.values().len()];
    for (row, out) in field.rows().zip(values.chunks_mut(g.nx())) {
        gradient_row(row, g.dx(), out);
    }
    ScalarField::new(field.grid_arc().clone(), values)
}

/// Classification of a space-time node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Region {
    Continuation,
    Stopping,
}

/// Continuation/stopping flag on every node of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    grid: Arc<SpaceTimeGrid>,
    flags: Vec<Region>,
}

impl RegionMask {
    pub fn new(grid: Arc<SpaceTimeGrid>, flags: Vec<Region>) -> Result<Self> {
        if flags.len() != grid.nx() * grid.nt() {
            return Err(Error::GridMismatch(format!(
                "mask has {} flags, grid has {} nodes",
                flags.len(),
                grid.nx() * grid.nt()
            )));
        }
        Ok(Self { grid, flags })
    }

    pub fn filled(grid: Arc<SpaceTimeGrid>, region: Region) -> Self {
        let n = grid.nx() * grid.nt();
        Self {
            grid,
            flags: vec![region; n],
        }
    }

    pub fn from_fn(grid: Arc<SpaceTimeGrid>, f: impl Fn(usize, usize) -> Region) -> Self {
        let mut flags = Vec::with_capacity(grid.nx() * grid.nt());
        for k in 0..grid.nt() {
            for i in 0..grid.nx() {
                flags.push(f(k, i));
            }
        }
        Self { grid, flags }
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        &self.grid
    }

    pub fn grid_arc(&self) -> &Arc<SpaceTimeGrid> {
        &self.grid
    }

    pub fn get(&self, k: usize, i: usize) -> Region {
        self.flags[k * self.grid.nx() + i]
    }

    pub fn is_stopping(&self, k: usize, i: usize) -> bool {
        self.get(k, i) == Region::Stopping
    }

    pub fn row(&self, k: usize) -> &[Region] {
        let nx = self.grid.nx();
        &self.flags[k * nx..(k + 1) * nx]
    }

    pub fn flags(&self) -> &[Region] {
        &self.flags
    }

    pub fn count(&self, region: Region) -> usize {
        self.flags.iter().filter(|&&r| r == region).count()
    }

    /// Maximal runs of stopping nodes on slice `k`, as closed intervals of
    /// node positions. An isolated stopping node gives a degenerate interval.
    pub fn stopping_intervals(&self, k: usize) -> Vec<(f64, f64)> {
        let xs = self.grid.xs();
        let row = self.row(k);
        let mut out = Vec::new();
        let mut start = None;
        for (i, r) in row.iter().enumerate() {
            match (r, start) {
                (Region::Stopping, None) => start = Some(i),
                (Region::Continuation, Some(s)) => {
                    out.push((xs[s], xs[i - 1]));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            out.push((xs[s], xs[row.len() - 1]));
        }
        out
    }

    /// Positions of stopping nodes that border a continuation node on slice `k`.
    pub fn free_boundary(&self, k: usize) -> Vec<f64> {
        let xs = self.grid.xs();
        let row = self.row(k);
        let n = row.len();
        (0..n)
            .filter(|&i| {
                row[i] == Region::Stopping
                    && ((i > 0 && row[i - 1] == Region::Continuation)
                        || (i + 1 < n && row[i + 1] == Region::Continuation))
            })
            .map(|i| xs[i])
            .collect()
    }

    pub fn time_mirrored(&self) -> Self {
        let grid = Arc::new(self.grid.time_mirrored());
        let mut flags = Vec::with_capacity(self.flags.len());
        for row in self.flags.chunks(self.grid.nx()).rev() {
            flags.extend_from_slice(row);
        }
        Self { grid, flags }
    }
}

/// Absolute/relative threshold for calling a node "on the obstacle".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionTolerance {
    pub abs_tol: f64,
    pub rel_tol: f64,
}

impl Default for RegionTolerance {
    fn default() -> Self {
        Self {
            abs_tol: 1e-9,
            rel_tol: 1e-8,
        }
    }
}

/// A node is STOPPING iff `eta <= obstacle * (1 + tol)`.
pub fn region_from_eta(eta: &ScalarField, obstacle: &ScalarField, tol: f64) -> Result<RegionMask> {
    region_from_eta_with(
        eta,
        obstacle,
        RegionTolerance {
            abs_tol: 0.0,
            rel_tol: tol,
        },
    )
}

/// A node is STOPPING iff `eta - obstacle <= max(abs_tol, rel_tol * obstacle)`.
pub fn region_from_eta_with(
    eta: &ScalarField,
    obstacle: &ScalarField,
    tol: RegionTolerance,
) -> Result<RegionMask> {
    eta.check_same_grid(obstacle)?;
    if !(tol.abs_tol >= 0.0 && tol.rel_tol >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "region tolerances must be >= 0, got {tol:?}"
        )));
    }
    if let Some(v) = obstacle.values().iter().find(|&&v| v <= 0.0) {
        return Err(Error::InvalidArgument(format!("obstacle must be > 0, found {v}")));
    }
    let flags = eta
        .values()
        .iter()
        .zip(obstacle.values())
        .map(|(&e, &o)| {
            if e - o <= tol.abs_tol.max(tol.rel_tol * o) {
                Region::Stopping
            } else {
                Region::Continuation
            }
        })
        .collect();
    RegionMask::new(eta.grid_arc().clone(), flags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn unit_spec() -> ProblemSpec {
        ProblemSpec {
            hbar: 1.0,
            half_horizon: 0.5,
            x_min: -1.0,
            x_max: 1.0,
            potential: ScalarFn::Zero,
            terminal_cost: ScalarFn::Zero,
            initial_cost: ScalarFn::Zero,
        }
    }

    #[test]
    fn three_by_two_grid_has_exact_endpoints() {
        let g = build_grid(&unit_spec(), 3, 2).unwrap();
        assert_eq!(g.xs(), &[-1.0, 0.0, 1.0]);
        assert_eq!(g.ts(), &[-0.5, 0.5]);
    }

    #[test]
    fn grid_step_is_one_hundredth() {
        let spec = ProblemSpec {
            x_min: -3.0,
            x_max: 3.0,
            ..unit_spec()
        };
        let g = build_grid(&spec, 601, 11).unwrap();
        assert_abs_diff_eq!(g.dx(), 0.01, epsilon = 1e-15);
        assert_eq!(g.xs()[300], 0.0_f64.max(g.xs()[300]));
        assert_abs_diff_eq!(g.xs()[300], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn reversed_bounds_are_rejected() {
        let spec = ProblemSpec {
            x_min: 1.0,
            x_max: 0.0,
            ..unit_spec()
        };
        assert!(build_grid(&spec, 3, 2).is_err());
        assert!(build_grid(
            &ProblemSpec {
                x_max: f64::NAN,
                ..unit_spec()
            },
            3,
            2
        )
        .is_err());
        assert!(build_grid(&unit_spec(), 2, 2).is_err());
        assert!(build_grid(&unit_spec(), 3, 1).is_err());
    }

    #[test]
    fn interpolation_identity_midpoint_and_hull() {
        let g = Arc::new(build_grid(&unit_spec(), 3, 2).unwrap());
        let f = ScalarField::new(g.clone(), vec![0.0, 2.0, 4.0, 0.0, 2.0, 4.0]).unwrap();
        assert_eq!(f.interpolate(-0.5, 0.0).unwrap(), 2.0);
        assert_abs_diff_eq!(f.interpolate(0.0, -0.5).unwrap(), 1.0, epsilon = 1e-15);
        match f.interpolate(0.0, 1.5) {
            Err(Error::OutOfHull { x, .. }) => assert_eq!(x, 1.5),
            other => panic!("expected hull error, got {other:?}"),
        }
    }

    #[test]
    fn gradient_of_affine_constant_and_quadratic() {
        let spec = ProblemSpec {
            x_min: -3.0,
            x_max: 3.0,
            ..unit_spec()
        };
        let g = Arc::new(build_grid(&spec, 601, 3).unwrap());
        let lin = ScalarField::from_fn(g.clone(), |_, x| x).unwrap();
        for v in gradient_x(&lin).unwrap().values() {
            assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-10);
        }
        let c = ScalarField::constant(g.clone(), 3.5);
        assert!(gradient_x(&c).unwrap().values().iter().all(|v| *v == 0.0));
        let q = ScalarField::from_fn(g.clone(), |_, x| x * x).unwrap();
        let dq = gradient_x(&q).unwrap();
        for k in 0..g.nt() {
            for i in 1..g.nx() - 1 {
                assert_abs_diff_eq!(dq.get(k, i), 2.0 * g.xs()[i], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn region_equality_and_doubling() {
        let g = Arc::new(build_grid(&unit_spec(), 5, 4).unwrap());
        let obst = ScalarField::from_fn(g.clone(), |_, x| (-x.abs()).exp()).unwrap();
        let all = region_from_eta(&obst, &obst, 0.0).unwrap();
        assert_eq!(all.count(Region::Stopping), 20);

        let last = g.nt() - 1;
        let eta = ScalarField::from_fn(g.clone(), |t, x| {
            let o = (-x.abs()).exp();
            if t == g.t_max() {
                o
            } else {
                2.0 * o
            }
        })
        .unwrap();
        let m = region_from_eta(&eta, &obst, 1e-8).unwrap();
        for k in 0..g.nt() {
            for i in 0..g.nx() {
                let expect = if k == last { Region::Stopping } else { Region::Continuation };
                assert_eq!(m.get(k, i), expect);
            }
        }
        assert!(region_from_eta(&eta, &obst, -1.0).is_err());
    }

    #[test]
    fn stopping_intervals_and_free_boundary() {
        let g = Arc::new(build_grid(&unit_spec(), 5, 2).unwrap());
        let m = RegionMask::from_fn(g.clone(), |k, i| {
            if k == 1 || i == 2 || i == 4 {
                Region::Stopping
            } else {
                Region::Continuation
            }
        });
        assert_eq!(m.stopping_intervals(0), vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(m.stopping_intervals(1), vec![(-1.0, 1.0)]);
        assert_eq!(m.free_boundary(0), vec![0.0, 1.0]);
        assert!(m.free_boundary(1).is_empty());
    }

    #[test]
    fn function_registry_round_trips_through_json() {
        let spec = ProblemSpec::worked_example(1.0, 1.0);
        let s = serde_json::to_string(&spec).unwrap();
        let back: ProblemSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, spec);
        let doc = r#"{"hbar":1,"half_horizon":0.5,"x_min":-3,"x_max":3,
            "potential":"zero","terminal_cost":{"name":"abs","params":[2.0]},
            "initial_cost":"log1p_abs"}"#;
        let parsed: ProblemSpec = serde_json::from_str(doc).unwrap();
        assert_eq!(parsed.terminal_cost.eval(-1.5), 3.0);
        let bad = doc.replace("\"zero\"", "\"sinh\"");
        let err = serde_json::from_str::<ProblemSpec>(&bad).unwrap_err().to_string();
        assert!(err.contains("sinh"), "{err}");
    }

    #[test]
    fn lipschitz_diagnostic_flags_steep_costs() {
        let spec = ProblemSpec::worked_example(1.0, 1.0);
        let est = spec.check_lipschitz(601, 1.5).unwrap();
        assert!((est - 1.0).abs() < 1e-9);
        let steep = ProblemSpec {
            terminal_cost: ScalarFn::Abs { scale: 10.0 },
            ..spec
        };
        assert!(steep.check_lipschitz(601, 1.5).is_err());
    }

    proptest! {
        #[test]
        fn interpolation_is_monotone_on_monotone_rows(a in -5.0f64..5.0, b in 0.01f64..3.0, t in -0.5f64..0.5, u in 0.0f64..1.0, v in 0.0f64..1.0) {
            let g = Arc::new(build_grid(&unit_spec(), 7, 5).unwrap());
            let f = ScalarField::from_fn(g, |_, x| a + b * x * x * x + 0.1 * x).unwrap();
            let (x1, x2) = (-1.0 + 2.0 * u.min(v), -1.0 + 2.0 * u.max(v));
            prop_assert!(f.interpolate(t, x1).unwrap() <= f.interpolate(t, x2).unwrap() + 1e-12);
        }

        #[test]
        fn gradient_is_exact_on_affine_fields(a in -10.0f64..10.0, b in -10.0f64..10.0) {
            let g = Arc::new(build_grid(&unit_spec(), 9, 3).unwrap());
            let f = ScalarField::from_fn(g, |_, x| a * x + b).unwrap();
            for v in gradient_x(&f).unwrap().values() {
                prop_assert!((v - a).abs() <= 1e-11 * (1.0 + a.abs() + b.abs()));
            }
        }

        #[test]
        fn stopping_set_grows_with_tolerance(seed in proptest::collection::vec(0.0f64..0.01, 15), t1 in 0.0f64..1e-2, t2 in 0.0f64..1e-2) {
            let g = Arc::new(build_grid(&unit_spec(), 5, 3).unwrap());
            let obst = ScalarField::constant(g.clone(), 1.0);
            let eta = ScalarField::new(g, seed.iter().map(|d| 1.0 + d).collect()).unwrap();
            let (lo, hi) = (t1.min(t2), t1.max(t2));
            let a = region_from_eta(&eta, &obst, lo).unwrap();
            let b = region_from_eta(&eta, &obst, hi).unwrap();
            for (ra, rb) in a.flags().iter().zip(b.flags()) {
                prop_assert!(!(*ra == Region::Stopping && *rb == Region::Continuation));
            }
            prop_assert_eq!(region_from_eta(&eta, &obst, lo).unwrap(), a);
        }
    }
}
