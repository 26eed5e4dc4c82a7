//! Oracles for the worked example `V = 0`, `S = |x|`, `S* = ln(1 + |x|)`.
//!
//! The obstacle problems reduce to heat equations on each half line with
//! `eta = 1` held at `x = 0`; the solutions are image-method integrals
//!
//! ```text
//! eta(t, x)  = 1 + ∫_half [G(x - y) - G(x + y)] (w(y) - 1) dy
//! ```
//!
//! with `G` the Gaussian of variance `hbar (T/2 - t)` (forward) or
//! `hbar (t + T/2)` (backward) and `w` the boundary data `e^{-|y|/hbar}`,
//! resp. `(1 + |y|)^{-1/hbar}`. The whole-line versions without the barrier
//! give the fixed-horizon problems.

use crate::error::{Error, Result};

use super::quadrature::{gaussian_window_integral, QuadratureConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Side {
    Negative,
    Positive,
}

fn side_of(x: f64) -> Side {
    if x < 0.0 {
        Side::Negative
    } else {
        Side::Positive
    }
}

/// Image-method integral over the half line containing `x`. With
/// `derivative` the `x`-derivative of the integral is returned instead.
fn half_line_image(
    x: f64,
    sigma: f64,
    weight: impl Fn(f64) -> f64 + Copy,
    derivative: bool,
    cfg: &QuadratureConfig,
) -> Result<f64> {
    let (lo, hi) = match side_of(x) {
        Side::Negative => (f64::NEG_INFINITY, 0.0),
        Side::Positive => (0.0, f64::INFINITY),
    };
    let s2 = sigma * sigma;
    // G(x - y) is centred at y = x, G(x + y) at y = -x.
    let direct = gaussian_window_integral(
        x,
        sigma,
        lo,
        hi,
        &[],
        |y| {
            let w = weight(y);
            if derivative {
                -(x - y) / s2 * w
            } else {
                w
            }
        },
        cfg,
    )?;
    let image = gaussian_window_integral(
        -x,
        sigma,
        lo,
        hi,
        &[],
        |y| {
            let w = weight(y);
            if derivative {
                -(x + y) / s2 * w
            } else {
                w
            }
        },
        cfg,
    )?;
    Ok(direct - image)
}

fn check_hbar(hbar: f64, horizon: f64) -> Result<()> {
    if !(hbar > 0.0 && hbar.is_finite() && horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "need hbar > 0 and T > 0, got hbar={hbar}, T={horizon}"
        )));
    }
    Ok(())
}

fn forward_weight(hbar: f64) -> impl Fn(f64) -> f64 + Copy {
    // e^{y/hbar} - 1 on y < 0 and e^{-y/hbar} - 1 on y > 0
    move |y: f64| (-y.abs() / hbar).exp_m1()
}

fn backward_weight(hbar: f64) -> impl Fn(f64) -> f64 + Copy {
    // (1 - y)^{-1/hbar} - 1 on y < 0 and (1 + y)^{-1/hbar} - 1 on y > 0
    move |y: f64| (-(y.abs().ln_1p()) / hbar).exp_m1()
}

/// `eta(t, x)` of the forward obstacle problem.
pub fn example_eta_forward(t: f64, x: f64, hbar: f64, horizon: f64, q: &QuadratureConfig) -> Result<f64> {
    check_hbar(hbar, horizon)?;
    let half = horizon / 2.0;
    if !(t >= -half && t <= half) {
        return Err(Error::InvalidArgument(format!(
            "t = {t} outside [-T/2, T/2] = [{}, {half}]",
            -half
        )));
    }
    if x == 0.0 {
        return Ok(1.0);
    }
    let tau = half - t;
    if tau <= 0.0 {
        return Ok((-x.abs() / hbar).exp());
    }
    let sigma = (hbar * tau).sqrt();
    Ok(1.0 + half_line_image(x, sigma, forward_weight(hbar), false, q)?)
}

/// `eta*(t, x)` of the backward obstacle problem.
pub fn example_eta_backward(t: f64, x: f64, hbar: f64, horizon: f64, q: &QuadratureConfig) -> Result<f64> {
    check_hbar(hbar, horizon)?;
    let half = horizon / 2.0;
    if !(t >= -half && t <= half) {
        return Err(Error::InvalidArgument(format!(
            "t = {t} outside [-T/2, T/2] = [{}, {half}]",
            -half
        )));
    }
    if x == 0.0 {
        return Ok(1.0);
    }
    let tau = t + half;
    if tau <= 0.0 {
        return Ok((-(x.abs().ln_1p()) / hbar).exp());
    }
    let sigma = (hbar * tau).sqrt();
    Ok(1.0 + half_line_image(x, sigma, backward_weight(hbar), false, q)?)
}

fn whole_line(x: f64, sigma: f64, weight: impl Fn(f64) -> f64, q: &QuadratureConfig) -> Result<f64> {
    gaussian_window_integral(x, sigma, f64::NEG_INFINITY, f64::INFINITY, &[0.0], weight, q)
}

/// Fixed-horizon `eta` with terminal data `e^{-|x|/hbar}` and no barrier.
pub fn example_classical_eta(t: f64, x: f64, hbar: f64, horizon: f64, q: &QuadratureConfig) -> Result<f64> {
    check_hbar(hbar, horizon)?;
    let half = horizon / 2.0;
    if !(t >= -half && t <= half) {
        return Err(Error::InvalidArgument(format!("t = {t} outside the horizon")));
    }
    let tau = half - t;
    if tau <= 0.0 {
        return Ok((-x.abs() / hbar).exp());
    }
    whole_line(x, (hbar * tau).sqrt(), |y| (-y.abs() / hbar).exp(), q)
}

/// Fixed-horizon `eta*` with initial data `(1 + |x|)^{-1/hbar}` and no barrier.
pub fn example_classical_eta_star(t: f64, x: f64, hbar: f64, horizon: f64, q: &QuadratureConfig) -> Result<f64> {
    check_hbar(hbar, horizon)?;
    let half = horizon / 2.0;
    if !(t >= -half && t <= half) {
        return Err(Error::InvalidArgument(format!("t = {t} outside the horizon")));
    }
    let tau = t + half;
    if tau <= 0.0 {
        return Ok((-(x.abs().ln_1p()) / hbar).exp());
    }
    whole_line(x, (hbar * tau).sqrt(), |y| (-(y.abs().ln_1p()) / hbar).exp(), q)
}

/// Relative step of the numerical log-derivative used to cross-check drifts.
const DRIFT_FD_STEP: f64 = 1e-4;
/// Allowed gap between the analytic and finite-difference drifts.
const DRIFT_AGREEMENT: f64 = 1e-4;

fn dual_drift(
    t: f64,
    x: f64,
    hbar: f64,
    sign: f64,
    eta: impl Fn(f64) -> Result<f64>,
    deta: impl Fn() -> Result<f64>,
) -> Result<f64> {
    if x == 0.0 {
        return Err(Error::InvalidArgument(format!(
            "drift is undefined on the free boundary x = 0 (t = {t})"
        )));
    }
    let e = eta(x)?;
    let analytic = sign * hbar * deta()? / e;
    let h = DRIFT_FD_STEP.min(0.5 * x.abs());
    let numerical = sign * hbar * (eta(x + h)?.ln() - eta(x - h)?.ln()) / (2.0 * h);
    if (analytic - numerical).abs() > DRIFT_AGREEMENT * (1.0 + analytic.abs()) {
        return Err(Error::DriftMismatch {
            t,
            x,
            analytic,
            numerical,
        });
    }
    Ok(analytic)
}

/// Optimal forward drift `hbar ∂x ln eta`, obtained by differentiating the
/// image integral and cross-checked against a centred difference of `ln eta`.
pub fn example_drift_forward(t: f64, x: f64, hbar: f64, horizon: f64, q: &QuadratureConfig) -> Result<f64> {
    let half = horizon / 2.0;
    if !(t > -half - 1e-15 && t < half) {
        return Err(Error::InvalidArgument(format!("drift needs t in [-T/2, T/2), got {t}")));
    }
    let sigma = (hbar * (half - t)).sqrt();
    dual_drift(
        t,
        x,
        hbar,
        1.0,
        |y| example_eta_forward(t, y, hbar, horizon, q),
        || half_line_image(x, sigma, forward_weight(hbar), true, q),
    )
}

/// Optimal backward drift `-hbar ∂x ln eta*` (equal to `∂x U*`).
pub fn example_drift_backward(t: f64, x: f64, hbar: f64, horizon: f64, q: &QuadratureConfig) -> Result<f64> {
    let half = horizon / 2.0;
    if !(t > -half && t < half + 1e-15) {
        return Err(Error::InvalidArgument(format!("drift needs t in (-T/2, T/2], got {t}")));
    }
    let sigma = (hbar * (t + half)).sqrt();
    dual_drift(
        t,
        x,
        hbar,
        -1.0,
        |y| example_eta_backward(t, y, hbar, horizon, q),
        || half_line_image(x, sigma, backward_weight(hbar), true, q),
    )
}

/// Bundles `hbar`, `T` and the quadrature settings of the example.
#[derive(Debug, Clone, Copy)]
pub struct ExampleOracle {
    pub hbar: f64,
    pub horizon: f64,
    pub quad: QuadratureConfig,
}

impl ExampleOracle {
    pub fn new(hbar: f64, horizon: f64) -> Self {
        Self {
            hbar,
            horizon,
            quad: QuadratureConfig::default(),
        }
    }

    /// Looser quadrature for whole-grid tables; still far below every
    /// discretisation error of interest.
    pub fn fast(hbar: f64, horizon: f64) -> Self {
        Self {
            hbar,
            horizon,
            quad: QuadratureConfig {
                abs_tol: 1e-12,
                rel_tol: 1e-9,
                ..QuadratureConfig::default()
            },
        }
    }

    pub fn eta(&self, t: f64, x: f64) -> Result<f64> {
        example_eta_forward(t, x, self.hbar, self.horizon, &self.quad)
    }

    pub fn eta_star(&self, t: f64, x: f64) -> Result<f64> {
        example_eta_backward(t, x, self.hbar, self.horizon, &self.quad)
    }

    /// Forward value `U = -hbar ln eta`.
    pub fn value(&self, t: f64, x: f64) -> Result<f64> {
        Ok(-self.hbar * self.eta(t, x)?.ln())
    }

    /// Backward value `U* = -hbar ln eta*`.
    pub fn value_star(&self, t: f64, x: f64) -> Result<f64> {
        Ok(-self.hbar * self.eta_star(t, x)?.ln())
    }

    /// Fixed-horizon forward value `-hbar ln eta~`.
    pub fn classical_value(&self, t: f64, x: f64) -> Result<f64> {
        Ok(-self.hbar * example_classical_eta(t, x, self.hbar, self.horizon, &self.quad)?.ln())
    }

    pub fn classical_value_star(&self, t: f64, x: f64) -> Result<f64> {
        Ok(-self.hbar * example_classical_eta_star(t, x, self.hbar, self.horizon, &self.quad)?.ln())
    }

    pub fn drift(&self, t: f64, x: f64) -> Result<f64> {
        example_drift_forward(t, x, self.hbar, self.horizon, &self.quad)
    }

    pub fn drift_star(&self, t: f64, x: f64) -> Result<f64> {
        example_drift_backward(t, x, self.hbar, self.horizon, &self.quad)
    }
}
