//! Adaptive Gauss–Kronrod (7/15) quadrature with global bisection.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerances and truncation for the oracle integrals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadratureConfig {
    pub abs_tol: f64,
    pub rel_tol: f64,
    /// Gaussian factors are integrated over `mean ± tail_sigmas * std`.
    pub tail_sigmas: f64,
    pub max_subdivisions: usize,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            abs_tol: 1e-13,
            rel_tol: 1e-11,
            tail_sigmas: 10.0,
            max_subdivisions: 400,
        }
    }
}

impl QuadratureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.abs_tol > 0.0 && self.rel_tol > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "quadrature tolerances must be > 0, got abs={} rel={}",
                self.abs_tol, self.rel_tol
            )));
        }
        if !(self.tail_sigmas >= 6.0) {
            return Err(Error::InvalidArgument(format!(
                "tail_sigmas must be >= 6, got {}",
                self.tail_sigmas
            )));
        }
        if self.max_subdivisions == 0 {
            return Err(Error::InvalidArgument("max_subdivisions must be >= 1".into()));
        }
        Ok(())
    }
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
// Gauss weights for XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        kronrod += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

struct Panel {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// Integrates `f` over `[a, b]`, starting from `initial_panels` equal panels
/// and bisecting the worst panel until the error estimate meets the
/// tolerance.
pub fn integrate(
    f: impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    initial_panels: usize,
    cfg: &QuadratureConfig,
) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
    let n0 = initial_panels.max(1);
    let mut heap = BinaryHeap::with_capacity(n0 + cfg.max_subdivisions);
    let (mut total, mut err) = (0.0, 0.0);
    for j in 0..n0 {
        let pa = lo + (hi - lo) * j as f64 / n0 as f64;
        let pb = if j + 1 == n0 {
            hi
        } else {
            lo + (hi - lo) * (j + 1) as f64 / n0 as f64
        };
        let (v, e) = gk15(&f, pa, pb);
        total += v;
        err += e;
        heap.push(Panel {
            a: pa,
            b: pb,
            value: v,
            error: e,
        });
    }
    let mut splits = 0;
    while err > cfg.abs_tol.max(cfg.rel_tol * total.abs()) {
        if splits >= cfg.max_subdivisions {
            return Err(Error::Quadrature {
                a,
                b,
                error: err,
                subdivisions: splits,
            });
        }
        let worst = heap.pop().expect("heap is never empty");
        let mid = 0.5 * (worst.a + worst.b);
        let (v1, e1) = gk15(&f, worst.a, mid);
        let (v2, e2) = gk15(&f, mid, worst.b);
        total += v1 + v2 - worst.value;
        err += e1 + e2 - worst.error;
        heap.push(Panel {
            a: worst.a,
            b: mid,
            value: v1,
            error: e1,
        });
        heap.push(Panel {
            a: mid,
            b: worst.b,
            value: v2,
            error: e2,
        });
        splits += 1;
    }
    // Re-sum to shed the drift of the running total.
    let total: f64 = heap.iter().map(|p| p.value).sum();
    Ok(sign * total)
}

/// Integral of `gaussian(y; center, sigma) * weight(y)` over
/// `[domain_lo, domain_hi]`, truncated to `center ± tail_sigmas * sigma`.
/// The Gaussian normalisation `1 / sqrt(2 pi sigma^2)` is included; `kinks`
/// are points where `weight` is not smooth and become panel breakpoints.
pub(crate) fn gaussian_window_integral(
    center: f64,
    sigma: f64,
    domain_lo: f64,
    domain_hi: f64,
    kinks: &[f64],
    weight: impl Fn(f64) -> f64,
    cfg: &QuadratureConfig,
) -> Result<f64> {
    let lo = domain_lo.max(center - cfg.tail_sigmas * sigma);
    let hi = domain_hi.min(center + cfg.tail_sigmas * sigma);
    if lo >= hi {
        return Ok(0.0);
    }
    let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma).sqrt();
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    let g = |y: f64| {
        let d = y - center;
        norm * (-d * d * inv2s2).exp() * weight(y)
    };
    let mut cuts = vec![lo];
    cuts.extend(kinks.iter().copied().filter(|&k| k > lo && k < hi));
    cuts.push(hi);
    let mut total = 0.0;
    for w in cuts.windows(2) {
        total += integrate(g, w[0], w[1], 8, cfg)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn polynomials_are_exact() {
        let cfg = QuadratureConfig::default();
        let v = integrate(|x| x.powi(5) - 3.0 * x * x + 1.0, -1.0, 2.0, 1, &cfg).unwrap();
        assert_abs_diff_eq!(v, 63.0 / 6.0 - 9.0 + 3.0, epsilon = 1e-12);
    }

    #[test]
    fn peaked_integrand_is_resolved() {
        let cfg = QuadratureConfig::default();
        let s = 1e-3;
        let v = gaussian_window_integral(0.3, s, -5.0, 5.0, &[], |_| 1.0, &cfg).unwrap();
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
        let half = gaussian_window_integral(0.3, s, 0.3, 5.0, &[], |_| 1.0, &cfg).unwrap();
        assert_abs_diff_eq!(half, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn reversed_limits_flip_sign() {
        let cfg = QuadratureConfig::default();
        let a = integrate(f64::exp, 0.0, 1.0, 1, &cfg).unwrap();
        let b = integrate(f64::exp, 1.0, 0.0, 1, &cfg).unwrap();
        assert_abs_diff_eq!(a, -b, epsilon = 1e-15);
        assert_abs_diff_eq!(a, std::f64::consts::E - 1.0, epsilon = 1e-13);
    }

    #[test]
    fn subdivision_cap_is_reported() {
        let cfg = QuadratureConfig {
            max_subdivisions: 2,
            ..Default::default()
        };
        let err = integrate(|x: f64| x.abs().sqrt(), -1.0, 1.3, 1, &cfg).unwrap_err();
        assert!(matches!(err, Error::Quadrature { .. }));
    }

    #[test]
    fn config_validation() {
        assert!(QuadratureConfig::default().validate().is_ok());
        let bad = QuadratureConfig {
            tail_sigmas: 3.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
