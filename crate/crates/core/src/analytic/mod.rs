//! Closed-form kernels and quadrature oracles.
//!
//! Only the free case `V = 0` has an analytic kernel here: `h(s, x, t, y)` is
//! the Gaussian density with variance `hbar (t - s)`. The worked-example
//! functions in [`example`] evaluate the image-method integrals for the
//! half-line obstacle problems and their whole-line counterparts.

pub mod quadrature;
pub mod example;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use quadrature::{integrate, QuadratureConfig};
pub use example::{
    example_classical_eta, example_classical_eta_star, example_drift_backward, example_drift_forward,
    example_eta_backward, example_eta_forward, ExampleOracle,
};

/// Which Hamiltonian the kernel belongs to. Only `V = 0` is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum KernelConvention {
    #[default]
    VZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub hbar: f64,
    #[serde(default)]
    pub convention: KernelConvention,
}

impl KernelParams {
    pub fn new(hbar: f64) -> Result<Self> {
        if !(hbar > 0.0 && hbar.is_finite()) {
            return Err(Error::InvalidArgument(format!("hbar must be > 0, got {hbar}")));
        }
        Ok(Self {
            hbar,
            convention: KernelConvention::VZero,
        })
    }
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

/// `ln h(s, x, t, y)` for `t > s`.
pub fn log_heat_kernel(s: f64, x: f64, t: f64, y: f64, p: &KernelParams) -> Result<f64> {
    if !(t > s) {
        return Err(Error::InvalidArgument(format!(
            "heat kernel needs t > s, got s={s}, t={t}"
        )));
    }
    let var = p.hbar * (t - s);
    let d = x - y;
    Ok(-LN_SQRT_2PI - 0.5 * var.ln() - d * d / (2.0 * var))
}

/// Free heat kernel `(2 pi hbar (t-s))^{-1/2} exp(-(x-y)^2 / (2 hbar (t-s)))`.
pub fn heat_kernel(s: f64, x: f64, t: f64, y: f64, p: &KernelParams) -> Result<f64> {
    log_heat_kernel(s, x, t, y, p).map(f64::exp)
}

/// Density in `y` of the Bernstein transition `h(s,x,t,y) h(t,y,u,z) / h(s,x,u,z)`.
pub fn bernstein_transition(
    s: f64,
    x: f64,
    t: f64,
    y: f64,
    u: f64,
    z: f64,
    p: &KernelParams,
) -> Result<f64> {
    if !(s < t && t < u) {
        return Err(Error::InvalidArgument(format!(
            "Bernstein transition needs s < t < u, got s={s}, t={t}, u={u}"
        )));
    }
    let l = log_heat_kernel(s, x, t, y, p)? + log_heat_kernel(t, y, u, z, p)?
        - log_heat_kernel(s, x, u, z, p)?;
    Ok(l.exp())
}

/// Mean and variance of the Gaussian bridge from `(s, x)` to `(u, z)` at time `t`.
pub fn bridge_moments(s: f64, x: f64, t: f64, u: f64, z: f64, hbar: f64) -> (f64, f64) {
    let w = (t - s) / (u - s);
    (x + w * (z - x), hbar * (t - s) * (u - t) / (u - s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn p1() -> KernelParams {
        KernelParams::new(1.0).unwrap()
    }

    #[test]
    fn standard_normal_values() {
        assert_abs_diff_eq!(heat_kernel(0.0, 0.0, 1.0, 0.0, &p1()).unwrap(), 0.398_942_280_401_432_7, epsilon = 1e-15);
        assert_abs_diff_eq!(heat_kernel(0.0, 0.0, 1.0, 1.0, &p1()).unwrap(), 0.241_970_724_519_143_37, epsilon = 1e-15);
        assert!(heat_kernel(1.0, 0.0, 1.0, 0.0, &p1()).is_err());
        assert!(KernelParams::new(0.0).is_err());
    }

    #[test]
    fn kernel_normalises_on_truncated_domain() {
        let cfg = QuadratureConfig::default();
        let p = KernelParams::new(0.7).unwrap();
        let v = integrate(|y| heat_kernel(0.0, 0.3, 0.8, y, &p).unwrap(), -8.0, 8.0, 8, &cfg).unwrap();
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn bridge_peak_and_normalisation() {
        // completing the square in h h / h: mean 0, variance 1/4 -> peak sqrt(2/pi)
        let peak = bernstein_transition(0.0, 0.0, 0.5, 0.0, 1.0, 0.0, &p1()).unwrap();
        assert_abs_diff_eq!(peak, (2.0 / std::f64::consts::PI).sqrt(), epsilon = 1e-14);
        let cfg = QuadratureConfig::default();
        let mass = integrate(
            |y| bernstein_transition(-0.2, 0.4, 0.1, y, 0.9, -1.1, &p1()).unwrap(),
            -10.0,
            10.0,
            8,
            &cfg,
        )
        .unwrap();
        assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-10);
        assert!(bernstein_transition(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, &p1()).is_err());
    }

    #[test]
    fn symmetric_endpoints_give_symmetric_density() {
        let c = 0.7;
        for d in [0.1, 0.4, 1.3] {
            let a = bernstein_transition(0.0, c, 0.5, c + d, 1.0, c, &p1()).unwrap();
            let b = bernstein_transition(0.0, c, 0.5, c - d, 1.0, c, &p1()).unwrap();
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn bridge_density_matches_moments() {
        let (m, v) = bridge_moments(0.0, 0.2, 0.3, 1.2, -0.6, 0.8);
        let p = KernelParams::new(0.8).unwrap();
        for y in [-1.0, -0.2, 0.0, 0.5] {
            let q = bernstein_transition(0.0, 0.2, 0.3, y, 1.2, -0.6, &p).unwrap();
            let g = (-(y - m) * (y - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
            assert_abs_diff_eq!(q, g, epsilon = 1e-13);
        }
    }

    proptest! {
        #[test]
        fn chapman_kolmogorov(s in -1.0f64..0.0, dt1 in 0.05f64..1.0, dt2 in 0.05f64..1.0, x in -2.0f64..2.0, z in -2.0f64..2.0) {
            let p = p1();
            let (t, u) = (s + dt1, s + dt1 + dt2);
            let cfg = QuadratureConfig::default();
            let v = integrate(|y| heat_kernel(s, x, t, y, &p).unwrap() * heat_kernel(t, y, u, z, &p).unwrap(), -15.0, 15.0, 16, &cfg).unwrap();
            let direct = heat_kernel(s, x, u, z, &p).unwrap();
            prop_assert!((v - direct).abs() <= 1e-10 * (1.0 + direct));
        }

        #[test]
        fn kernel_positive_and_symmetric(x in -5.0f64..5.0, y in -5.0f64..5.0, dt in 0.01f64..3.0) {
            let p = p1();
            let a = heat_kernel(0.0, x, dt, y, &p).unwrap();
            let b = heat_kernel(0.0, y, dt, x, &p).unwrap();
            prop_assert!(a > 0.0);
            prop_assert_eq!(a, b);
        }
    }
}
