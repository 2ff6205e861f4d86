//! Matérn covariance with order one, built on the modified Bessel function K1.

use crate::error::{FaceError, Result};

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Modified Bessel function of the second kind, order one, for `x > 0`.
pub fn bessel_k1(x: f64) -> f64 {
    assert!(x > 0.0, "K1 is only defined for positive arguments");
    if x <= 2.0 {
        k1_series(x)
    } else {
        k1_integral(x)
    }
}

// K1(x) = 1/x + ln(x/2) I1(x) - (x/4) sum_k [psi(k+1) + psi(k+2)] (x^2/4)^k / (k! (k+1)!)
fn k1_series(x: f64) -> f64 {
    let y = 0.25 * x * x;
    let mut term = 1.0; // (x^2/4)^k / (k! (k+1)!)
    let mut harmonic = 0.0; // H_k
    let mut i1 = 0.0;
    let mut rest = 0.0;
    for k in 0..60 {
        let kf = k as f64;
        let psi_k1 = -EULER_GAMMA + harmonic;
        let psi_k2 = psi_k1 + 1.0 / (kf + 1.0);
        i1 += term;
        rest += (psi_k1 + psi_k2) * term;
        if term < 1e-18 * i1 {
            break;
        }
        harmonic += 1.0 / (kf + 1.0);
        term *= y / ((kf + 1.0) * (kf + 2.0));
    }
    let i1 = 0.5 * x * i1;
    1.0 / x + (0.5 * x).ln() * i1 - 0.25 * x * rest
}

// K1(x) = int_0^inf exp(-x cosh t) cosh t dt; the trapezoid rule converges
// geometrically for this analytic, doubly decaying integrand.
fn k1_integral(x: f64) -> f64 {
    let h = 0.02;
    let mut sum = 0.5 * (-x).exp();
    let mut k = 1;
    loop {
        let c = (k as f64 * h).cosh();
        let v = (-x * c).exp() * c;
        sum += v;
        if v < 1e-20 * sum {
            break;
        }
        k += 1;
    }
    sum * h
}

/// Matérn correlation at distance `d` with range `phi` and order `nu`.
/// Only `nu = 1` is supported: `C(d) = x K1(x)` with `x = sqrt(2) d / phi`.
pub fn matern_cov(d: f64, phi: f64, nu: f64) -> Result<f64> {
    if nu != 1.0 {
        return Err(FaceError::UnsupportedOrder(nu));
    }
    if !(phi > 0.0) || !(d >= 0.0) {
        return Err(FaceError::InvalidInput(format!("Matérn needs d >= 0 and phi > 0, got d={d}, phi={phi}")));
    }
    let x = std::f64::consts::SQRT_2 * d / phi;
    if x == 0.0 {
        return Ok(1.0);
    }
    if x < 1e-8 {
        // x K1(x) = 1 + O(x^2 ln x)
        return Ok(1.0);
    }
    Ok(x * bessel_k1(x))
}
