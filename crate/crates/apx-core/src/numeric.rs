//! Small numerical helpers: combinatorial factors, normal tail, rational
//! span arithmetic, and an embedded Runge-Kutta 4(5) integrator.

use crate::error::{ApxError, Result};
use nalgebra::DVector;

/// Rising factorial (x)_n = x (x+1) ... (x+n-1), with (x)_0 = 1.
pub fn pochhammer(x: f64, n: u32) -> f64 {
    let mut p = 1.0;
    for i in 0..n {
        p *= x + i as f64;
    }
    p
}

pub fn factorial(n: u32) -> f64 {
    (2..=n as u64).map(|k| k as f64).product()
}

pub fn binomial(n: u32, k: u32) -> f64 {
    if k > n {
        return 0.0;
    }
    factorial(n) / (factorial(k) * factorial(n - k))
}

/// Double factorial n!!, with the empty products (-1)!! = 0!! = 1.
pub fn double_factorial(n: i64) -> f64 {
    let mut p = 1.0;
    let mut k = n;
    while k > 1 {
        p *= k as f64;
        k -= 2;
    }
    p
}

/// Upper tail of the standard normal distribution.
pub fn normal_upper_tail(y: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(y / std::f64::consts::SQRT_2)
}

/// Best rational p/q with q <= max_den approximating x, via continued fractions.
/// Returns None when no denominator within range reproduces x to `tol` (relative).
pub fn rational_approx(x: f64, max_den: u64, tol: f64) -> Option<(u64, u64)> {
    assert!(x > 0.0);
    let (mut a, mut b) = (x.floor() as u64, 1u64);
    let (mut p0, mut q0, mut p1, mut q1) = (1u64, 0u64, a, 1u64);
    let mut frac = x - a as f64;
    for _ in 0..64 {
        if (x - p1 as f64 / q1 as f64).abs() <= tol * x.max(1.0) {
            return Some((p1, q1));
        }
        if frac.abs() < 1e-15 {
            break;
        }
        let inv = 1.0 / frac;
        a = inv.floor() as u64;
        frac = inv - a as f64;
        let p2 = a.checked_mul(p1)?.checked_add(p0)?;
        let q2 = a.checked_mul(q1)?.checked_add(q0)?;
        if q2 > max_den {
            break;
        }
        p0 = p1;
        q0 = q1;
        p1 = p2;
        q1 = q2;
        b = b.max(1);
    }
    if (x - p1 as f64 / q1 as f64).abs() <= tol * x.max(1.0) {
        Some((p1, q1))
    } else {
        None
    }
}

pub fn gcd_u64(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Greatest common span of two positive lattice spans, treating the ratio as a
/// rational with denominator <= 4096. Errors when the ratio is not recognizably
/// rational at 1e-9 relative accuracy.
pub fn span_gcd(a: f64, b: f64) -> Result<f64> {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let (p, q) = rational_approx(hi / lo, 4096, 1e-9).ok_or(ApxError::IncommensurableLattices)?;
    let g = gcd_u64(p, q);
    // hi/lo = p/q in lowest terms => gcd(hi, lo) = lo / (q/g)
    Ok(lo / (q / g) as f64)
}

/// Outcome of an adaptive integration run.
pub struct OdeRun {
    pub t_end: f64,
    pub y: DVector<f64>,
    pub steps: usize,
}

/// Dormand-Prince 5(4) with PI-free elementary step control.
///
/// Integrates dy/dt = f(t, y) from t0 to t1 with mixed absolute/relative
/// tolerance `tol` per component. `observe` runs after every accepted step
/// and may stop the integration early by returning false.
pub fn rk45<F, O>(
    f: F,
    t0: f64,
    t1: f64,
    y0: DVector<f64>,
    tol: f64,
    mut observe: O,
) -> Result<OdeRun>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
    O: FnMut(f64, &DVector<f64>) -> bool,
{
    const A21: f64 = 1.0 / 5.0;
    const A31: f64 = 3.0 / 40.0;
    const A32: f64 = 9.0 / 40.0;
    const A41: f64 = 44.0 / 45.0;
    const A42: f64 = -56.0 / 15.0;
    const A43: f64 = 32.0 / 9.0;
    const A51: f64 = 19372.0 / 6561.0;
    const A52: f64 = -25360.0 / 2187.0;
    const A53: f64 = 64448.0 / 6561.0;
    const A54: f64 = -212.0 / 729.0;
    const A61: f64 = 9017.0 / 3168.0;
    const A62: f64 = -355.0 / 33.0;
    const A63: f64 = 46732.0 / 5247.0;
    const A64: f64 = 49.0 / 176.0;
    const A65: f64 = -5103.0 / 18656.0;
    const B1: f64 = 35.0 / 384.0;
    const B3: f64 = 500.0 / 1113.0;
    const B4: f64 = 125.0 / 192.0;
    const B5: f64 = -2187.0 / 6784.0;
    const B6: f64 = 11.0 / 84.0;
    // embedded 4th-order weights
    const E1: f64 = 5179.0 / 57600.0;
    const E3: f64 = 7571.0 / 16695.0;
    const E4: f64 = 393.0 / 640.0;
    const E5: f64 = -92097.0 / 339200.0;
    const E6: f64 = 187.0 / 2100.0;
    const E7: f64 = 1.0 / 40.0;

    let mut t = t0;
    let mut y = y0;
    let mut h = ((t1 - t0) / 100.0).min(0.1).max(1e-6);
    let mut k1 = f(t, &y);
    let mut steps = 0usize;
    let hmin = 1e-14 * (t1 - t0).abs().max(1.0);

    while t < t1 {
        if h < hmin {
            return Err(ApxError::StiffnessFailure { t });
        }
        if t + h > t1 {
            h = t1 - t;
        }
        let k2 = f(t + A21 * h, &(&y + &k1 * (A21 * h)));
        let k3 = f(t + 0.3 * h, &(&y + &k1 * (A31 * h) + &k2 * (A32 * h)));
        let k4 = f(
            t + 0.8 * h,
            &(&y + &k1 * (A41 * h) + &k2 * (A42 * h) + &k3 * (A43 * h)),
        );
        let k5 = f(
            t + 8.0 / 9.0 * h,
            &(&y + &k1 * (A51 * h) + &k2 * (A52 * h) + &k3 * (A53 * h) + &k4 * (A54 * h)),
        );
        let y6 = &y
            + &k1 * (A61 * h)
            + &k2 * (A62 * h)
            + &k3 * (A63 * h)
            + &k4 * (A64 * h)
            + &k5 * (A65 * h);
        let k6 = f(t + h, &y6);
        let y5 = &y + (&k1 * B1 + &k3 * B3 + &k4 * B4 + &k5 * B5 + &k6 * B6) * h;
        let k7 = f(t + h, &y5);
        let y4 = &y + (&k1 * E1 + &k3 * E3 + &k4 * E4 + &k5 * E5 + &k6 * E6 + &k7 * E7) * h;

        let mut err: f64 = 0.0;
        for i in 0..y.len() {
            let sc = tol + tol * y5[i].abs().max(y[i].abs());
            err = err.max((y5[i] - y4[i]).abs() / sc);
        }
        if err <= 1.0 {
            t += h;
            y = y5;
            k1 = k7; // FSAL
            steps += 1;
            if !observe(t, &y) {
                break;
            }
        }
        let fac = (0.9 * err.powf(-0.2)).clamp(0.2, 5.0);
        h *= fac;
    }
    Ok(OdeRun { t_end: t, y, steps })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pochhammer_zero_base() {
        assert_eq!(pochhammer(0.0, 0), 1.0);
        assert_eq!(pochhammer(0.0, 3), 0.0);
        assert_eq!(pochhammer(2.0, 3), 2.0 * 3.0 * 4.0);
    }

    #[test]
    fn double_factorial_small() {
        assert_eq!(double_factorial(-1), 1.0);
        assert_eq!(double_factorial(0), 1.0);
        assert_eq!(double_factorial(5), 15.0);
        assert_eq!(double_factorial(6), 48.0);
    }

    #[test]
    fn normal_tail_values() {
        assert!((normal_upper_tail(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_upper_tail(1.96) - 0.024997895).abs() < 1e-8);
    }

    #[test]
    fn span_gcd_integers() {
        assert!((span_gcd(2.0, 3.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((span_gcd(1.5, 1.0).unwrap() - 0.5).abs() < 1e-12);
        assert!((span_gcd(0.2, 0.3).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn span_gcd_irrational_ratio() {
        assert!(matches!(
            span_gcd(std::f64::consts::SQRT_2, 1.0),
            Err(ApxError::IncommensurableLattices)
        ));
    }

    #[test]
    fn rk45_exponential_decay() {
        let run = rk45(
            |_, y| -y * 2.0,
            0.0,
            3.0,
            DVector::from_element(1, 1.0),
            1e-10,
            |_, _| true,
        )
        .unwrap();
        assert!((run.y[0] - (-6.0f64).exp()).abs() < 1e-9);
    }
}
