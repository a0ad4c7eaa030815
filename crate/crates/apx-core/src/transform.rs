//! Tilt machinery: the implicit function u*(theta), the cumulant limit
//! eta(theta), their theta-derivatives, and the saddlepoint solve
//! eta'(h) = R with the rate function I(R) = hR - eta(h).
//!
//! u*(theta) is the solution branch through u*(0) = 0 of
//!
//! ```text
//! sum_i u_i beta_{i,j} - (1/2) u^T alpha^j u
//!        - sum_i (E[e^{(theta + u^T gamma_i) Z_i}] - 1) kappa_{i,j} = 0
//! ```
//!
//! tracked by parameter continuation in theta with a damped Newton corrector.
//! Derivatives of u* solve linear systems in the same Jacobian, with the
//! lower-order contributions assembled by Faa di Bruno partition sums.

use crate::error::{ApxError, Result};
use crate::expansion::partitions;
use crate::model::AffineModel;
use crate::numeric::{binomial, factorial};
use nalgebra::{DMatrix, DVector};

pub const NEWTON_TOL: f64 = 1e-12;
pub const NEWTON_MAX_ITERS: usize = 50;
pub const CONTINUATION_STEP: f64 = 0.05;
pub const CONTINUATION_MIN_STEP: f64 = 1e-6;
pub const SADDLE_REL_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct TiltSolution {
    pub theta: f64,
    pub u_star: DVector<f64>,
    pub eta: f64,
    pub newton_iters: usize,
    pub residual: f64,
}

/// Saddlepoint package: everything the expansion coefficients consume.
#[derive(Debug, Clone)]
pub struct CumulantPack {
    /// Target level R with eta'(h) = R.
    pub level: f64,
    pub h: f64,
    /// [eta, eta', eta'', eta''', eta''''] at h.
    pub eta_derivs: [f64; 5],
    /// Rate function I(R) = hR - eta(h).
    pub rate: f64,
    /// [u*, (u*)', ..., (u*)''''] at h.
    pub u_star_derivs: Vec<DVector<f64>>,
}

/// Residual of the tilt system at (theta, u).
fn residual(model: &AffineModel, theta: f64, u: &DVector<f64>) -> Result<DVector<f64>> {
    let mut f = model.beta.transpose() * u;
    for j in 0..model.d {
        f[j] -= 0.5 * (&model.alpha[j] * u).dot(u);
    }
    for i in 0..model.n {
        let s = theta + u.dot(&model.gamma_row(i));
        let m0 = model.marks[i]
            .mgf(s)
            .map_err(|e| e.with_event_type(i))?;
        for j in 0..model.d {
            f[j] -= (m0 - 1.0) * model.kappa[(i, j)];
        }
    }
    Ok(f)
}

/// Jacobian of the residual with respect to u.
fn jacobian(model: &AffineModel, theta: f64, u: &DVector<f64>) -> Result<DMatrix<f64>> {
    let d = model.d;
    let mut jac = model.beta.transpose();
    for j in 0..d {
        let au = &model.alpha[j] * u;
        for l in 0..d {
            jac[(j, l)] -= au[l];
        }
    }
    for i in 0..model.n {
        let g = model.gamma_row(i);
        let s = theta + u.dot(&g);
        let m1 = model.marks[i]
            .tilted_moment(1, s)
            .map_err(|e| e.with_event_type(i))?;
        for j in 0..d {
            let k = model.kappa[(i, j)];
            if k != 0.0 {
                for l in 0..d {
                    jac[(j, l)] -= k * m1 * g[l];
                }
            }
        }
    }
    Ok(jac)
}

/// Damped Newton iteration at fixed theta from the warm start `u`.
fn newton_at(
    model: &AffineModel,
    theta: f64,
    u: &mut DVector<f64>,
    iters: &mut usize,
) -> Result<f64> {
    let mut f = residual(model, theta, u)?;
    let mut norm = f.amax();
    for _ in 0..NEWTON_MAX_ITERS {
        if norm <= NEWTON_TOL {
            return Ok(norm);
        }
        *iters += 1;
        let jac = jacobian(model, theta, u)?;
        let step = jac
            .lu()
            .solve(&f)
            .ok_or(ApxError::JacobianSingular { theta })?;
        let mut damping = 1.0;
        loop {
            let candidate = &*u - &step * damping;
            match residual(model, theta, &candidate) {
                Ok(fc) => {
                    let nc = fc.amax();
                    if nc < norm || nc <= NEWTON_TOL {
                        *u = candidate;
                        f = fc;
                        norm = nc;
                        break;
                    }
                }
                Err(_) => {} // stepped out of the MGF domain; shrink
            }
            damping *= 0.5;
            if damping < 1e-6 {
                return Err(ApxError::JacobianSingular { theta });
            }
        }
    }
    if norm <= NEWTON_TOL {
        Ok(norm)
    } else {
        Err(ApxError::JacobianSingular { theta })
    }
}

/// Branch tracker: continuation state along theta, reusable across calls so
/// repeated solves (saddle search, FD stencils) warm-start from the last tilt.
pub(crate) struct TiltTracker<'m> {
    model: &'m AffineModel,
    pub theta: f64,
    pub u: DVector<f64>,
    pub newton_iters: usize,
}

impl<'m> TiltTracker<'m> {
    pub fn new(model: &'m AffineModel) -> Self {
        TiltTracker {
            model,
            theta: 0.0,
            u: DVector::zeros(model.d),
            newton_iters: 0,
        }
    }

    /// Continue the branch to `target`, halving the step on failure.
    pub fn advance_to(&mut self, target: f64) -> Result<f64> {
        let mut residual_norm = residual(self.model, self.theta, &self.u)?.amax();
        while (self.theta - target).abs() > 0.0 {
            let remaining = target - self.theta;
            let mut step = remaining.abs().min(CONTINUATION_STEP) * remaining.signum();
            loop {
                let trial_theta = self.theta + step;
                let mut trial_u = self.u.clone();
                match newton_at(self.model, trial_theta, &mut trial_u, &mut self.newton_iters) {
                    Ok(norm) => {
                        self.theta = trial_theta;
                        self.u = trial_u;
                        residual_norm = norm;
                        break;
                    }
                    Err(e) => {
                        step *= 0.5;
                        if step.abs() < CONTINUATION_MIN_STEP {
                            return Err(match e {
                                ApxError::JacobianSingular { .. } => ApxError::BeyondCriticalTilt {
                                    target,
                                    last_theta: self.theta,
                                },
                                other => other,
                            });
                        }
                    }
                }
            }
        }
        Ok(residual_norm)
    }
}

/// Solve the tilt system at `theta` by continuation from u*(0) = 0.
pub fn solve_u_star(model: &AffineModel, theta: f64) -> Result<TiltSolution> {
    let mut tracker = TiltTracker::new(model);
    let residual = tracker.advance_to(theta)?;
    let eta_val = eta(model, theta, &tracker.u)?;
    Ok(TiltSolution {
        theta,
        u_star: tracker.u,
        eta: eta_val,
        newton_iters: tracker.newton_iters,
        residual,
    })
}

/// eta(theta) = u*(theta)^T b + sum_i lambda_i (E[e^{(theta+u*^T gamma_i) Z_i}] - 1).
pub fn eta(model: &AffineModel, theta: f64, u_star: &DVector<f64>) -> Result<f64> {
    let mut v = u_star.dot(&model.b);
    for i in 0..model.n {
        if model.lambda[i] != 0.0 {
            let s = theta + u_star.dot(&model.gamma_row(i));
            let m0 = model.marks[i]
                .mgf(s)
                .map_err(|e| e.with_event_type(i))?;
            v += model.lambda[i] * (m0 - 1.0);
        }
    }
    Ok(v)
}

/// Faa di Bruno sum for d^k/dtheta^k of E[e^{s_i(theta) Z_i}] with
/// s_i = theta + u*(theta)^T gamma_i.
///
/// `sig[l]` must hold the l-th derivative of s_i (sig[1] = 1 + u'·gamma_i,
/// sig[l] = u^(l)·gamma_i for l >= 2). With `skip_top` the partition
/// (0,...,0,1) is omitted so the k-th order unknown can sit on the left-hand
/// side of its linear system.
fn mark_theta_derivative(
    model: &AffineModel,
    event: usize,
    s: f64,
    k: usize,
    sig: &[f64],
    skip_top: bool,
) -> Result<f64> {
    let mut total = 0.0;
    for ms in partitions(k) {
        let order: u32 = ms.iter().sum();
        if skip_top && k >= 1 && ms[k - 1] == 1 && order == 1 {
            continue;
        }
        let mut weight = factorial(k as u32);
        let mut sig_prod = 1.0;
        for (l, &m) in ms.iter().enumerate() {
            if m == 0 {
                continue;
            }
            weight /= factorial(m) * factorial((l + 1) as u32).powi(m as i32);
            sig_prod *= sig[l + 1].powi(m as i32);
        }
        let moment = model.marks[event]
            .tilted_moment(order, s)
            .map_err(|e| e.with_event_type(event))?;
        total += weight * sig_prod * moment;
    }
    Ok(total)
}

/// Derivatives [u*, (u*)', ..., (u*)^(order)] at theta, each obtained from a
/// linear solve in the Newton Jacobian.
pub fn u_star_derivatives(
    model: &AffineModel,
    theta: f64,
    order: usize,
) -> Result<Vec<DVector<f64>>> {
    let sol = solve_u_star(model, theta)?;
    u_star_derivatives_at(model, theta, &sol.u_star, order)
}

pub(crate) fn u_star_derivatives_at(
    model: &AffineModel,
    theta: f64,
    u_star: &DVector<f64>,
    order: usize,
) -> Result<Vec<DVector<f64>>> {
    let d = model.d;
    let jac = jacobian(model, theta, u_star)?;
    let lu = jac.lu();
    let mut derivs: Vec<DVector<f64>> = vec![u_star.clone()];

    for k in 1..=order {
        let mut rhs = DVector::zeros(d);
        // quadratic diffusion cross terms from orders 1..k-1
        for j in 0..d {
            for i in 1..k {
                rhs[j] += 0.5
                    * binomial(k as u32, i as u32)
                    * (&model.alpha[j] * &derivs[i]).dot(&derivs[k - i]);
            }
        }
        for i in 0..model.n {
            let g = model.gamma_row(i);
            let s = theta + u_star.dot(&g);
            let contribution = if k == 1 {
                // sigma' = 1 + u'·gamma; the u' part lives in the Jacobian
                model.marks[i]
                    .tilted_moment(1, s)
                    .map_err(|e| e.with_event_type(i))?
            } else {
                let mut sig = vec![0.0; k + 1];
                for l in 1..k {
                    sig[l] = derivs[l].dot(&g);
                    if l == 1 {
                        sig[l] += 1.0;
                    }
                }
                mark_theta_derivative(model, i, s, k, &sig, true)?
            };
            for j in 0..d {
                rhs[j] += model.kappa[(i, j)] * contribution;
            }
        }
        let uk = lu
            .solve(&rhs)
            .ok_or(ApxError::JacobianSingular { theta })?;
        derivs.push(uk);
    }
    Ok(derivs)
}

/// Derivatives [eta, eta', ..., eta^(order)] at theta.
pub fn eta_derivatives(model: &AffineModel, theta: f64, order: usize) -> Result<Vec<f64>> {
    let sol = solve_u_star(model, theta)?;
    eta_derivatives_at(model, theta, &sol.u_star, order)
}

pub(crate) fn eta_derivatives_at(
    model: &AffineModel,
    theta: f64,
    u_star: &DVector<f64>,
    order: usize,
) -> Result<Vec<f64>> {
    let derivs = u_star_derivatives_at(model, theta, u_star, order)?;
    let mut etas = vec![eta(model, theta, u_star)?];
    for k in 1..=order {
        let mut v = derivs[k].dot(&model.b);
        for i in 0..model.n {
            if model.lambda[i] == 0.0 {
                continue;
            }
            let g = model.gamma_row(i);
            let s = theta + u_star.dot(&g);
            let mut sig = vec![0.0; k + 1];
            for l in 1..=k {
                sig[l] = derivs[l].dot(&g);
                if l == 1 {
                    sig[l] += 1.0;
                }
            }
            v += model.lambda[i] * mark_theta_derivative(model, i, s, k, &sig, false)?;
        }
        etas.push(v);
    }
    Ok(etas)
}

/// Solve eta'(h) = R for the saddlepoint h > 0 and package the derivatives.
///
/// Walks the continuation upward from h = 0 (where eta'(0) = r < R) until the
/// level is bracketed, then runs safeguarded Newton with bisection fallback.
pub fn solve_saddlepoint(model: &AffineModel, level: f64) -> Result<CumulantPack> {
    let erg = model.ergodic_quantities()?;
    if level <= erg.r {
        return Err(ApxError::LevelBelowMean {
            level,
            mean_rate: erg.r,
        });
    }

    let eta_prime = |tracker: &mut TiltTracker, theta: f64| -> Result<f64> {
        tracker.advance_to(theta)?;
        let derivs = u_star_derivatives_at(model, theta, &tracker.u, 1)?;
        let mut v = derivs[1].dot(&model.b);
        for i in 0..model.n {
            if model.lambda[i] == 0.0 {
                continue;
            }
            let g = model.gamma_row(i);
            let s = theta + tracker.u.dot(&g);
            let m1 = model.marks[i]
                .tilted_moment(1, s)
                .map_err(|e| e.with_event_type(i))?;
            v += model.lambda[i] * m1 * (1.0 + derivs[1].dot(&g));
        }
        Ok(v)
    };

    let mut tracker = TiltTracker::new(model);
    // bracket the saddlepoint: expand hi until eta'(hi) >= R or the tilt
    // boundary cuts the search off
    let mut lo = 0.0;
    let mut flo = erg.r;
    let mut hi = CONTINUATION_STEP;
    let fhi = loop {
        match eta_prime(&mut tracker, hi) {
            Ok(v) if v >= level => break v,
            Ok(v) => {
                lo = hi;
                flo = v;
                hi *= 1.5;
            }
            Err(ApxError::BeyondCriticalTilt { last_theta, .. }) => {
                // retreat just below the boundary; if eta' still below R the
                // level is unattainable
                let edge = last_theta * (1.0 - 1e-9);
                let v = eta_prime(&mut tracker, edge)?;
                if v < level {
                    return Err(ApxError::BeyondCriticalTilt {
                        target: level,
                        last_theta: edge,
                    });
                }
                hi = edge;
                break v;
            }
            Err(e) => return Err(e),
        }
    };
    let _ = fhi;

    // safeguarded Newton on eta'(h) - R
    let mut h = lo + (level - flo) / ((fhi - flo).max(1e-300)) * (hi - lo);
    if !(lo..=hi).contains(&h) {
        h = 0.5 * (lo + hi);
    }
    let tol = SADDLE_REL_TOL * level.abs().max(1.0);
    for _ in 0..100 {
        tracker.advance_to(h)?;
        let derivs = eta_derivatives_at(model, h, &tracker.u, 2)?;
        let diff = derivs[1] - level;
        if diff.abs() <= tol {
            let etas = eta_derivatives_at(model, h, &tracker.u, 4)?;
            let u_derivs = u_star_derivatives_at(model, h, &tracker.u, 4)?;
            return Ok(CumulantPack {
                level,
                h,
                eta_derivs: [etas[0], etas[1], etas[2], etas[3], etas[4]],
                rate: h * level - etas[0],
                u_star_derivs: u_derivs,
            });
        }
        if diff > 0.0 {
            hi = h;
        } else {
            lo = h;
        }
        let newton = h - diff / derivs[2];
        h = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    Err(ApxError::BeyondCriticalTilt {
        target: level,
        last_theta: h,
    })
}

impl ApxError {
    pub(crate) fn with_event_type(self, event: usize) -> ApxError {
        match self {
            ApxError::MgfDomainExceeded { tilt, bound, .. } => ApxError::MgfDomainExceeded {
                event_type: event,
                tilt,
                bound,
            },
            other => other,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testmodels::{compound_poisson_exp, lattice3d, poisson_unit};

    #[test]
    fn kappa_zero_keeps_u_star_at_origin() {
        let m = poisson_unit();
        let sol = solve_u_star(&m, 0.8).unwrap();
        assert!(sol.u_star.amax() < 1e-14);
        assert_eq!(sol.residual, 0.0);
    }

    #[test]
    fn theta_zero_is_branch_anchor() {
        let m = lattice3d();
        let sol = solve_u_star(&m, 0.0).unwrap();
        assert!(sol.u_star.amax() == 0.0);
        assert!(sol.eta.abs() < 1e-15);
    }

    #[test]
    fn poisson_eta_is_exponential() {
        let m = poisson_unit();
        for theta in [0.2, 0.5, 1.0] {
            let sol = solve_u_star(&m, theta).unwrap();
            assert!((sol.eta - (theta.exp() - 1.0)).abs() < 1e-12);
            let etas = eta_derivatives(&m, theta, 4).unwrap();
            for k in 1..=4 {
                assert!((etas[k] - theta.exp()).abs() < 1e-12, "k = {k}");
            }
        }
    }

    #[test]
    fn compound_poisson_cumulant() {
        let m = compound_poisson_exp();
        let sol = solve_u_star(&m, 0.5).unwrap();
        assert!((sol.eta - 1.0).abs() < 1e-12); // 0.5 / (1 - 0.5)
        let etas = eta_derivatives(&m, 0.0, 2).unwrap();
        assert!((etas[2] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn residual_substitution_on_fixture() {
        let m = lattice3d();
        let sol = solve_u_star(&m, 0.06).unwrap();
        let f = residual(&m, 0.06, &sol.u_star).unwrap();
        assert!(f.amax() <= 1e-12);
    }

    #[test]
    fn poisson_saddlepoint_closed_form() {
        let m = poisson_unit();
        let pack = solve_saddlepoint(&m, 2.0).unwrap();
        assert!((pack.h - 2.0f64.ln()).abs() < 1e-10);
        assert!((pack.rate - (2.0 * 2.0f64.ln() - 1.0)).abs() < 1e-10);
        assert!((pack.eta_derivs[1] - 2.0).abs() < 2e-10);
        assert!(pack.eta_derivs[2] > 0.0);
    }

    #[test]
    fn level_below_mean_is_rejected() {
        let m = lattice3d();
        assert!(matches!(
            solve_saddlepoint(&m, 10.0),
            Err(ApxError::LevelBelowMean { .. })
        ));
    }

    #[test]
    fn degenerate_level_limit() {
        let m = poisson_unit();
        let pack = solve_saddlepoint(&m, 1.0 + 1e-6).unwrap();
        assert!(pack.h < 2e-6);
        assert!(pack.rate < 1e-11);
    }

    #[test]
    fn eta_prime_monotone_along_continuation() {
        let m = lattice3d();
        let mut last = 0.0;
        for k in 1..=8 {
            let theta = 0.01 * k as f64;
            let etas = eta_derivatives(&m, theta, 1).unwrap();
            assert!(etas[1] > last, "eta' not increasing at theta = {theta}");
            last = etas[1];
        }
    }
}
