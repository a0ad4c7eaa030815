//! The mod-phi limiting function psi and its derivatives.
//!
//! Under the tilted measure the state stays affine with parameters
//! (a, alpha, b, beta*, lambda*, kappa*, gamma, tilted marks), and
//! E[e^{-delta.X(t)}] = exp(A(t).x + B(t)) with the Riccati system
//!
//! ```text
//! dA_j/dt = -(beta*^T A)_j + (1/2) A^T alpha^j A
//!           + sum_i kappa_{i,j} [ M_i(A.g_i + w_i) - M_i(w_i) ]
//! dB/dt   = b.A + (1/2) A^T a A + sum_i lambda_i [ M_i(A.g_i + w_i) - M_i(w_i) ]
//! ```
//!
//! where w_i = theta + delta.g_i, M_i is the mark MGF of type i, A(0) = -delta
//! and B(0) = 0. The limit B(inf) at delta = u*(theta) yields
//! psi(theta) = exp(u*(theta).x0 + B(inf)).
//!
//! psi' and psi'' come either from Richardson-extrapolated finite differences
//! of psi (production default) or from forward sensitivity ODEs over the
//! joint parameter (theta, delta), which also covers the variation of beta*
//! through delta. `SensitivityOdeAsPrinted` drops that beta* variation,
//! matching the recursion exactly as published; it is kept because the
//! published first-order lattice table values were generated with it.

use crate::error::{ApxError, Result};
use crate::model::{AffineModel, MarkLaw};
use crate::numeric::rk45;
use crate::transform::{solve_u_star, u_star_derivatives_at};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::cell::RefCell;

pub const DEFAULT_ODE_TOL: f64 = 1e-10;

/// Affine parameters of the process under the exponentially tilted measure.
#[derive(Debug, Clone)]
pub struct TiltedDynamics {
    pub theta: f64,
    pub u_star: DVector<f64>,
    pub beta_star: DMatrix<f64>,
    pub lambda_star: DVector<f64>,
    pub kappa_star: DMatrix<f64>,
    pub marks: Vec<MarkLaw>,
}

/// beta* = beta with the I,I diagonal lowered by alpha^i_{ii} u*_i.
pub fn beta_star(model: &AffineModel, u_star: &DVector<f64>) -> DMatrix<f64> {
    let mut bs = model.beta.clone();
    for i in 0..model.m {
        bs[(i, i)] -= model.alpha[i][(i, i)] * u_star[i];
    }
    bs
}

/// Assemble the tilted dynamics (lambda*, kappa*, beta*, tilted marks).
pub fn tilt_dynamics(
    model: &AffineModel,
    theta: f64,
    u_star: &DVector<f64>,
) -> Result<TiltedDynamics> {
    let mut lambda_star = DVector::zeros(model.n);
    let mut kappa_star = DMatrix::zeros(model.n, model.d);
    let mut marks = Vec::with_capacity(model.n);
    for i in 0..model.n {
        let w = theta + u_star.dot(&model.gamma_row(i));
        let m0 = model.marks[i].mgf(w).map_err(|e| e.with_event_type(i))?;
        lambda_star[i] = model.lambda[i] * m0;
        for j in 0..model.d {
            kappa_star[(i, j)] = model.kappa[(i, j)] * m0;
        }
        marks.push(model.marks[i].tilt(w).map_err(|e| e.with_event_type(i))?);
    }
    Ok(TiltedDynamics {
        theta,
        u_star: u_star.clone(),
        beta_star: beta_star(model, u_star),
        lambda_star,
        kappa_star,
        marks,
    })
}

/// A(t) and accumulated B(t) at the stopping horizon.
#[derive(Debug, Clone)]
pub struct AbState {
    pub t: f64,
    pub a: DVector<f64>,
    pub b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiMethod {
    /// Richardson-extrapolated five-point stencils on psi itself.
    FiniteDifference,
    /// Forward sensitivity ODEs with the full parameter dependence,
    /// including the variation of beta* through delta.
    SensitivityOde,
    /// Sensitivity ODEs exactly as published (beta* held fixed); reproduces
    /// the published lattice-table numerics but fails the finite-difference
    /// cross-check.
    SensitivityOdeAsPrinted,
}

/// psi(h) together with its first two derivatives and provenance.
#[derive(Debug, Clone, Serialize)]
pub struct PsiPack {
    pub h: f64,
    pub psi: f64,
    pub psi_d1: f64,
    pub psi_d2: f64,
    pub method: PsiMethod,
    pub horizon: f64,
    pub ode_tol: f64,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum SensitivityMode {
    None,
    Complete,
    AsPrinted,
}

/// Solution of the (possibly sensitivity-augmented) A/B system.
struct AbSystemSolution {
    a_end: DVector<f64>,
    b_inf: f64,
    /// dB(inf)/d(delta_hat_k), k = 0 (theta) then 1..=d (delta components)
    b1: Vec<f64>,
    /// packed upper-triangular second derivatives
    b2: Vec<f64>,
    horizon: f64,
    steps: usize,
}

fn pair_index(dim: usize, k: usize, l: usize) -> usize {
    let (k, l) = if k <= l { (k, l) } else { (l, k) };
    // row-major upper triangle of a dim x dim symmetric matrix
    k * dim - k * (k - 1) / 2 + (l - k)
}

struct SystemLayout {
    d: usize,
    /// number of delta_hat parameters (d + 1), zero when no sensitivities
    npar: usize,
    npair: usize,
}

impl SystemLayout {
    fn new(d: usize, mode: SensitivityMode) -> Self {
        let npar = if mode == SensitivityMode::None { 0 } else { d + 1 };
        let npair = npar * (npar + 1) / 2;
        SystemLayout { d, npar, npair }
    }
    fn len(&self) -> usize {
        self.d + self.npar * self.d + self.npair * self.d + 1 + self.npar + self.npair
    }
    fn a(&self) -> usize {
        0
    }
    fn s(&self, k: usize) -> usize {
        self.d + k * self.d
    }
    fn s2(&self, p: usize) -> usize {
        self.d + self.npar * self.d + p * self.d
    }
    fn b(&self) -> usize {
        self.d + (self.npar + self.npair) * self.d
    }
    fn b1(&self, k: usize) -> usize {
        self.b() + 1 + k
    }
    fn b2(&self, p: usize) -> usize {
        self.b() + 1 + self.npar + p
    }
}

/// Integrate the A/B system (with optional forward sensitivities) until the
/// state has reached stationarity: |A| below tol and the B increment over the
/// last unit of time below tol.
fn integrate_system(
    model: &AffineModel,
    theta: f64,
    delta: &DVector<f64>,
    tol: f64,
    mode: SensitivityMode,
) -> Result<AbSystemSolution> {
    let d = model.d;
    let n = model.n;
    let layout = SystemLayout::new(d, mode);
    let bs = beta_star(model, delta);

    // constant tilt exponents w_i and their direction weights
    let gammas: Vec<DVector<f64>> = (0..n).map(|i| model.gamma_row(i)).collect();
    let w: Vec<f64> = (0..n).map(|i| theta + delta.dot(&gammas[i])).collect();
    for (i, wi) in w.iter().enumerate() {
        let bound = model.marks[i].mgf_sup();
        if *wi >= bound {
            return Err(ApxError::MgfDomainExceeded {
                event_type: i,
                tilt: *wi,
                bound,
            });
        }
    }
    let m0w: Vec<f64> = (0..n)
        .map(|i| model.marks[i].mgf(w[i]).map_err(|e| e.with_event_type(i)))
        .collect::<Result<_>>()?;
    let m1w: Vec<f64> = (0..n)
        .map(|i| {
            model.marks[i]
                .tilted_moment(1, w[i])
                .map_err(|e| e.with_event_type(i))
        })
        .collect::<Result<_>>()?;
    let m2w: Vec<f64> = (0..n)
        .map(|i| {
            model.marks[i]
                .tilted_moment(2, w[i])
                .map_err(|e| e.with_event_type(i))
        })
        .collect::<Result<_>>()?;

    // direction weight of parameter k in the tilt exponent: G_0 = 1 (theta),
    // G_k = gamma_{i,k-1} for the delta components
    let pdir = |i: usize, k: usize| -> f64 {
        if k == 0 {
            1.0
        } else {
            gammas[i][k - 1]
        }
    };
    let include_beta_var = mode == SensitivityMode::Complete;

    let failure: RefCell<Option<ApxError>> = RefCell::new(None);
    let rhs = |_t: f64, y: &DVector<f64>| -> DVector<f64> {
        let mut dy = DVector::zeros(layout.len());
        let a = y.rows(layout.a(), d).into_owned();

        let mut m0v = vec![0.0; n];
        let mut m1v = vec![0.0; n];
        let mut m2v = vec![0.0; n];
        for i in 0..n {
            let v = a.dot(&gammas[i]) + w[i];
            match (
                model.marks[i].tilted_moment(0, v),
                model.marks[i].tilted_moment(1, v),
                model.marks[i].tilted_moment(2, v),
            ) {
                (Ok(x0), Ok(x1), Ok(x2)) => {
                    m0v[i] = x0;
                    m1v[i] = x1;
                    m2v[i] = x2;
                }
                _ => {
                    *failure.borrow_mut() = Some(ApxError::MgfDomainExceeded {
                        event_type: i,
                        tilt: v,
                        bound: model.marks[i].mgf_sup(),
                    });
                    return dy;
                }
            }
        }

        // f_j = dA_j/dt
        for j in 0..d {
            let mut f = -(0..d).map(|l| bs[(l, j)] * a[l]).sum::<f64>();
            f += 0.5 * (&model.alpha[j] * &a).dot(&a);
            for i in 0..n {
                f += model.kappa[(i, j)] * (m0v[i] - m0w[i]);
            }
            dy[layout.a() + j] = f;
        }
        // dB/dt
        {
            let mut g = a.dot(&model.b) + 0.5 * (&model.a * &a).dot(&a);
            for i in 0..n {
                g += model.lambda[i] * (m0v[i] - m0w[i]);
            }
            dy[layout.b()] = g;
        }
        if mode == SensitivityMode::None {
            return dy;
        }

        let npar = layout.npar;
        // df/dA as a matrix and dg/dA as a vector
        let mut dfda = DMatrix::zeros(d, d);
        for j in 0..d {
            let au = &model.alpha[j] * &a;
            for l in 0..d {
                dfda[(j, l)] = -bs[(l, j)] + au[l];
            }
            for i in 0..n {
                let kij = model.kappa[(i, j)];
                if kij != 0.0 {
                    for l in 0..d {
                        dfda[(j, l)] += kij * m1v[i] * gammas[i][l];
                    }
                }
            }
        }
        let mut dgda = model.b.clone() + &model.a * &a;
        for i in 0..n {
            if model.lambda[i] != 0.0 {
                dgda += model.lambda[i] * m1v[i] * &gammas[i];
            }
        }

        let s_of = |k: usize| y.rows(layout.s(k), d).into_owned();
        let svecs: Vec<DVector<f64>> = (0..npar).map(s_of).collect();
        let gdots: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..npar).map(|k| gammas[i].dot(&svecs[k])).collect())
            .collect();

        // first-order sensitivities
        for k in 0..npar {
            let mut ds = &dfda * &svecs[k];
            for j in 0..d {
                for i in 0..n {
                    ds[j] += model.kappa[(i, j)] * (m1v[i] - m1w[i]) * pdir(i, k);
                }
            }
            if include_beta_var && k >= 1 {
                let j = k - 1;
                if j < model.m {
                    ds[j] += model.alpha[j][(j, j)] * a[j];
                }
            }
            for j in 0..d {
                dy[layout.s(k) + j] = ds[j];
            }
            let mut db1 = dgda.dot(&svecs[k]);
            for i in 0..n {
                db1 += model.lambda[i] * (m1v[i] - m1w[i]) * pdir(i, k);
            }
            dy[layout.b1(k)] = db1;
        }

        // second-order sensitivities over the upper triangle
        for k in 0..npar {
            for l in k..npar {
                let p = pair_index(npar, k, l);
                let s2 = y.rows(layout.s2(p), d).into_owned();
                let mut ds2 = &dfda * &s2;
                let mut db2 = dgda.dot(&s2);
                for j in 0..d {
                    // quadratic-in-A curvature
                    ds2[j] += (&model.alpha[j] * &svecs[k]).dot(&svecs[l]);
                }
                db2 += (&model.a * &svecs[k]).dot(&svecs[l]);
                for i in 0..n {
                    let hk = gdots[i][k];
                    let hl = gdots[i][l];
                    let cross = m2v[i] * (hk * hl + hk * pdir(i, l) + hl * pdir(i, k))
                        + (m2v[i] - m2w[i]) * pdir(i, k) * pdir(i, l);
                    for j in 0..d {
                        ds2[j] += model.kappa[(i, j)] * cross;
                    }
                    db2 += model.lambda[i] * cross;
                }
                if include_beta_var {
                    if l >= 1 {
                        let j = l - 1;
                        if j < model.m {
                            ds2[j] += model.alpha[j][(j, j)] * svecs[k][j];
                        }
                    }
                    if k >= 1 {
                        let j = k - 1;
                        if j < model.m {
                            ds2[j] += model.alpha[j][(j, j)] * svecs[l][j];
                        }
                    }
                }
                for j in 0..d {
                    dy[layout.s2(p) + j] = ds2[j];
                }
                dy[layout.b2(p)] = db2;
            }
        }
        dy
    };

    // initial state: A = -delta, dA/d(delta_k) = -e_k, everything else zero
    let mut y = DVector::zeros(layout.len());
    for j in 0..d {
        y[layout.a() + j] = -delta[j];
    }
    if mode != SensitivityMode::None {
        for k in 1..layout.npar {
            y[layout.s(k) + (k - 1)] = -1.0;
        }
    }

    // horizon cap: 200 characteristic times of beta*'s slowest eigenvalue
    let min_re = bs
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::INFINITY, f64::min);
    let horizon_cap = if min_re > 1e-3 {
        (200.0 / min_re).max(50.0)
    } else {
        200.0
    };

    let mut t = 0.0;
    let mut steps = 0usize;
    loop {
        let b_before = y[layout.b()];
        let run = rk45(&rhs, t, t + 1.0, y, tol, |_, _| true)?;
        if let Some(e) = failure.borrow_mut().take() {
            return Err(e);
        }
        t = run.t_end;
        y = run.y;
        steps += run.steps;
        let a_norm = y.rows(layout.a(), d).amax();
        let sens_norm = if mode == SensitivityMode::None {
            0.0
        } else {
            y.rows(layout.s(0), (layout.npar + layout.npair) * d).amax()
        };
        let b_inc = (y[layout.b()] - b_before).abs();
        if a_norm < tol && sens_norm < tol.max(1e-12) * 10.0 && b_inc < tol {
            break;
        }
        if t >= horizon_cap {
            return Err(ApxError::NoDecay { horizon: t });
        }
    }

    Ok(AbSystemSolution {
        a_end: y.rows(layout.a(), d).into_owned(),
        b_inf: y[layout.b()],
        b1: (0..layout.npar).map(|k| y[layout.b1(k)]).collect(),
        b2: (0..layout.npair).map(|p| y[layout.b2(p)]).collect(),
        horizon: t,
        steps,
    })
}

/// Integrate the plain A/B system; returns the terminal state and B(inf).
pub fn integrate_ab(
    model: &AffineModel,
    theta: f64,
    delta: &DVector<f64>,
    tol: f64,
) -> Result<(AbState, f64)> {
    let sol = integrate_system(model, theta, delta, tol, SensitivityMode::None)?;
    Ok((
        AbState {
            t: sol.horizon,
            a: sol.a_end,
            b: sol.b_inf,
        },
        sol.b_inf,
    ))
}

/// psi(theta) = exp(u*(theta).x0 + B(inf; theta, u*(theta))).
pub fn psi(model: &AffineModel, theta: f64) -> Result<f64> {
    let sol = solve_u_star(model, theta)?;
    let (_, b_inf) = integrate_ab(model, theta, &sol.u_star, DEFAULT_ODE_TOL)?;
    Ok((sol.u_star.dot(&model.x0) + b_inf).exp())
}

fn psi_sensitivity(model: &AffineModel, h: f64, mode: SensitivityMode) -> Result<PsiPack> {
    let sol = solve_u_star(model, h)?;
    let ud = u_star_derivatives_at(model, h, &sol.u_star, 2)?;
    let sys = integrate_system(model, h, &sol.u_star, DEFAULT_ODE_TOL, mode)?;
    let npar = model.d + 1;

    // chain rule through delta_hat(theta) = (theta, u*(theta))
    let mut uh1 = vec![1.0];
    uh1.extend(ud[1].iter().copied());
    let mut uh2 = vec![0.0];
    uh2.extend(ud[2].iter().copied());

    let mut db = 0.0;
    let mut d2b = 0.0;
    for k in 0..npar {
        db += sys.b1[k] * uh1[k];
        d2b += sys.b1[k] * uh2[k];
        for l in 0..npar {
            d2b += sys.b2[pair_index(npar, k, l)] * uh1[k] * uh1[l];
        }
    }
    let psi_val = (sol.u_star.dot(&model.x0) + sys.b_inf).exp();
    let g1 = ud[1].dot(&model.x0) + db;
    let g2 = ud[2].dot(&model.x0) + d2b;
    Ok(PsiPack {
        h,
        psi: psi_val,
        psi_d1: psi_val * g1,
        psi_d2: psi_val * (g1 * g1 + g2),
        method: if mode == SensitivityMode::Complete {
            PsiMethod::SensitivityOde
        } else {
            PsiMethod::SensitivityOdeAsPrinted
        },
        horizon: sys.horizon,
        ode_tol: DEFAULT_ODE_TOL,
    })
}

fn psi_finite_difference(model: &AffineModel, h: f64) -> Result<PsiPack> {
    let coarse = 1e-3;
    // the widest stencil point must stay inside the solvable range
    let probe = solve_u_star(model, h + 2.0 * coarse)
        .map_err(|_| ApxError::StencilOutOfDomain { theta: h })?;
    drop(probe);

    let mut horizon: f64 = 0.0;
    let mut eval = |theta: f64| -> Result<f64> {
        let sol = solve_u_star(model, theta)?;
        let sys = integrate_system(
            model,
            theta,
            &sol.u_star,
            DEFAULT_ODE_TOL,
            SensitivityMode::None,
        )?;
        horizon = horizon.max(sys.horizon);
        Ok((sol.u_star.dot(&model.x0) + sys.b_inf).exp())
    };

    // five-point stencils at delta and delta/2, Richardson-combined
    let p0 = eval(h)?;
    let mut d1 = [0.0; 2];
    let mut d2 = [0.0; 2];
    for (idx, delta) in [coarse, 0.5 * coarse].iter().enumerate() {
        let pp1 = eval(h + delta)?;
        let pm1 = eval(h - delta)?;
        let pp2 = eval(h + 2.0 * delta)?;
        let pm2 = eval(h - 2.0 * delta)?;
        d1[idx] = (-pp2 + 8.0 * pp1 - 8.0 * pm1 + pm2) / (12.0 * delta);
        d2[idx] = (-pp2 + 16.0 * pp1 - 30.0 * p0 + 16.0 * pm1 - pm2) / (12.0 * delta * delta);
    }
    Ok(PsiPack {
        h,
        psi: p0,
        psi_d1: (16.0 * d1[1] - d1[0]) / 15.0,
        psi_d2: (16.0 * d2[1] - d2[0]) / 15.0,
        method: PsiMethod::FiniteDifference,
        horizon,
        ode_tol: DEFAULT_ODE_TOL,
    })
}

/// psi with first and second derivatives at the saddlepoint h.
pub fn psi_derivatives(model: &AffineModel, h: f64, method: PsiMethod) -> Result<PsiPack> {
    match method {
        PsiMethod::FiniteDifference => psi_finite_difference(model, h),
        PsiMethod::SensitivityOde => psi_sensitivity(model, h, SensitivityMode::Complete),
        PsiMethod::SensitivityOdeAsPrinted => {
            psi_sensitivity(model, h, SensitivityMode::AsPrinted)
        }
    }
}

/// Third and fourth psi derivatives by central differences (experimental
/// order-2 support; precision is limited by the stencil).
pub fn psi_higher_derivatives(model: &AffineModel, h: f64) -> Result<(f64, f64)> {
    let delta = 2e-3;
    let eval = |theta: f64| psi(model, theta);
    let pp1 = eval(h + delta)?;
    let pm1 = eval(h - delta)?;
    let pp2 = eval(h + 2.0 * delta)?;
    let pm2 = eval(h - 2.0 * delta)?;
    let p0 = eval(h)?;
    let d3 = (pp2 - 2.0 * pp1 + 2.0 * pm1 - pm2) / (2.0 * delta.powi(3));
    let d4 = (pp2 - 4.0 * pp1 + 6.0 * p0 - 4.0 * pm1 + pm2) / delta.powi(4);
    Ok((d3, d4))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testmodels::{exponential3d, lattice3d, poisson_unit};

    #[test]
    fn identity_tilt_preserves_dynamics() {
        let m = lattice3d();
        let u0 = DVector::zeros(3);
        let td = tilt_dynamics(&m, 0.0, &u0).unwrap();
        assert!((td.beta_star.clone() - &m.beta).amax() < 1e-15);
        assert!((td.kappa_star.clone() - &m.kappa).amax() < 1e-15);
    }

    #[test]
    fn single_atom_lattice_tilt_is_unchanged() {
        let law = MarkLaw::FiniteLattice {
            span: 1.0,
            atoms: vec![(1, 1.0)],
        };
        match law.tilt(0.7).unwrap() {
            MarkLaw::FiniteLattice { atoms, .. } => {
                assert_eq!(atoms.len(), 1);
                assert!((atoms[0].1 - 1.0).abs() < 1e-15);
            }
            _ => panic!(),
        }
    }

    #[test]
    fn feedback_free_psi_is_one() {
        let m = poisson_unit();
        for theta in [0.0, 0.4, 0.9] {
            assert!((psi(&m, theta).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn psi_at_zero_is_one() {
        for m in [lattice3d(), exponential3d()] {
            assert!((psi(&m, 0.0).unwrap() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn b_inf_stable_under_tolerance_halving() {
        let m = lattice3d();
        let sol = solve_u_star(&m, 0.06).unwrap();
        let tol = 1e-10;
        let (_, b1) = integrate_ab(&m, 0.06, &sol.u_star, tol).unwrap();
        let (_, b2) = integrate_ab(&m, 0.06, &sol.u_star, tol / 2.0).unwrap();
        assert!((b1 - b2).abs() < 10.0 * tol, "drift {}", (b1 - b2).abs());
    }

    #[test]
    fn x0_shift_scales_psi_exponentially() {
        let m = lattice3d();
        let theta = 0.05;
        let sol = solve_u_star(&m, theta).unwrap();
        let base = psi(&m, theta).unwrap();
        let mut shifted = m.clone();
        shifted.x0[0] += 1.0;
        let moved = psi(&shifted, theta).unwrap();
        assert!((moved / base - sol.u_star[0].exp()).abs() < 1e-9);
    }

    #[test]
    fn sensitivity_modes_differ_only_in_beta_terms() {
        let m = lattice3d();
        let full = psi_derivatives(&m, 0.06, PsiMethod::SensitivityOde).unwrap();
        let printed = psi_derivatives(&m, 0.06, PsiMethod::SensitivityOdeAsPrinted).unwrap();
        assert!((full.psi - printed.psi).abs() < 1e-12);
        assert!((full.psi_d1 - printed.psi_d1).abs() > 1e-6);
    }
}
