//! Refined large-time asymptotics for affine point processes.
//!
//! The crate computes tail probabilities P(V(t) >= Rt) and tail expectations
//! E[g(V(t) - Rt) 1_{V(t) >= Rt}] for the total mark sum V(t) of an affine
//! point process, assembling the expansion
//!
//! ```text
//! e^{-t I(R)} / sqrt(2 pi t eta''(h)) * (k_0 + k_1/t + ...)
//! ```
//!
//! from first principles: the implicit tilt function u*(theta) and cumulant
//! eta(theta) ([`transform`]), the mod-phi limiting function psi via Riccati
//! ODEs ([`ode`]), and the lattice / non-lattice coefficient combinatorics
//! ([`expansion`]). Plain and importance-sampling Monte Carlo ([`mc`]) provide
//! the simulation ground truth, and [`expansion::clt_tail`] the refined-CLT
//! approximation around the mean.

pub mod error;
pub mod expansion;
pub mod mc;
pub mod model;
pub mod numeric;
pub mod ode;
pub mod testmodels;
pub mod transform;

pub use error::{ApxError, Result};
pub use expansion::{
    clt_tail, tail_expectation, tail_probability, ApproxOptions, ClosedFormVariant,
    ExpansionResult, Order, Regime, TailFunctional,
};
pub use mc::{importance_sampling, plain_mc, MCEstimate, Sampler, SimConfig};
pub use model::{AffineModel, ErgodicQuantities, MarkLaw, ValidationReport};
pub use ode::{integrate_ab, psi, psi_derivatives, tilt_dynamics, PsiMethod, PsiPack};
pub use transform::{
    eta, eta_derivatives, solve_saddlepoint, solve_u_star, u_star_derivatives, CumulantPack,
    TiltSolution,
};
