//! Built-in test models: the two three-dimensional benchmark models and the
//! feedback-free Poisson references used throughout the test suites.

use crate::model::{AffineModel, MarkLaw};
use nalgebra::{DMatrix, DVector};

/// Three-dimensional self-exciting model with unit constant marks.
///
/// Per coordinate: dX_j = (b_j - beta_j X_j) dt + sqrt(alpha_j X_j) dW_j
/// + sum_i gamma_i dL_i, with Lambda_j(x) = kappa_j x_j and X(0) = (1,1,1).
/// Each event of type i bumps every coordinate by gamma_i times its mark.
pub fn lattice3d() -> AffineModel {
    let d = 3;
    let alpha_diag = [0.5, 0.6, 0.7];
    let gbar = [0.2, 0.3, 0.4];
    AffineModel {
        d,
        n: 3,
        m: 3,
        a: DMatrix::zeros(d, d),
        alpha: (0..d)
            .map(|j| {
                let mut m = DMatrix::zeros(d, d);
                m[(j, j)] = alpha_diag[j];
                m
            })
            .collect(),
        b: DVector::from_vec(vec![6.0, 6.1, 6.2]),
        beta: DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 2.1, 2.2])),
        lambda: DVector::zeros(3),
        kappa: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.1, 1.2])),
        gamma: DMatrix::from_fn(3, d, |i, _| gbar[i]),
        x0: DVector::from_element(d, 1.0),
        marks: vec![MarkLaw::Constant { value: 1.0 }; 3],
    }
}

/// Same dynamics as [`lattice3d`] but with Exponential(1) marks.
pub fn exponential3d() -> AffineModel {
    let mut m = lattice3d();
    m.marks = vec![MarkLaw::Exponential { mean: 1.0 }; 3];
    m
}

/// Feedback-free unit-rate Poisson process with unit marks: V(t) ~ Poisson(t).
pub fn poisson_unit() -> AffineModel {
    AffineModel {
        d: 1,
        n: 1,
        m: 1,
        a: DMatrix::zeros(1, 1),
        alpha: vec![DMatrix::from_element(1, 1, 1.0)],
        b: DVector::from_element(1, 1.0),
        beta: DMatrix::from_element(1, 1, 1.0),
        lambda: DVector::from_element(1, 1.0),
        kappa: DMatrix::zeros(1, 1),
        gamma: DMatrix::zeros(1, 1),
        x0: DVector::from_element(1, 1.0),
        marks: vec![MarkLaw::Constant { value: 1.0 }],
    }
}

/// Feedback-free compound Poisson with Exponential(1) marks.
pub fn compound_poisson_exp() -> AffineModel {
    let mut m = poisson_unit();
    m.marks = vec![MarkLaw::Exponential { mean: 1.0 }];
    m
}
