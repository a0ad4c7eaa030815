//! Affine point process parameter schema, structural validation, and the
//! closed-form ergodic quantities (mean growth rate and CLT variance).
//!
//! State dynamics:
//!
//! ```text
//! dX(t) = (b - beta X(t)) dt + sigma(X(t)) dW(t) + sum_i gamma_i  z dN_i(dt, dz)
//! sigma(x) sigma(x)^T = a + sum_j alpha^j x_j
//! Lambda_i(x) = lambda_i + kappa_i . x          (intensity of event type i)
//! ```
//!
//! Each event of type i carries a mark z drawn from its mark law; the process
//! of interest is V(t), the sum of all marks up to time t.

use crate::error::{ApxError, Result};
use crate::numeric::{factorial, gcd_u64, span_gcd};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

const TOL: f64 = 1e-10;

/// Mark (jump size) distribution on the nonnegative reals.
///
/// All three variants admit closed-form tilted moments E[Z^p e^{sZ}], which is
/// what every downstream consumer (tilt equations, Riccati integrands,
/// coefficient assembly) actually needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MarkLaw {
    Constant { value: f64 },
    Exponential { mean: f64 },
    FiniteLattice { span: f64, atoms: Vec<(u32, f64)> },
}

impl MarkLaw {
    /// Structural invariants: positive scale parameters, probabilities summing
    /// to one, at least one strictly positive atom.
    pub fn check(&self) -> Result<()> {
        match self {
            MarkLaw::Constant { value } => {
                if *value <= 0.0 || !value.is_finite() {
                    return Err(ApxError::InvalidModel(format!(
                        "constant mark must be positive, got {value}"
                    )));
                }
            }
            MarkLaw::Exponential { mean } => {
                if *mean <= 0.0 || !mean.is_finite() {
                    return Err(ApxError::InvalidModel(format!(
                        "exponential mark mean must be positive, got {mean}"
                    )));
                }
            }
            MarkLaw::FiniteLattice { span, atoms } => {
                if *span <= 0.0 || !span.is_finite() {
                    return Err(ApxError::InvalidModel(format!(
                        "lattice span must be positive, got {span}"
                    )));
                }
                let total: f64 = atoms.iter().map(|(_, p)| *p).sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(ApxError::InvalidModel(format!(
                        "lattice atom probabilities sum to {total}, expected 1"
                    )));
                }
                if atoms.iter().any(|(_, p)| *p < 0.0) {
                    return Err(ApxError::InvalidModel(
                        "lattice atom probability is negative".into(),
                    ));
                }
                if !atoms.iter().any(|(k, p)| *k > 0 && *p > 0.0) {
                    return Err(ApxError::InvalidModel(
                        "lattice law carries no positive mass above zero".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.raw_moment(1)
    }

    /// E[Z^r].
    pub fn raw_moment(&self, r: u32) -> f64 {
        match self {
            MarkLaw::Constant { value } => value.powi(r as i32),
            MarkLaw::Exponential { mean } => factorial(r) * mean.powi(r as i32),
            MarkLaw::FiniteLattice { span, atoms } => atoms
                .iter()
                .map(|(k, p)| p * (*k as f64 * span).powi(r as i32))
                .sum(),
        }
    }

    /// sup { s : E[e^{sZ}] < infinity }.
    pub fn mgf_sup(&self) -> f64 {
        match self {
            MarkLaw::Exponential { mean } => 1.0 / mean,
            _ => f64::INFINITY,
        }
    }

    /// E[e^{sZ}].
    pub fn mgf(&self, s: f64) -> Result<f64> {
        self.tilted_moment(0, s)
    }

    /// E[Z^p e^{sZ}] in closed form.
    pub fn tilted_moment(&self, p: u32, s: f64) -> Result<f64> {
        match self {
            MarkLaw::Constant { value } => Ok(value.powi(p as i32) * (s * value).exp()),
            MarkLaw::Exponential { mean } => {
                let bound = 1.0 / mean;
                if s >= bound {
                    return Err(ApxError::MgfDomainExceeded {
                        event_type: usize::MAX,
                        tilt: s,
                        bound,
                    });
                }
                Ok(factorial(p) * mean.powi(p as i32) / (1.0 - s * mean).powi(p as i32 + 1))
            }
            MarkLaw::FiniteLattice { span, atoms } => Ok(atoms
                .iter()
                .map(|(k, pr)| {
                    let z = *k as f64 * span;
                    pr * z.powi(p as i32) * (s * z).exp()
                })
                .sum()),
        }
    }

    /// Exponentially tilted law: d(tilted)/d(law) proportional to e^{sz}.
    pub fn tilt(&self, s: f64) -> Result<MarkLaw> {
        match self {
            MarkLaw::Constant { value } => Ok(MarkLaw::Constant { value: *value }),
            MarkLaw::Exponential { mean } => {
                let bound = 1.0 / mean;
                if s >= bound {
                    return Err(ApxError::MgfDomainExceeded {
                        event_type: usize::MAX,
                        tilt: s,
                        bound,
                    });
                }
                Ok(MarkLaw::Exponential {
                    mean: mean / (1.0 - s * mean),
                })
            }
            MarkLaw::FiniteLattice { span, atoms } => {
                let weights: Vec<f64> = atoms
                    .iter()
                    .map(|(k, p)| p * (s * *k as f64 * span).exp())
                    .collect();
                let norm: f64 = weights.iter().sum();
                Ok(MarkLaw::FiniteLattice {
                    span: *span,
                    atoms: atoms
                        .iter()
                        .zip(weights)
                        .map(|((k, _), w)| (*k, w / norm))
                        .collect(),
                })
            }
        }
    }

    /// Span of the lattice carrying this law's support, None for absolutely
    /// continuous laws.
    pub fn span(&self) -> Option<f64> {
        match self {
            MarkLaw::Constant { value } => Some(*value),
            MarkLaw::Exponential { .. } => None,
            MarkLaw::FiniteLattice { span, atoms } => {
                let g = atoms
                    .iter()
                    .filter(|(k, p)| *k > 0 && *p > 0.0)
                    .fold(0u64, |acc, (k, _)| gcd_u64(acc, *k as u64));
                Some(span * g as f64)
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            MarkLaw::Constant { value } => *value,
            MarkLaw::Exponential { mean } => {
                let u: f64 = rng.gen::<f64>();
                -mean * (1.0 - u).ln()
            }
            MarkLaw::FiniteLattice { span, atoms } => {
                let mut u: f64 = rng.gen::<f64>();
                for (k, p) in atoms {
                    if u < *p {
                        return *k as f64 * span;
                    }
                    u -= p;
                }
                atoms.last().map(|(k, _)| *k as f64 * span).unwrap_or(0.0)
            }
        }
    }
}

/// Full parameter set of an affine point process.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "ModelFile", into = "ModelFile")]
pub struct AffineModel {
    pub d: usize,
    pub n: usize,
    pub m: usize,
    pub a: DMatrix<f64>,
    /// One d-by-d matrix per state coordinate: alpha^j scales x_j in the
    /// diffusion covariance.
    pub alpha: Vec<DMatrix<f64>>,
    pub b: DVector<f64>,
    pub beta: DMatrix<f64>,
    pub lambda: DVector<f64>,
    /// n-by-d; row i is kappa_i in Lambda_i(x) = lambda_i + kappa_i . x.
    pub kappa: DMatrix<f64>,
    /// n-by-d; row i is the state jump direction gamma_i of event type i.
    pub gamma: DMatrix<f64>,
    pub x0: DVector<f64>,
    pub marks: Vec<MarkLaw>,
}

/// Plain-data mirror of [`AffineModel`] defining the model file schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub d: usize,
    pub n: usize,
    pub m: usize,
    pub a: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<Vec<f64>>>,
    pub b: Vec<f64>,
    pub beta: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
    pub kappa: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    pub x0: Vec<f64>,
    pub marks: Vec<MarkLaw>,
}

fn matrix_from_rows(name: &str, rows: &[Vec<f64>], nr: usize, nc: usize) -> Result<DMatrix<f64>> {
    if rows.len() != nr || rows.iter().any(|r| r.len() != nc) {
        return Err(ApxError::DimensionMismatch(format!(
            "{name}: expected {nr}x{nc} row-major matrix"
        )));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

impl TryFrom<ModelFile> for AffineModel {
    type Error = ApxError;

    fn try_from(f: ModelFile) -> Result<Self> {
        let (d, n, m) = (f.d, f.n, f.m);
        if d == 0 || n == 0 || m > d {
            return Err(ApxError::DimensionMismatch(format!(
                "need d >= 1, n >= 1, m <= d; got d={d}, n={n}, m={m}"
            )));
        }
        if f.alpha.len() != d {
            return Err(ApxError::DimensionMismatch(format!(
                "alpha: expected {d} matrices, got {}",
                f.alpha.len()
            )));
        }
        if f.b.len() != d || f.x0.len() != d || f.lambda.len() != n || f.marks.len() != n {
            return Err(ApxError::DimensionMismatch(
                "b/x0 must have length d; lambda/marks must have length n".into(),
            ));
        }
        for law in &f.marks {
            law.check()?;
        }
        let alpha = f
            .alpha
            .iter()
            .enumerate()
            .map(|(j, rows)| matrix_from_rows(&format!("alpha[{j}]"), rows, d, d))
            .collect::<Result<Vec<_>>>()?;
        Ok(AffineModel {
            d,
            n,
            m,
            a: matrix_from_rows("a", &f.a, d, d)?,
            alpha,
            b: DVector::from_vec(f.b),
            beta: matrix_from_rows("beta", &f.beta, d, d)?,
            lambda: DVector::from_vec(f.lambda),
            kappa: matrix_from_rows("kappa", &f.kappa, n, d)?,
            gamma: matrix_from_rows("gamma", &f.gamma, n, d)?,
            x0: DVector::from_vec(f.x0),
            marks: f.marks,
        })
    }
}

impl From<AffineModel> for ModelFile {
    fn from(m: AffineModel) -> Self {
        let rows = |mat: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..mat.nrows())
                .map(|i| (0..mat.ncols()).map(|j| mat[(i, j)]).collect())
                .collect()
        };
        ModelFile {
            d: m.d,
            n: m.n,
            m: m.m,
            a: rows(&m.a),
            alpha: m.alpha.iter().map(rows).collect(),
            b: m.b.iter().copied().collect(),
            beta: rows(&m.beta),
            lambda: m.lambda.iter().copied().collect(),
            kappa: rows(&m.kappa),
            gamma: rows(&m.gamma),
            x0: m.x0.iter().copied().collect(),
            marks: m.marks,
        }
    }
}

/// Ergodic first- and second-order quantities of V(t)/t.
#[derive(Debug, Clone, Serialize)]
pub struct ErgodicQuantities {
    /// Mean growth rate r of V(t).
    pub r: f64,
    /// CLT variance of (V(t) - rt)/sqrt(t).
    pub sigma2: f64,
    pub cal_a: Vec<f64>,
    pub cal_b: Vec<f64>,
    pub cal_c: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub passed: bool,
    /// (assumption clause id, human-readable detail)
    pub violations: Vec<(String, String)>,
}

impl AffineModel {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let file: ModelFile =
            toml::from_str(s).map_err(|e| ApxError::InvalidModel(e.to_string()))?;
        AffineModel::try_from(file)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(&ModelFile::from(self.clone())).expect("model serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ApxError::InvalidModel(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Row i of gamma as a vector.
    pub fn gamma_row(&self, i: usize) -> DVector<f64> {
        self.gamma.row(i).transpose()
    }

    /// Row i of kappa as a vector.
    pub fn kappa_row(&self, i: usize) -> DVector<f64> {
        self.kappa.row(i).transpose()
    }

    /// beta - sum_i E[Z_i] gamma_i kappa_i^T, the matrix whose positive
    /// stability is Assumption III and whose inverse drives the ergodic
    /// quantities.
    pub fn stability_matrix(&self) -> DMatrix<f64> {
        let mut k = self.beta.clone();
        for i in 0..self.n {
            let ez = self.marks[i].mean();
            k -= ez * self.gamma_row(i) * self.kappa.row(i);
        }
        k
    }

    /// Checks every clause of the standing assumption, reporting all
    /// violations rather than stopping at the first.
    pub fn validate(&self) -> ValidationReport {
        let mut v: Vec<(String, String)> = Vec::new();
        let (d, n, m) = (self.d, self.n, self.m);
        let mut push = |clause: &str, detail: String| v.push((clause.to_string(), detail));

        let sym_psd = |mat: &DMatrix<f64>| -> (bool, bool, f64) {
            let sym = (mat - mat.transpose()).amax() <= TOL;
            let eig = mat
                .clone()
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            (sym, eig >= -TOL, eig)
        };

        // I(1): a symmetric PSD with a_{I,I} = 0
        let (sym, psd, eig) = sym_psd(&self.a);
        if !sym {
            push("I(1)", "a is not symmetric".into());
        } else if !psd {
            push("I(1)", format!("a has negative eigenvalue {eig}"));
        }
        for i in 0..m {
            for j in 0..m {
                if self.a[(i, j)].abs() > TOL {
                    push("I(1)", format!("a[{i},{j}] nonzero on the I,I block"));
                }
            }
        }

        // I(2): alpha^i symmetric PSD; alpha^i_{I,I} = alpha^i_{ii} Id(i) for i in I;
        //        alpha^i = 0 for i in J
        for (idx, al) in self.alpha.iter().enumerate() {
            let (sym, psd, eig) = sym_psd(al);
            if !sym {
                push("I(2)", format!("alpha[{idx}] is not symmetric"));
            } else if !psd {
                push("I(2)", format!("alpha[{idx}] has negative eigenvalue {eig}"));
            }
            if idx < m {
                for i in 0..m {
                    for j in 0..m {
                        let want = if i == idx && j == idx { al[(idx, idx)] } else { 0.0 };
                        if (al[(i, j)] - want).abs() > TOL {
                            push(
                                "I(2)",
                                format!("alpha[{idx}] I,I block is not alpha_ii Id({idx})"),
                            );
                        }
                    }
                }
            } else if al.amax() > TOL {
                push("I(2)", format!("alpha[{idx}] must vanish for index in J"));
            }
        }

        // I(3): first m entries of b nonnegative
        for i in 0..m {
            if self.b[i] < -TOL {
                push("I(3)", format!("b[{i}] = {} negative on I", self.b[i]));
            }
        }

        // I(4): beta_{I,J} = 0, beta_{I,I} off-diagonal nonpositive
        for i in 0..m {
            for j in m..d {
                if self.beta[(i, j)].abs() > TOL {
                    push("I(4)", format!("beta[{i},{j}] nonzero on the I,J block"));
                }
            }
            for j in 0..m {
                if i != j && self.beta[(i, j)] > TOL {
                    push(
                        "I(4)",
                        format!("beta[{i},{j}] = {} positive off-diagonal", self.beta[(i, j)]),
                    );
                }
            }
        }

        // I(5): lambda >= 0, kappa_{i,J} = 0
        for i in 0..n {
            if self.lambda[i] < -TOL {
                push("I(5)", format!("lambda[{i}] = {} negative", self.lambda[i]));
            }
            for j in m..d {
                if self.kappa[(i, j)].abs() > TOL {
                    push("I(5)", format!("kappa[{i},{j}] nonzero on the J columns"));
                }
            }
        }

        // I(6): first m entries of each gamma_i nonnegative
        for i in 0..n {
            for j in 0..m {
                if self.gamma[(i, j)] < -TOL {
                    push("I(6)", format!("gamma[{i},{j}] negative on I"));
                }
            }
        }

        // II: alpha^i_{ii} > 0 and b_i > 0 on I; lambda_i + sum_{j<=m} kappa_{i,j} > 0
        for i in 0..m {
            if self.alpha[i][(i, i)] <= TOL {
                push("II", format!("alpha[{i}][{i},{i}] must be strictly positive"));
            }
            if self.b[i] <= TOL {
                push("II", format!("b[{i}] must be strictly positive"));
            }
        }
        for i in 0..n {
            let s: f64 = (0..m).map(|j| self.kappa[(i, j)]).sum();
            if self.lambda[i] + s <= TOL {
                push(
                    "II",
                    format!("lambda[{i}] + sum_j kappa[{i},j] must be strictly positive"),
                );
            }
        }

        // III: stability matrix positive stable
        let eigs = self.stability_matrix().complex_eigenvalues();
        let min_re = eigs.iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
        if min_re <= TOL {
            push(
                "III",
                format!("stability matrix eigenvalue with real part {min_re}"),
            );
        }

        ValidationReport {
            passed: v.is_empty(),
            violations: v,
        }
    }

    /// Closed-form ergodic quantities r, sigma^2, A, B, C.
    pub fn ergodic_quantities(&self) -> Result<ErgodicQuantities> {
        let k = self.stability_matrix();
        let mut rhs_a = DVector::zeros(self.d);
        for i in 0..self.n {
            rhs_a += self.marks[i].mean() * self.kappa_row(i);
        }
        let lu_t = k.transpose().lu();
        let cal_a = lu_t
            .solve(&rhs_a)
            .ok_or(ApxError::SingularStabilityMatrix)?;

        let mut rhs_b = self.b.clone();
        for i in 0..self.n {
            rhs_b += self.lambda[i] * self.marks[i].mean() * self.gamma_row(i);
        }
        let cal_b = k
            .lu()
            .solve(&rhs_b)
            .ok_or(ApxError::SingularStabilityMatrix)?;

        let cal_c: Vec<f64> = (0..self.n)
            .map(|i| {
                let g = 1.0 + cal_a.dot(&self.gamma_row(i));
                g * g * self.marks[i].raw_moment(2)
            })
            .collect();

        let mut r = cal_a.dot(&self.b);
        for i in 0..self.n {
            r += self.lambda[i]
                * self.marks[i].mean()
                * (1.0 + cal_a.dot(&self.gamma_row(i)));
        }

        // sigma^2 = A^T a A + C^T lambda + (A^T alpha A + C^T kappa) . B
        let mut sigma2 = (self.a.clone() * &cal_a).dot(&cal_a);
        for i in 0..self.n {
            sigma2 += cal_c[i] * self.lambda[i];
        }
        for j in 0..self.d {
            let mut coef = (self.alpha[j].clone() * &cal_a).dot(&cal_a);
            for i in 0..self.n {
                coef += cal_c[i] * self.kappa[(i, j)];
            }
            sigma2 += coef * cal_b[j];
        }

        Ok(ErgodicQuantities {
            r,
            sigma2,
            cal_a: cal_a.iter().copied().collect(),
            cal_b: cal_b.iter().copied().collect(),
            cal_c,
        })
    }

    /// Largest span b such that every achievable mark sum lies on b.N u {0};
    /// None when any mark law is absolutely continuous.
    pub fn lattice_span(&self) -> Result<Option<f64>> {
        let mut acc: Option<f64> = None;
        for law in &self.marks {
            match law.span() {
                None => return Ok(None),
                Some(s) => {
                    acc = Some(match acc {
                        None => s,
                        Some(g) => span_gcd(g, s)?,
                    });
                }
            }
        }
        Ok(acc)
    }

    /// Rescaled copy with marks divided by `span` and gamma multiplied by it,
    /// leaving the state dynamics identical while making mark sums integer.
    pub(crate) fn unit_lattice_rescale(&self, span: f64) -> AffineModel {
        let mut scaled = self.clone();
        scaled.gamma *= span;
        scaled.marks = self
            .marks
            .iter()
            .map(|law| match law {
                MarkLaw::Constant { value } => MarkLaw::Constant { value: value / span },
                MarkLaw::Exponential { mean } => MarkLaw::Exponential { mean: mean / span },
                MarkLaw::FiniteLattice { span: s, atoms } => MarkLaw::FiniteLattice {
                    span: s / span,
                    atoms: atoms.clone(),
                },
            })
            .collect();
        scaled
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testmodels::{lattice3d, poisson_unit, compound_poisson_exp};

    #[test]
    fn fixture_passes_validation() {
        let m = lattice3d();
        let rep = m.validate();
        assert!(rep.passed, "violations: {:?}", rep.violations);
    }

    #[test]
    fn weak_mean_reversion_breaks_stability() {
        let mut m = lattice3d();
        m.beta = DMatrix::from_diagonal(&DVector::from_vec(vec![0.1, 0.1, 0.1]));
        let rep = m.validate();
        assert!(!rep.passed);
        assert!(rep.violations.iter().any(|(c, _)| c == "III"));
    }

    #[test]
    fn diffusion_on_i_block_flags_clause_i1() {
        let mut m = lattice3d();
        m.a[(0, 0)] = 0.5;
        let rep = m.validate();
        assert!(rep.violations.iter().any(|(c, _)| c == "I(1)"));
    }

    #[test]
    fn zero_baseline_b_flags_clause_ii() {
        let mut m = lattice3d();
        m.b[0] = 0.0;
        let rep = m.validate();
        assert!(rep.violations.iter().any(|(c, _)| c == "II"));
    }

    #[test]
    fn poisson_ergodics_are_exact() {
        let m = poisson_unit();
        let e = m.ergodic_quantities().unwrap();
        assert!((e.r - 1.0).abs() < 1e-12);
        assert!((e.sigma2 - 1.0).abs() < 1e-12);
        assert!(e.cal_a.iter().all(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn compound_poisson_ergodics() {
        let m = compound_poisson_exp();
        let e = m.ergodic_quantities().unwrap();
        assert!((e.r - 1.0).abs() < 1e-12);
        assert!((e.sigma2 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn kappa_zero_reduces_to_compound_poisson_sums() {
        // with no feedback, r = sum lambda_i E[Z_i] and sigma^2 = sum lambda_i E[Z_i^2]
        let mut m = lattice3d();
        m.kappa = DMatrix::zeros(3, 3);
        m.lambda = DVector::from_vec(vec![0.7, 1.3, 0.2]);
        let e = m.ergodic_quantities().unwrap();
        assert!((e.r - (0.7 + 1.3 + 0.2)).abs() < 1e-12);
        assert!((e.sigma2 - (0.7 + 1.3 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn permuting_event_types_permutes_c_only() {
        let m = lattice3d();
        let e = m.ergodic_quantities().unwrap();

        let mut p = m.clone();
        // swap event types 0 and 2 (rows of lambda, kappa, gamma, marks)
        p.lambda.swap_rows(0, 2);
        p.kappa.swap_rows(0, 2);
        p.gamma.swap_rows(0, 2);
        p.marks.swap(0, 2);
        let ep = p.ergodic_quantities().unwrap();

        assert!((e.r - ep.r).abs() < 1e-12);
        assert!((e.sigma2 - ep.sigma2).abs() < 1e-10);
        assert!((e.cal_c[0] - ep.cal_c[2]).abs() < 1e-12);
        assert!((e.cal_c[2] - ep.cal_c[0]).abs() < 1e-12);
    }

    #[test]
    fn lattice_span_examples() {
        let m = lattice3d();
        assert_eq!(m.lattice_span().unwrap(), Some(1.0));

        let mut m2 = lattice3d();
        m2.marks = vec![
            MarkLaw::Constant { value: 2.0 },
            MarkLaw::Constant { value: 3.0 },
            MarkLaw::Constant { value: 2.0 },
        ];
        assert!((m2.lattice_span().unwrap().unwrap() - 1.0).abs() < 1e-12);

        let mut m3 = lattice3d();
        m3.marks[1] = MarkLaw::Exponential { mean: 1.0 };
        assert_eq!(m3.lattice_span().unwrap(), None);
    }

    #[test]
    fn finite_lattice_law_span_uses_atom_gcd() {
        let law = MarkLaw::FiniteLattice {
            span: 0.5,
            atoms: vec![(2, 0.5), (4, 0.5)],
        };
        assert!((law.span().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tilted_exponential_mean() {
        let law = MarkLaw::Exponential { mean: 1.0 };
        match law.tilt(0.5).unwrap() {
            MarkLaw::Exponential { mean } => assert!((mean - 2.0).abs() < 1e-12),
            _ => panic!("tilt changed the variant"),
        }
        assert!(law.tilt(1.0).is_err());
    }

    #[test]
    fn tilted_moments_match_direct_sums() {
        let law = MarkLaw::FiniteLattice {
            span: 0.5,
            atoms: vec![(1, 0.25), (2, 0.25), (4, 0.5)],
        };
        let s = 0.3;
        let direct: f64 = [(1u32, 0.25), (2, 0.25), (4, 0.5)]
            .iter()
            .map(|(k, p)| {
                let z = *k as f64 * 0.5;
                p * z * z * (s * z).exp()
            })
            .sum();
        assert!((law.tilted_moment(2, s).unwrap() - direct).abs() < 1e-14);
    }

    #[test]
    fn toml_round_trip() {
        let m = lattice3d();
        let text = m.to_toml_string();
        let back = AffineModel::from_toml_str(&text).unwrap();
        assert_eq!(back.d, m.d);
        assert!((back.beta - &m.beta).amax() < 1e-15);
        assert!((back.gamma - &m.gamma).amax() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_an_error_not_a_violation() {
        let text = r#"
d = 2
n = 1
m = 2
a = [[0.0, 0.0], [0.0, 0.0]]
alpha = [[[1.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 1.0]]]
b = [1.0]
beta = [[1.0, 0.0], [0.0, 1.0]]
lambda = [1.0]
kappa = [[0.0, 0.0]]
gamma = [[0.0, 0.0]]
x0 = [0.0, 0.0]
marks = [{ type = "constant", value = 1.0 }]
"#;
        assert!(matches!(
            AffineModel::from_toml_str(text),
            Err(ApxError::DimensionMismatch(_))
        ));
    }
}
