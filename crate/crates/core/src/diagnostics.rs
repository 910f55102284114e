//! Runtime checks taken from the stability and convergence analysis.
//!
//! None of these halt a filter; they annotate benchmark output.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::system::{spectral_radius, UncertainLinearModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("window requires k >= l >= 1 (got k={k}, l={l})")]
    InvalidWindow { k: usize, l: usize },
    #[error("equivalent measurement covariance is singular")]
    SingularR,
    #[error("{what} has wrong shape")]
    Shape { what: &'static str },
    #[error("nominal observability Grammian is singular (min eigenvalue {0})")]
    ObservabilityDegenerate(f64),
    #[error("contraction bound needs beta > 0 and sigma > 0")]
    InvalidBound,
    #[error("weighted Gram matrix is singular (min eigenvalue {0})")]
    GramSingular(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrammianReport {
    pub controllability: DMatrix<f64>,
    pub observability: DMatrix<f64>,
    pub k: usize,
    pub window: usize,
    /// `(min, max)` eigenvalue of the controllability Grammian.
    pub controllability_bounds: (f64, f64),
    /// `(min, max)` eigenvalue of the observability Grammian.
    pub observability_bounds: (f64, f64),
}

impl GrammianReport {
    pub fn observable(&self) -> bool {
        self.observability_bounds.0 > 0.0
    }

    pub fn controllable(&self) -> bool {
        self.controllability_bounds.0 > 0.0
    }
}

fn eig_bounds(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(m.clone()).eigenvalues;
    (eig.min(), eig.max())
}

fn sym(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

fn information_weight(
    h: &DMatrix<f64>,
    r_equiv: &DMatrix<f64>,
) -> Result<DMatrix<f64>, DiagnosticsError> {
    if r_equiv.nrows() != h.nrows() || r_equiv.ncols() != h.nrows() {
        return Err(DiagnosticsError::Shape { what: "R" });
    }
    let r_inv = r_equiv
        .clone()
        .try_inverse()
        .ok_or(DiagnosticsError::SingularR)?;
    Ok(h.transpose() * r_inv * h)
}

/// Powers `A^0..=A^max`.
fn powers(a: &DMatrix<f64>, max: usize) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(max + 1);
    out.push(DMatrix::identity(a.nrows(), a.ncols()));
    for j in 1..=max {
        let next = &out[j - 1] * a;
        out.push(next);
    }
    out
}

/// Windowed Grammians of the perturbed system over `[k - l, k]`.
///
/// Transition products are powers of `F + dF` spanning the gap to `k`; in the
/// time-invariant case the result depends on `l` only, `k` just fixes the
/// window.
pub fn grammians(
    model: &UncertainLinearModel,
    r_equiv: &DMatrix<f64>,
    q_equiv: &DMatrix<f64>,
    k: usize,
    l: usize,
) -> Result<GrammianReport, DiagnosticsError> {
    if l == 0 || k < l {
        return Err(DiagnosticsError::InvalidWindow { k, l });
    }
    let n = model.state_dim();
    if q_equiv.nrows() != n || q_equiv.ncols() != n {
        return Err(DiagnosticsError::Shape { what: "Q" });
    }
    let info = information_weight(model.h(), r_equiv)?;
    let phi = powers(&model.true_transition(), l);

    let mut controllability = DMatrix::zeros(n, n);
    for p in &phi[..l] {
        controllability += p.transpose() * q_equiv * p;
    }
    let mut observability = DMatrix::zeros(n, n);
    for p in &phi {
        observability += p.transpose() * &info * p;
    }
    let controllability = sym(controllability);
    let observability = sym(observability);
    Ok(GrammianReport {
        controllability_bounds: eig_bounds(&controllability),
        observability_bounds: eig_bounds(&observability),
        controllability,
        observability,
        k,
        window: l,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    /// Nominal (`dF = 0`) observability Grammian.
    pub observability: DMatrix<f64>,
    pub delta_observability: DMatrix<f64>,
    /// Spectral radius of `O^-1 dO`.
    pub spectral_radius: f64,
    /// `spectral_radius < 1`.
    pub holds: bool,
}

/// Perturbation condition on the observability Grammian.
///
/// `dO = sum_j (F^j)^T H^T R^-1 H dPhi_j`, where
/// `dPhi_j = sum_{a<j} F^a dF F^{j-1-a}` is the first-order change of the
/// transition product. The matrix inequality `-I < O^-1 dO < I` is read as
/// `rho(O^-1 dO) < 1`.
pub fn stability_condition(
    model: &UncertainLinearModel,
    r_equiv: &DMatrix<f64>,
    k: usize,
    l: usize,
) -> Result<StabilityReport, DiagnosticsError> {
    if l == 0 || k < l {
        return Err(DiagnosticsError::InvalidWindow { k, l });
    }
    let n = model.state_dim();
    let info = information_weight(model.h(), r_equiv)?;
    let f_pow = powers(model.f(), l);
    let delta_f = model.delta_f();

    let mut observability = DMatrix::zeros(n, n);
    let mut delta_observability = DMatrix::zeros(n, n);
    for (j, fj) in f_pow.iter().enumerate() {
        let left = fj.transpose() * &info;
        observability += &left * fj;
        let mut d_phi = DMatrix::zeros(n, n);
        for a in 0..j {
            d_phi += &f_pow[a] * delta_f * &f_pow[j - 1 - a];
        }
        delta_observability += left * d_phi;
    }
    let observability = sym(observability);
    let (lo, hi) = eig_bounds(&observability);
    if !(lo > hi.abs() * 1e-14) {
        return Err(DiagnosticsError::ObservabilityDegenerate(lo));
    }
    let ratio = observability
        .clone()
        .cholesky()
        .ok_or(DiagnosticsError::ObservabilityDegenerate(lo))?
        .solve(&delta_observability);
    let radius = spectral_radius(&ratio);
    Ok(StabilityReport {
        observability,
        delta_observability,
        spectral_radius: radius,
        holds: radius < 1.0,
    })
}

/// Per posterior covariance: is `P^-1 - 2 mu1 I` positive definite?
pub fn risk_positivity_audit(covariances: &[DMatrix<f64>], mu1: f64) -> Vec<bool> {
    covariances.iter().map(|p| risk_positive(p, mu1)).collect()
}

pub fn risk_positive(p: &DMatrix<f64>, mu1: f64) -> bool {
    let n = p.nrows();
    let Some(p_inv) = p.clone().try_inverse() else {
        return false;
    };
    let m = sym(p_inv - DMatrix::identity(n, n) * (2.0 * mu1));
    SymmetricEigen::new(m).eigenvalues.min() > 0.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractionReport {
    pub sigma: f64,
    /// Bound on `||f(X)||_1`.
    pub phi: f64,
    /// Bound on `||df/dX||_1`.
    pub psi: f64,
    pub beta: f64,
    /// Contraction factor certified at this sigma (equal to `psi`).
    pub alpha: f64,
    /// `phi <= beta && psi < 1`.
    pub contraction_ok: bool,
}

fn norm1_vec<'a>(v: impl Iterator<Item = &'a f64>) -> f64 {
    v.map(|x| x.abs()).sum()
}

/// Induced 1-norm (max absolute column sum).
fn norm1_mat(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| norm1_vec(c.iter()))
        .fold(0.0, f64::max)
}

/// Evaluates the bounds `phi(sigma)` and `psi(sigma)` on the fixed-point map
/// of the whitened regression `D = W X + e` (rows `d_i`, `w_i`):
///
/// ```text
/// g_i    = G_sigma(beta ||w_i||_1 + |d_i|)
/// lambda = lambda_min(sum_i g_i w_i w_i^T)
/// phi    = sqrt(L) sum_i |d_i| ||w_i||_1 / lambda
/// psi    = sqrt(L) / (sigma^2 lambda)
///          * sum_i mu2 (beta ||w_i||_1 + |d_i|) ||w_i||_1
///                  (beta ||w_i w_i^T||_1 + |d_i| ||w_i||_1)
/// ```
pub fn contraction_bounds(
    d: &DVector<f64>,
    w: &DMatrix<f64>,
    beta: f64,
    mu2: f64,
    sigma: f64,
) -> Result<ContractionReport, DiagnosticsError> {
    if !(beta > 0.0 && sigma > 0.0) {
        return Err(DiagnosticsError::InvalidBound);
    }
    let l = d.len();
    if w.nrows() != l {
        return Err(DiagnosticsError::Shape { what: "W" });
    }
    let n = w.ncols();
    let mut gram = DMatrix::zeros(n, n);
    let mut phi_sum = 0.0;
    let mut psi_sum = 0.0;
    for i in 0..l {
        let row = w.row(i).transpose();
        let w1 = norm1_vec(row.iter());
        let di = d[i].abs();
        let reach = beta * w1 + di;
        let g = (-(reach * reach) / (2.0 * sigma * sigma)).exp();
        let outer = &row * row.transpose();
        gram += &outer * g;
        phi_sum += di * w1;
        psi_sum += mu2 * reach * w1 * (beta * norm1_mat(&outer) + di * w1);
    }
    let lambda = min_eigenvalue_graded(sym(gram));
    if !(lambda > 0.0) {
        return Err(DiagnosticsError::GramSingular(lambda));
    }
    let root_l = (l as f64).sqrt();
    let phi = root_l * phi_sum / lambda;
    let psi = root_l * psi_sum / (sigma * sigma * lambda);
    Ok(ContractionReport {
        sigma,
        phi,
        psi,
        beta,
        alpha: psi,
        contraction_ok: phi <= beta && psi < 1.0,
    })
}

/// Smallest eigenvalue of a symmetric matrix whose rows may differ by many
/// orders of magnitude (kernel weights underflow row by row). Taken as
/// `1 / lambda_max(M^-1)` through a Cholesky factor, which keeps relative
/// accuracy for graded matrices where a direct eigen solve does not.
fn min_eigenvalue_graded(m: DMatrix<f64>) -> f64 {
    match m.clone().cholesky() {
        Some(chol) => 1.0 / SymmetricEigen::new(sym(chol.inverse())).eigenvalues.max(),
        None => SymmetricEigen::new(m).eigenvalues.min().min(0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::GaussianMixture;
    use approx::assert_relative_eq;

    fn model(f: DMatrix<f64>, delta_f: DMatrix<f64>, h: DMatrix<f64>) -> UncertainLinearModel {
        let n = f.nrows();
        let m = h.nrows();
        UncertainLinearModel::new(
            f,
            delta_f,
            DMatrix::identity(n, n),
            h,
            GaussianMixture::new(vec![(1.0, DMatrix::identity(n, n))]).unwrap(),
            GaussianMixture::new(vec![(1.0, DMatrix::identity(m, m))]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn identity_grammians() {
        let md = model(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
        );
        let rep = grammians(
            &md,
            &DMatrix::identity(2, 2),
            &DMatrix::identity(2, 2),
            4,
            1,
        )
        .unwrap();
        assert_eq!(rep.observability, DMatrix::identity(2, 2) * 2.0);
        assert_eq!(rep.controllability, DMatrix::identity(2, 2));
        assert!(rep.observable() && rep.controllable());
    }

    #[test]
    fn zero_measurement_is_unobservable() {
        let md = model(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            DMatrix::zeros(1, 2),
        );
        let rep = grammians(
            &md,
            &DMatrix::identity(1, 1),
            &DMatrix::identity(2, 2),
            3,
            2,
        )
        .unwrap();
        assert_eq!(rep.observability, DMatrix::zeros(2, 2));
        assert_eq!(rep.observability_bounds.0, 0.0);
        assert!(!rep.observable());
        assert!(matches!(
            stability_condition(&md, &DMatrix::identity(1, 1), 3, 2),
            Err(DiagnosticsError::ObservabilityDegenerate(_))
        ));
    }

    #[test]
    fn window_validation() {
        let md = model(
            DMatrix::identity(1, 1),
            DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
        );
        let one = DMatrix::identity(1, 1);
        assert!(grammians(&md, &one, &one, 2, 3).is_err());
        assert!(grammians(&md, &one, &one, 2, 0).is_err());
        assert!(grammians(&md, &DMatrix::zeros(1, 1), &one, 2, 1).is_err());
    }

    #[test]
    fn grammian_window_telescopes() {
        let f = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.8]);
        let df = DMatrix::from_row_slice(2, 2, &[0.0, 0.05, 0.0, 0.0]);
        let h = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let md = model(f, df, h.clone());
        let r = DMatrix::from_element(1, 1, 2.0);
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let a = md.true_transition();
        for l in 2..6 {
            let prev = grammians(&md, &r, &q, 10, l - 1).unwrap();
            let cur = grammians(&md, &r, &q, 10, l).unwrap();
            let al = powers(&a, l);
            let obs_term = al[l].transpose() * h.transpose() * &h * &al[l] * 0.5;
            let con_term = al[l - 1].transpose() * &q * &al[l - 1];
            assert_relative_eq!(
                cur.observability,
                prev.observability + obs_term,
                max_relative = 1e-12
            );
            assert_relative_eq!(
                cur.controllability,
                prev.controllability + con_term,
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn no_perturbation_means_zero_radius() {
        let f = DMatrix::from_row_slice(2, 2, &[0.99, 0.01, 0.0, 0.99]);
        let md = model(
            f,
            DMatrix::zeros(2, 2),
            DMatrix::from_row_slice(1, 2, &[1.0, -1.0]),
        );
        let rep = stability_condition(&md, &DMatrix::from_element(1, 1, 200.8), 5, 5).unwrap();
        assert_eq!(rep.spectral_radius, 0.0);
        assert!(rep.holds);
    }

    #[test]
    fn radius_is_basis_free() {
        // O^-1 dO transforms by similarity under an invertible state change,
        // so its spectral radius must not move.
        let f = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.95]);
        let df = DMatrix::from_row_slice(2, 2, &[0.0, 0.04, 0.01, 0.0]);
        let h = DMatrix::from_row_slice(1, 2, &[1.0, 0.5]);
        let t = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.5, 1.5]);
        let t_inv = t.clone().try_inverse().unwrap();
        let base = model(f.clone(), df.clone(), h.clone());
        let moved = model(&t_inv * &f * &t, &t_inv * &df * &t, &h * &t);
        let r = DMatrix::from_element(1, 1, 1.5);
        let a = stability_condition(&base, &r, 6, 4).unwrap();
        let b = stability_condition(&moved, &r, 6, 4).unwrap();
        assert_relative_eq!(a.spectral_radius, b.spectral_radius, max_relative = 1e-9);
    }

    #[test]
    fn positivity_audit() {
        let p = vec![DMatrix::from_element(1, 1, 1.0)];
        assert_eq!(risk_positivity_audit(&p, 0.0), vec![true]);
        assert_eq!(risk_positivity_audit(&p, 0.4), vec![true]);
        assert_eq!(risk_positivity_audit(&p, 0.5), vec![false]);
    }

    #[test]
    fn contraction_scalar_instance() {
        // Hand evaluation: L = 2, w = (1, 1), d = (0, 1), beta = mu2 = sigma = 1.
        // g = (exp(-1/2), exp(-2)), lambda = g1 + g2.
        // phi = sqrt(2) * 1 / lambda
        // psi = sqrt(2) * [1*1*(1 + 0) + 2*1*(1 + 1)] / lambda = 5 sqrt(2) / lambda
        let d = DVector::from_vec(vec![0.0, 1.0]);
        let w = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let rep = contraction_bounds(&d, &w, 1.0, 1.0, 1.0).unwrap();
        let lambda = (-0.5f64).exp() + (-2.0f64).exp();
        assert_relative_eq!(rep.phi, 2f64.sqrt() / lambda, max_relative = 1e-14);
        assert_relative_eq!(rep.psi, 5.0 * 2f64.sqrt() / lambda, max_relative = 1e-14);
        assert!(!rep.contraction_ok);
    }

    #[test]
    fn contraction_limits() {
        let d = DVector::from_vec(vec![0.3, -0.2, 1.1]);
        let w = DMatrix::from_row_slice(3, 2, &[0.5, 0.0, 0.1, 0.4, 0.7, -0.7]);
        let beta = 2.0;
        let big = contraction_bounds(&d, &w, beta, 1.0, 1e6).unwrap();
        assert!(big.psi < 1e-6);
        let gram = w.transpose() * &w;
        let eps1 = 3f64.sqrt() * (0.3 * 0.5 + 0.2 * 0.5 + 1.1 * 1.4)
            / SymmetricEigen::new(gram).eigenvalues.min();
        assert_relative_eq!(big.phi, eps1, max_relative = 1e-9);
        assert_eq!(big.contraction_ok, eps1 <= beta);
        let mut prev = f64::INFINITY;
        for s in [0.3, 0.5, 1.0, 2.0, 5.0, 20.0] {
            let rep = contraction_bounds(&d, &w, beta, 1.0, s).unwrap();
            assert!(rep.psi <= prev);
            prev = rep.psi;
        }
        assert!(contraction_bounds(&d, &w, beta, 1.0, 0.3).unwrap().psi > 1.0);
        assert!(matches!(
            contraction_bounds(&d, &w, beta, 1.0, 1e-3),
            Err(DiagnosticsError::GramSingular(_))
        ));
    }

    #[test]
    fn graded_gram_keeps_precision() {
        let (a, b, c) = (1e-90, 1e-62, 1e-32);
        let m = DMatrix::from_row_slice(2, 2, &[a, b, b, c]);
        // c dominates, so the small root is det / trace to working precision.
        let exact = (a * c - b * b) / (a + c);
        let got = min_eigenvalue_graded(m);
        assert!((got / exact - 1.0).abs() < 1e-12, "{got}");
        assert!(min_eigenvalue_graded(DMatrix::zeros(2, 2)) <= 0.0);
    }
}
