//! The robust maximum correntropy Kalman recursion.
//!
//! One code path covers the whole family; the classic filters fall out as
//! parameter limits:
//!
//! | filter | `mu1` | bandwidth |
//! |--------|-------|-----------|
//! | KF     | 0     | infinite  |
//! | RSKF   | > 0   | infinite  |
//! | MCKF   | 0     | finite    |
//! | RMCKF  | > 0   | finite    |
//!
//! A step is: risk-inflated prediction, whitening of the augmented
//! regression by the Cholesky factors of `P_{k|k-1}` and `R`, a fixed-point
//! iteration for the posterior mean (kernel-weighted gain recomputed from the
//! current iterate), and a Joseph-form covariance update with the nominal
//! `P_{k|k-1}` and `R`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use thiserror::Error;

use crate::bandwidth::{select_bandwidth, BandwidthGrid, Selection};
use crate::noise::{is_symmetric, symmetrize};
use crate::system::NominalModel;

pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_T_MAX: usize = 100;

/// Kernel weights below this are treated as a singular `Pi`.
pub const PI_FLOOR: f64 = 1e-300;

/// Below this iterate norm the convergence test switches from relative to
/// absolute.
const RELATIVE_NORM_FLOOR: f64 = 1e-12;

const STATE_SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("invalid filter configuration: {0}")]
    InvalidConfig(String),
    #[error("{what} has length/dimension {found}, expected {expected}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("state covariance is not symmetric positive definite")]
    InvalidCovariance,
    #[error("P^-1 - 2 mu1 I is not positive definite for mu1 = {mu1} (min eigenvalue {min_eigenvalue}); reduce mu1")]
    RiskTooLarge { mu1: f64, min_eigenvalue: f64 },
    #[error("Cholesky factorization of {which} failed")]
    FactorizationFailed { which: &'static str },
    #[error(
        "kernel weight {index} underflowed to {value:e}; bandwidth too small for the current error"
    )]
    PiSingular { index: usize, value: f64 },
    #[error("innovation covariance is numerically singular")]
    InnovationSingular,
    #[error("fixed-point iteration did not converge in {iterations} iterations")]
    MaxIterations {
        iterations: usize,
        outcome: Box<FpiOutcome>,
    },
    #[error("every bandwidth candidate ({candidates}) failed")]
    AllCandidatesFailed { candidates: usize },
}

/// A [`FilterError`] tagged with the time index at which it occurred.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("step {k}: {source}")]
pub struct StepError {
    pub k: usize,
    #[source]
    pub source: FilterError,
}

/// Kernel width used by a single fixed-point run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelWidth {
    Finite(f64),
    Infinite,
}

impl KernelWidth {
    pub fn sigma(&self) -> Option<f64> {
        match self {
            KernelWidth::Finite(s) => Some(*s),
            KernelWidth::Infinite => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BandwidthPolicy {
    Fixed(f64),
    Selected(BandwidthGrid),
    Infinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub mu1: f64,
    pub mu2: f64,
    pub bandwidth: BandwidthPolicy,
    pub epsilon: f64,
    pub t_max: usize,
    /// Accumulate the weighted past errors into `Pi`.
    pub include_past_errors: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self::kalman()
    }
}

impl FilterConfig {
    pub fn kalman() -> Self {
        Self {
            mu1: 0.0,
            mu2: 1.0,
            bandwidth: BandwidthPolicy::Infinite,
            epsilon: DEFAULT_EPSILON,
            t_max: DEFAULT_T_MAX,
            include_past_errors: false,
        }
    }

    pub fn risk_sensitive(mu1: f64) -> Self {
        Self {
            mu1,
            ..Self::kalman()
        }
    }

    pub fn correntropy(sigma: f64) -> Self {
        Self {
            bandwidth: BandwidthPolicy::Fixed(sigma),
            ..Self::kalman()
        }
    }

    pub fn robust_correntropy(mu1: f64, sigma: f64) -> Self {
        Self {
            mu1,
            ..Self::correntropy(sigma)
        }
    }

    pub fn with_bandwidth(mut self, bandwidth: BandwidthPolicy) -> Self {
        self.bandwidth = bandwidth;
        self
    }

    pub fn validate(&self) -> Result<(), FilterError> {
        let bad = |msg: String| Err(FilterError::InvalidConfig(msg));
        if !(self.mu1 >= 0.0 && self.mu1.is_finite()) {
            return bad(format!("mu1 must be >= 0, got {}", self.mu1));
        }
        if !(self.mu2 > 0.0 && self.mu2.is_finite()) {
            return bad(format!("mu2 must be > 0, got {}", self.mu2));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if self.t_max == 0 {
            return bad("t_max must be at least 1".into());
        }
        if let BandwidthPolicy::Fixed(s) = self.bandwidth {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("fixed bandwidth must be > 0, got {s}"));
            }
        }
        Ok(())
    }
}

/// Posterior `(X_{k|k}, P_{k|k})` plus the weighted past-error accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Accumulated `-mu1 e_p^2 / (2 sigma^2)`, one entry per state.
    pub rho_p: DVector<f64>,
    /// Accumulated `-mu1 e_r^2 / (2 sigma^2)`, one entry per measurement.
    pub rho_r: DVector<f64>,
    pub k: usize,
}

impl FilterState {
    pub fn new(
        mean: DVector<f64>,
        cov: DMatrix<f64>,
        measurement_dim: usize,
    ) -> Result<Self, FilterError> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(FilterError::Dimension {
                what: "state covariance",
                expected: n,
                found: cov.nrows(),
            });
        }
        if !is_symmetric(&cov, STATE_SYMMETRY_TOL)
            || !(SymmetricEigen::new(cov.clone()).eigenvalues.min() > 0.0)
        {
            return Err(FilterError::InvalidCovariance);
        }
        Ok(Self {
            mean,
            cov,
            rho_p: DVector::zeros(n),
            rho_r: DVector::zeros(measurement_dim),
            k: 0,
        })
    }
}

/// Whitened augmented regression `D = W X + e`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedFactors {
    /// Lower Cholesky factor of `P_{k|k-1}`.
    pub b_p: DMatrix<f64>,
    /// Lower Cholesky factor of `R`.
    pub b_r: DMatrix<f64>,
    pub d: DVector<f64>,
    pub w: DMatrix<f64>,
}

/// Risk-sensitive prediction: `F X` and `F (P^-1 - 2 mu1 I)^-1 F^T + Q`.
pub fn predict(
    state: &FilterState,
    f: &DMatrix<f64>,
    q: &DMatrix<f64>,
    mu1: f64,
) -> Result<(DVector<f64>, DMatrix<f64>), FilterError> {
    let n = state.mean.len();
    if f.nrows() != n || f.ncols() != n || q.nrows() != n || q.ncols() != n {
        return Err(FilterError::Dimension {
            what: "F/Q",
            expected: n,
            found: f.nrows(),
        });
    }
    let inflated = if mu1 == 0.0 {
        state.cov.clone()
    } else {
        let p_inv = Cholesky::new(state.cov.clone())
            .ok_or(FilterError::FactorizationFailed {
                which: "P_{k-1|k-1}",
            })?
            .inverse();
        let info = symmetrize(&(p_inv - DMatrix::identity(n, n) * (2.0 * mu1)));
        let min_eigenvalue = SymmetricEigen::new(info.clone()).eigenvalues.min();
        if !(min_eigenvalue > 0.0) {
            return Err(FilterError::RiskTooLarge {
                mu1,
                min_eigenvalue,
            });
        }
        Cholesky::new(info)
            .ok_or(FilterError::RiskTooLarge {
                mu1,
                min_eigenvalue,
            })?
            .inverse()
    };
    let prior_mean = f * &state.mean;
    let prior_cov = symmetrize(&(f * inflated * f.transpose() + q));
    Ok((prior_mean, prior_cov))
}

fn lower_factor(m: &DMatrix<f64>, which: &'static str) -> Result<DMatrix<f64>, FilterError> {
    Cholesky::new(m.clone())
        .map(Cholesky::unpack)
        .ok_or(FilterError::FactorizationFailed { which })
}

fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    l.solve_lower_triangular(b)
        .expect("Cholesky factor has a positive diagonal")
}

fn solve_lower_vec(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.solve_lower_triangular(b)
        .expect("Cholesky factor has a positive diagonal")
}

/// Factors `blockdiag(P_{k|k-1}, R)` and whitens `[X_{k|k-1}; Y] = [I; H] X + v`.
pub fn build_augmented(
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    r: &DMatrix<f64>,
    h: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<AugmentedFactors, FilterError> {
    let n = prior_mean.len();
    let m = y.len();
    if h.nrows() != m || h.ncols() != n {
        return Err(FilterError::Dimension {
            what: "H",
            expected: m,
            found: h.nrows(),
        });
    }
    if r.nrows() != m || r.ncols() != m {
        return Err(FilterError::Dimension {
            what: "R",
            expected: m,
            found: r.nrows(),
        });
    }
    let b_p = lower_factor(prior_cov, "P_{k|k-1}")?;
    let b_r = lower_factor(r, "R")?;

    let mut d = DVector::zeros(n + m);
    d.rows_mut(0, n)
        .copy_from(&solve_lower_vec(&b_p, prior_mean));
    d.rows_mut(n, m).copy_from(&solve_lower_vec(&b_r, y));

    let mut w = DMatrix::zeros(n + m, n);
    w.view_mut((0, 0), (n, n))
        .copy_from(&solve_lower(&b_p, &DMatrix::identity(n, n)));
    w.view_mut((n, 0), (m, n)).copy_from(&solve_lower(&b_r, h));

    Ok(AugmentedFactors { b_p, b_r, d, w })
}

/// `e_p = -B_p^-1 (x - X_{k|k-1})`, `e_r = B_r^-1 (Y - H x)`.
pub fn weighted_errors(
    candidate: &DVector<f64>,
    prior_mean: &DVector<f64>,
    y: &DVector<f64>,
    h: &DMatrix<f64>,
    b_p: &DMatrix<f64>,
    b_r: &DMatrix<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let e_p = -solve_lower_vec(b_p, &(candidate - prior_mean));
    let e_r = solve_lower_vec(b_r, &(y - h * candidate));
    (e_p, e_r)
}

/// Diagonal of `Pi`: `exp(rho_i - mu2 e_i^2 / (2 sigma^2))`.
pub fn compute_pi(
    e: &DVector<f64>,
    rho: &DVector<f64>,
    mu2: f64,
    width: KernelWidth,
) -> Result<DVector<f64>, FilterError> {
    let mut pi = DVector::zeros(e.len());
    for i in 0..e.len() {
        let exponent = match width {
            KernelWidth::Infinite => rho[i],
            KernelWidth::Finite(sigma) => rho[i] - mu2 * e[i] * e[i] / (2.0 * sigma * sigma),
        };
        let value = exponent.exp();
        if !(value >= PI_FLOOR) {
            return Err(FilterError::PiSingular { index: i, value });
        }
        pi[i] = value;
    }
    Ok(pi)
}

fn reweight(b: &DMatrix<f64>, pi: &DVector<f64>) -> DMatrix<f64> {
    if pi.iter().all(|&p| p == 1.0) {
        return b * b.transpose();
    }
    let mut scaled = b.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col /= pi[j];
    }
    symmetrize(&(scaled * b.transpose()))
}

/// Kernel-weighted gain `P_bar H^T (H P_bar H^T + R_bar)^-1` with
/// `P_bar = B_p Pi_p^-1 B_p^T` and `R_bar = B_r Pi_r^-1 B_r^T`.
pub fn gain(
    b_p: &DMatrix<f64>,
    b_r: &DMatrix<f64>,
    pi_p: &DVector<f64>,
    pi_r: &DVector<f64>,
    h: &DMatrix<f64>,
) -> Result<DMatrix<f64>, FilterError> {
    let p_bar = reweight(b_p, pi_p);
    let r_bar = reweight(b_r, pi_r);
    let hp = h * &p_bar;
    let s = symmetrize(&(&hp * h.transpose() + r_bar));
    if !s.iter().all(|v| v.is_finite()) {
        return Err(FilterError::InnovationSingular);
    }
    let chol = Cholesky::new(s).ok_or(FilterError::InnovationSingular)?;
    // K^T = S^-1 H P_bar since S and P_bar are symmetric.
    let k = chol.solve(&hp).transpose();
    if k.iter().all(|v| v.is_finite()) {
        Ok(k)
    } else {
        Err(FilterError::InnovationSingular)
    }
}

/// Everything the measurement update needs at one time step, factored once
/// and shared by every fixed-point run (and every bandwidth candidate).
#[derive(Debug, Clone)]
pub struct UpdateProblem {
    pub prior_mean: DVector<f64>,
    pub prior_cov: DMatrix<f64>,
    pub y: DVector<f64>,
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub factors: AugmentedFactors,
    pub innovation: DVector<f64>,
    pub rho_p: DVector<f64>,
    pub rho_r: DVector<f64>,
}

impl UpdateProblem {
    pub fn new(
        prior_mean: DVector<f64>,
        prior_cov: DMatrix<f64>,
        y: &DVector<f64>,
        h: &DMatrix<f64>,
        r: &DMatrix<f64>,
    ) -> Result<Self, FilterError> {
        let factors = build_augmented(&prior_mean, &prior_cov, r, h, y)?;
        let innovation = y - h * &prior_mean;
        let n = prior_mean.len();
        let m = y.len();
        Ok(Self {
            prior_mean,
            prior_cov,
            y: y.clone(),
            h: h.clone(),
            r: r.clone(),
            factors,
            innovation,
            rho_p: DVector::zeros(n),
            rho_r: DVector::zeros(m),
        })
    }

    pub fn with_past_errors(mut self, rho_p: DVector<f64>, rho_r: DVector<f64>) -> Self {
        self.rho_p = rho_p;
        self.rho_r = rho_r;
        self
    }

    pub fn errors_at(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        weighted_errors(
            x,
            &self.prior_mean,
            &self.y,
            &self.h,
            &self.factors.b_p,
            &self.factors.b_r,
        )
    }
}

/// Result of one fixed-point run.
#[derive(Debug, Clone, PartialEq)]
pub struct FpiOutcome {
    pub posterior_mean: DVector<f64>,
    pub gain: DMatrix<f64>,
    /// Weighted process error at `posterior_mean`.
    pub e_p: DVector<f64>,
    /// Weighted measurement error at `posterior_mean`.
    pub e_r: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub width: KernelWidth,
}

impl FpiOutcome {
    /// `[e_p; e_r]`.
    pub fn stacked_errors(&self) -> Vec<f64> {
        self.e_p.iter().chain(self.e_r.iter()).copied().collect()
    }
}

/// Fixed-point iteration for the posterior mean.
///
/// Starts from the prior mean; each pass evaluates the errors at the current
/// iterate, rebuilds `Pi` and the gain, and sets
/// `x <- X_{k|k-1} + K (Y - H X_{k|k-1})`. Stops once
/// `||x_new - x|| / ||x|| <= epsilon` (absolute when `||x||` is ~0). With an
/// infinite bandwidth `Pi` does not depend on the iterate and one pass is
/// exact.
pub fn fpi_update(
    problem: &UpdateProblem,
    width: KernelWidth,
    config: &FilterConfig,
) -> Result<FpiOutcome, FilterError> {
    let f = &problem.factors;
    let mut current = problem.prior_mean.clone();
    let mut last_gain = None;
    let mut converged = false;
    let mut iterations = 0;
    for t in 1..=config.t_max {
        iterations = t;
        let (e_p, e_r) = problem.errors_at(&current);
        let pi_p = compute_pi(&e_p, &problem.rho_p, config.mu2, width)?;
        let pi_r = compute_pi(&e_r, &problem.rho_r, config.mu2, width)?;
        let k = gain(&f.b_p, &f.b_r, &pi_p, &pi_r, &problem.h)?;
        let next = &problem.prior_mean + &k * &problem.innovation;
        let step = (&next - &current).norm();
        let base = current.norm();
        converged = if base < RELATIVE_NORM_FLOOR {
            step <= config.epsilon
        } else {
            step / base <= config.epsilon
        };
        current = next;
        last_gain = Some(k);
        if converged || width == KernelWidth::Infinite {
            converged = true;
            break;
        }
    }
    let (e_p, e_r) = problem.errors_at(&current);
    let outcome = FpiOutcome {
        posterior_mean: current,
        gain: last_gain.expect("t_max >= 1"),
        e_p,
        e_r,
        iterations,
        converged,
        width,
    };
    if converged {
        Ok(outcome)
    } else {
        Err(FilterError::MaxIterations {
            iterations,
            outcome: Box::new(outcome),
        })
    }
}

/// Joseph form `(I - K H) P (I - K H)^T + K R K^T`, symmetrized.
pub fn posterior_covariance(
    prior_cov: &DMatrix<f64>,
    k: &DMatrix<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = prior_cov.nrows();
    let a = DMatrix::identity(n, n) - k * h;
    let p = &a * prior_cov * a.transpose() + k * r * k.transpose();
    symmetrize(&p)
}

/// What one filter step produced besides the new state.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub state: FilterState,
    /// Bandwidth used for the update (`None` for infinite).
    pub sigma: Option<f64>,
    pub iterations: usize,
    /// `mu1` actually used for the prediction.
    pub mu1_used: f64,
    /// How many times `mu1` was halved to restore `P^-1 - 2 mu1 I > 0`.
    pub halvings: u32,
    pub selection: Option<Selection>,
}

/// One full recursion with `config.mu1`.
pub fn step(
    state: &FilterState,
    y: &DVector<f64>,
    model: &NominalModel,
    config: &FilterConfig,
) -> Result<StepOutput, StepError> {
    let k = state.k + 1;
    config
        .validate()
        .map_err(|source| StepError { k, source })?;
    step_inner(state, y, model, config, config.mu1).map_err(|source| StepError { k, source })
}

/// Fallback used when `mu1` violates the risk condition.
///
/// `mu1` is halved until `2 mu1 < margin * lambda_min(P^-1)`, which bounds the
/// prior inflation factor `(1 - 2 mu1 lambda_max(P))^-1` by `1 / (1 - margin)`.
/// `margin = 1` accepts the first value with `P^-1 - 2 mu1 I > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalvingPolicy {
    pub max_halvings: u32,
    pub margin: f64,
}

impl HalvingPolicy {
    pub fn positivity(max_halvings: u32) -> Self {
        Self {
            max_halvings,
            margin: 1.0,
        }
    }
}

/// Like [`step`], but halves `mu1` per `policy` (and again on
/// [`FilterError::RiskTooLarge`]) before giving up.
pub fn step_with_halving(
    state: &FilterState,
    y: &DVector<f64>,
    model: &NominalModel,
    config: &FilterConfig,
    policy: &HalvingPolicy,
) -> Result<StepOutput, StepError> {
    let k = state.k + 1;
    config
        .validate()
        .map_err(|source| StepError { k, source })?;
    if !(policy.margin > 0.0 && policy.margin <= 1.0) {
        let source = FilterError::InvalidConfig(format!(
            "halving margin must be in (0, 1], got {}",
            policy.margin
        ));
        return Err(StepError { k, source });
    }
    let mut mu1 = config.mu1;
    let mut halvings = 0;
    if mu1 > 0.0 && policy.margin < 1.0 {
        let lambda_max = SymmetricEigen::new(state.cov.clone()).eigenvalues.max();
        let bound = policy.margin / lambda_max;
        while 2.0 * mu1 >= bound && halvings < policy.max_halvings {
            mu1 *= 0.5;
            halvings += 1;
        }
    }
    loop {
        match step_inner(state, y, model, config, mu1) {
            Ok(mut out) => {
                out.halvings = halvings;
                return Ok(out);
            }
            Err(FilterError::RiskTooLarge { .. }) if halvings < policy.max_halvings => {
                mu1 *= 0.5;
                halvings += 1;
            }
            Err(source) => return Err(StepError { k, source }),
        }
    }
}

fn step_inner(
    state: &FilterState,
    y: &DVector<f64>,
    model: &NominalModel,
    config: &FilterConfig,
    mu1: f64,
) -> Result<StepOutput, FilterError> {
    let (prior_mean, prior_cov) = predict(state, &model.f, &model.q, mu1)?;
    let mut problem = UpdateProblem::new(prior_mean, prior_cov, y, &model.h, &model.r)?;
    if config.include_past_errors {
        problem = problem.with_past_errors(state.rho_p.clone(), state.rho_r.clone());
    }
    let (outcome, selection) = match &config.bandwidth {
        BandwidthPolicy::Infinite => (fpi_update(&problem, KernelWidth::Infinite, config)?, None),
        BandwidthPolicy::Fixed(sigma) => (
            fpi_update(&problem, KernelWidth::Finite(*sigma), config)?,
            None,
        ),
        BandwidthPolicy::Selected(grid) => {
            let sel = select_bandwidth(&problem, config, grid)?;
            (sel.outcome.clone(), Some(sel))
        }
    };
    let cov = posterior_covariance(&problem.prior_cov, &outcome.gain, &model.h, &model.r);

    let mut rho_p = state.rho_p.clone();
    let mut rho_r = state.rho_r.clone();
    if config.include_past_errors {
        if let KernelWidth::Finite(sigma) = outcome.width {
            let scale = mu1 / (2.0 * sigma * sigma);
            rho_p -= outcome.e_p.map(|e| e * e) * scale;
            rho_r -= outcome.e_r.map(|e| e * e) * scale;
        }
    }

    Ok(StepOutput {
        sigma: outcome.width.sigma(),
        iterations: outcome.iterations,
        mu1_used: mu1,
        halvings: 0,
        selection,
        state: FilterState {
            mean: outcome.posterior_mean,
            cov,
            rho_p,
            rho_r,
            k: state.k + 1,
        },
    })
}

/// Convenience driver owning the current state.
#[derive(Debug, Clone)]
pub struct RobustFilter {
    pub config: FilterConfig,
    pub state: FilterState,
}

impl RobustFilter {
    pub fn new(config: FilterConfig, state: FilterState) -> Result<Self, FilterError> {
        config.validate()?;
        Ok(Self { config, state })
    }

    pub fn update(
        &mut self,
        y: &DVector<f64>,
        model: &NominalModel,
    ) -> Result<StepOutput, StepError> {
        let out = step(&self.state, y, model, &self.config)?;
        self.state = out.state.clone();
        Ok(out)
    }
}

/// Lower Cholesky factor as an owned matrix, or `None` if not PD.
pub fn cholesky_lower(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    Cholesky::<f64, Dyn>::new(m.clone()).map(Cholesky::unpack)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn v(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    fn scalar_state(mean: f64, p: f64) -> FilterState {
        FilterState::new(v(mean), s(p), 1).unwrap()
    }

    #[test]
    fn predict_kf_and_risk_inflation() {
        let st = scalar_state(0.0, 1.0);
        let (_, p) = predict(&st, &s(1.0), &s(1.0), 0.0).unwrap();
        assert_eq!(p[(0, 0)], 2.0);
        let (_, p) = predict(&st, &s(1.0), &s(1.0), 0.25).unwrap();
        assert_relative_eq!(p[(0, 0)], 3.0, max_relative = 1e-14);
        let err = predict(&st, &s(1.0), &s(1.0), 0.5).unwrap_err();
        assert!(matches!(err, FilterError::RiskTooLarge { .. }));
    }

    #[test]
    fn augmented_identity_and_scalar_factors() {
        let x = DVector::from_vec(vec![1.0, -2.0]);
        let y = DVector::from_vec(vec![0.5]);
        let h = DMatrix::from_row_slice(1, 2, &[1.0, 3.0]);
        let a = build_augmented(
            &x,
            &DMatrix::identity(2, 2),
            &DMatrix::identity(1, 1),
            &h,
            &y,
        )
        .unwrap();
        assert_eq!(a.b_p, DMatrix::identity(2, 2));
        assert_eq!(a.b_r, DMatrix::identity(1, 1));
        assert_eq!(a.d.as_slice(), &[1.0, -2.0, 0.5]);
        assert_eq!(
            a.w.as_slice(),
            DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 3.0]).as_slice()
        );

        let a = build_augmented(&v(3.0), &s(4.0), &s(1.0), &s(1.0), &v(0.0)).unwrap();
        assert_eq!(a.b_p[(0, 0)], 2.0);
        assert_eq!(a.d[0], 1.5);

        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let err = build_augmented(&x, &bad, &DMatrix::identity(1, 1), &h, &y).unwrap_err();
        assert!(matches!(err, FilterError::FactorizationFailed { .. }));
    }

    #[test]
    fn weighted_error_cases() {
        let h = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let x = DVector::from_vec(vec![0.3, 0.7]);
        let y = &h * &x;
        let (ep, er) = weighted_errors(&x, &x, &y, &h, &DMatrix::identity(2, 2), &s(2.0));
        assert!(ep.iter().chain(er.iter()).all(|&e| e == 0.0));

        let (ep, _) = weighted_errors(&v(1.0), &v(0.0), &v(0.0), &s(1.0), &s(2.0), &s(1.0));
        assert_eq!(ep[0], -0.5);
        let (_, er) = weighted_errors(&v(1.0), &v(1.0), &v(3.0), &s(1.0), &s(1.0), &s(1.0));
        assert_eq!(er[0], 2.0);
    }

    #[test]
    fn pi_entries() {
        let e = DVector::from_vec(vec![0.3, -2.0]);
        let zero = DVector::zeros(2);
        assert_eq!(
            compute_pi(&e, &zero, 1.0, KernelWidth::Infinite).unwrap(),
            DVector::from_element(2, 1.0)
        );

        let sigma = 0.8;
        let pi = compute_pi(
            &v(sigma * 2f64.sqrt()),
            &v(0.0),
            1.0,
            KernelWidth::Finite(sigma),
        )
        .unwrap();
        assert_relative_eq!(pi[0], 0.36787944117144233, max_relative = 1e-14);

        let pi = compute_pi(&v(0.0), &v(-0.3), 1.0, KernelWidth::Finite(1.0)).unwrap();
        assert_relative_eq!(pi[0], 0.7408182206817179, max_relative = 1e-14);

        let err = compute_pi(&v(100.0), &v(0.0), 1.0, KernelWidth::Finite(0.1)).unwrap_err();
        assert!(matches!(err, FilterError::PiSingular { index: 0, .. }));
    }

    #[test]
    fn gain_cases() {
        let one = v(1.0);
        let k = gain(&s(1.0), &s(1.0), &one, &one, &s(1.0)).unwrap();
        assert_relative_eq!(k[(0, 0)], 0.5, max_relative = 1e-15);
        let k = gain(&s(1.0), &s(1e8), &one, &one, &s(1.0)).unwrap();
        assert!(k[(0, 0)] < 1e-15);

        // identity Pi reproduces the textbook gain
        let p = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let r = DMatrix::from_row_slice(1, 1, &[2.0]);
        let h = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let k = gain(
            &cholesky_lower(&p).unwrap(),
            &cholesky_lower(&r).unwrap(),
            &DVector::from_element(2, 1.0),
            &one,
            &h,
        )
        .unwrap();
        let textbook = &p * h.transpose() * (&h * &p * h.transpose() + &r).try_inverse().unwrap();
        assert_relative_eq!(k, textbook, max_relative = 1e-13);
    }

    #[test]
    fn joseph_form_cases() {
        let p = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let h = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let r = s(1.0);
        assert_eq!(posterior_covariance(&p, &DMatrix::zeros(2, 1), &h, &r), p);
        let post = posterior_covariance(&s(1.0), &s(0.5), &s(1.0), &s(1.0));
        assert_relative_eq!(post[(0, 0)], 0.5, max_relative = 1e-15);
    }

    #[test]
    fn zero_innovation_is_a_fixed_point() {
        let h = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let prior = DVector::from_vec(vec![3.0, 1.0]);
        let y = &h * &prior;
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let problem = UpdateProblem::new(prior.clone(), p, &y, &h, &s(1.0)).unwrap();
        for width in [
            KernelWidth::Finite(0.5),
            KernelWidth::Finite(5.0),
            KernelWidth::Infinite,
        ] {
            let out = fpi_update(&problem, width, &FilterConfig::correntropy(1.0)).unwrap();
            assert_eq!(out.posterior_mean, prior);
            assert_eq!(out.iterations, 1);
        }
    }

    #[test]
    fn infinite_width_takes_one_pass() {
        let problem = UpdateProblem::new(v(0.0), s(1.0), &v(1.0), &s(1.0), &s(1.0)).unwrap();
        let out = fpi_update(&problem, KernelWidth::Infinite, &FilterConfig::kalman()).unwrap();
        assert_eq!(out.iterations, 1);
        assert!(out.converged);
        assert_relative_eq!(out.posterior_mean[0], 0.5, max_relative = 1e-15);
    }

    #[test]
    fn max_iterations_returns_last_iterate() {
        let problem = UpdateProblem::new(v(0.0), s(1.0), &v(1.0), &s(1.0), &s(1.0)).unwrap();
        let cfg = FilterConfig {
            t_max: 1,
            epsilon: 1e-12,
            ..FilterConfig::correntropy(1.0)
        };
        match fpi_update(&problem, KernelWidth::Finite(1.0), &cfg) {
            Err(FilterError::MaxIterations {
                iterations,
                outcome,
            }) => {
                assert_eq!(iterations, 1);
                assert!(!outcome.converged);
                // first pass: e_r = 1 so R_bar = exp(1/2)
                assert_relative_eq!(
                    outcome.posterior_mean[0],
                    1.0 / (1.0 + 0.5f64.exp()),
                    max_relative = 1e-14
                );
            }
            other => panic!("expected MaxIterations, got {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(FilterConfig::kalman().validate().is_ok());
        assert!(FilterConfig {
            mu2: 0.0,
            ..FilterConfig::kalman()
        }
        .validate()
        .is_err());
        assert!(FilterConfig {
            mu1: -0.1,
            ..FilterConfig::kalman()
        }
        .validate()
        .is_err());
        assert!(FilterConfig {
            t_max: 0,
            ..FilterConfig::kalman()
        }
        .validate()
        .is_err());
        assert!(FilterConfig {
            epsilon: 0.0,
            ..FilterConfig::kalman()
        }
        .validate()
        .is_err());
        assert!(FilterConfig::correntropy(0.0).validate().is_err());
    }

    #[test]
    fn halving_recovers_from_large_mu1() {
        let model = NominalModel {
            f: s(1.0),
            h: s(1.0),
            q: s(1.0),
            r: s(1.0),
        };
        let st = scalar_state(0.0, 1.0);
        let cfg = FilterConfig::risk_sensitive(0.5);
        assert!(matches!(
            step(&st, &v(1.0), &model, &cfg),
            Err(StepError {
                k: 1,
                source: FilterError::RiskTooLarge { .. }
            })
        ));
        let out =
            step_with_halving(&st, &v(1.0), &model, &cfg, &HalvingPolicy::positivity(10)).unwrap();
        assert_eq!(out.halvings, 1);
        assert_eq!(out.mu1_used, 0.25);
        assert_eq!(out.state.k, 1);

        // With a margin of 0.1 the accepted value must satisfy 2 mu1 < 0.1.
        let out = step_with_halving(
            &st,
            &v(1.0),
            &model,
            &cfg,
            &HalvingPolicy {
                max_halvings: 10,
                margin: 0.1,
            },
        )
        .unwrap();
        assert_eq!(out.mu1_used, 0.5 / 16.0);
        assert_eq!(out.halvings, 4);
        assert!(step_with_halving(
            &st,
            &v(1.0),
            &model,
            &cfg,
            &HalvingPolicy {
                max_halvings: 10,
                margin: 0.0
            }
        )
        .is_err());
    }

    #[test]
    fn past_errors_accumulate_non_positive() {
        let model = NominalModel {
            f: s(1.0),
            h: s(1.0),
            q: s(1.0),
            r: s(1.0),
        };
        let cfg = FilterConfig {
            include_past_errors: true,
            ..FilterConfig::robust_correntropy(0.1, 2.0)
        };
        let mut st = scalar_state(0.0, 1.0);
        for y in [1.0, -0.5, 2.0, 0.3] {
            st = step(&st, &v(y), &model, &cfg).unwrap().state;
            assert!(st.rho_p[0] <= 0.0 && st.rho_r[0] <= 0.0);
        }
        assert!(st.rho_r[0] < 0.0);
    }
}
