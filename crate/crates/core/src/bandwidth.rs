//! Per-step kernel bandwidth selection.
//!
//! Every candidate width on a grid is run through the fixed-point update; the
//! converged whitened errors `[e_p; e_r]` are scored with
//! `J_KB = log(mean_i exp(-e_i^2 / (2 sigma_c^2)))` and the best-scoring width
//! wins. Ties go to the largest width.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::filter::{
    fpi_update, FilterConfig, FilterError, FpiOutcome, KernelWidth, UpdateProblem,
};

pub const DEFAULT_GRID_MIN: f64 = 0.5;
pub const DEFAULT_GRID_MAX: f64 = 50.0;
pub const DEFAULT_GRID_COUNT: usize = 25;
pub const DEFAULT_SIGMA_C: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("bandwidth grid is empty")]
    Empty,
    #[error("bandwidth grid values must be positive, finite and strictly increasing")]
    NotIncreasing,
    #[error("sigma_c must be positive and finite, got {0}")]
    InvalidSigmaC(f64),
    #[error(
        "log-spaced grid needs 0 < lo <= hi and count >= 1 (got lo={lo}, hi={hi}, count={count})"
    )]
    InvalidRange { lo: f64, hi: f64, count: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("innovation is zero; the heuristic bandwidth would be 0")]
    ZeroInnovation,
    #[error("heuristic bandwidth is not finite")]
    NonFinite,
    #[error("measurement covariance is singular")]
    SingularR,
}

/// Candidate widths plus the constant width of the selection cost.
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthGrid {
    values: Vec<f64>,
    sigma_c: f64,
}

impl BandwidthGrid {
    pub fn new(values: Vec<f64>, sigma_c: f64) -> Result<Self, GridError> {
        if values.is_empty() {
            return Err(GridError::Empty);
        }
        let positive = values.iter().all(|&v| v > 0.0 && v.is_finite());
        let increasing = values.windows(2).all(|w| w[0] < w[1]);
        if !positive || !increasing {
            return Err(GridError::NotIncreasing);
        }
        if !(sigma_c > 0.0 && sigma_c.is_finite()) {
            return Err(GridError::InvalidSigmaC(sigma_c));
        }
        Ok(Self { values, sigma_c })
    }

    /// `count` log-spaced values from `lo` to `hi` inclusive.
    pub fn log_spaced(lo: f64, hi: f64, count: usize, sigma_c: f64) -> Result<Self, GridError> {
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) || count == 0 || (count > 1 && hi == lo) {
            return Err(GridError::InvalidRange { lo, hi, count });
        }
        let values = if count == 1 {
            vec![lo]
        } else {
            let ratio = (hi / lo).ln();
            (0..count)
                .map(|i| {
                    if i == count - 1 {
                        hi
                    } else {
                        lo * (ratio * i as f64 / (count - 1) as f64).exp()
                    }
                })
                .collect()
        };
        Self::new(values, sigma_c)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sigma_c(&self) -> f64 {
        self.sigma_c
    }
}

impl Default for BandwidthGrid {
    fn default() -> Self {
        Self::log_spaced(
            DEFAULT_GRID_MIN,
            DEFAULT_GRID_MAX,
            DEFAULT_GRID_COUNT,
            DEFAULT_SIGMA_C,
        )
        .expect("default grid is valid")
    }
}

/// `log((1/L) sum_i exp(-e_i^2 / (2 sigma_c^2)))`, evaluated in log-sum-exp
/// form so large errors do not collapse to `-inf`. Always `<= 0`.
pub fn jkb(errors: &[f64], sigma_c: f64) -> f64 {
    assert!(!errors.is_empty(), "jkb needs at least one error");
    let scale = 2.0 * sigma_c * sigma_c;
    let exponents: Vec<f64> = errors.iter().map(|e| -(e * e) / scale).collect();
    let top = exponents.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = exponents.iter().map(|a| (a - top).exp()).sum();
    let value = top + (sum / errors.len() as f64).ln();
    value.min(0.0)
}

/// Score of one grid candidate; `jkb` is `None` when its update failed.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateScore {
    pub sigma: f64,
    pub jkb: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub sigma: f64,
    pub jkb: f64,
    /// Update outputs of the winning candidate.
    pub outcome: FpiOutcome,
    pub candidates: Vec<CandidateScore>,
    pub failed: usize,
}

/// Runs the fixed-point update for every grid width and keeps the one whose
/// converged errors maximize [`jkb`]. Candidates that hit `PiSingular`,
/// `InnovationSingular` or `MaxIterations` are skipped and counted.
pub fn select_bandwidth(
    problem: &UpdateProblem,
    config: &FilterConfig,
    grid: &BandwidthGrid,
) -> Result<Selection, FilterError> {
    let mut best: Option<(f64, f64, FpiOutcome)> = None;
    let mut candidates = Vec::with_capacity(grid.values.len());
    let mut failed = 0;
    for &sigma in &grid.values {
        match fpi_update(problem, KernelWidth::Finite(sigma), config) {
            Ok(outcome) => {
                let score = jkb(&outcome.stacked_errors(), grid.sigma_c);
                candidates.push(CandidateScore {
                    sigma,
                    jkb: Some(score),
                });
                let better = match &best {
                    None => true,
                    Some((b_score, b_sigma, _)) => {
                        score > *b_score || (score == *b_score && sigma > *b_sigma)
                    }
                };
                if better {
                    best = Some((score, sigma, outcome));
                }
            }
            Err(
                FilterError::PiSingular { .. }
                | FilterError::InnovationSingular
                | FilterError::MaxIterations { .. },
            ) => {
                failed += 1;
                candidates.push(CandidateScore { sigma, jkb: None });
            }
            Err(other) => return Err(other),
        }
    }
    match best {
        Some((jkb, sigma, outcome)) => Ok(Selection {
            sigma,
            jkb,
            outcome,
            candidates,
            failed,
        }),
        None => Err(FilterError::AllCandidatesFailed {
            candidates: grid.values.len(),
        }),
    }
}

/// Heuristic bandwidth rules used as comparison baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineRule {
    /// `||nu||`.
    Euclidean,
    /// `|nu^T R^-1 nu|`.
    Mahalanobis,
    /// `(||nu||_{R^-1} + ||H P H^T||)^-1`.
    WeightedInnovation,
}

/// Evaluates a heuristic rule on the innovation `nu = Y - H X_{k|k-1}`.
pub fn baseline_bandwidth(
    rule: BaselineRule,
    y: &DVector<f64>,
    h: &DMatrix<f64>,
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<f64, BaselineError> {
    let nu = y - h * prior_mean;
    let r_inv = || {
        r.clone()
            .cholesky()
            .map(|c| c.inverse())
            .ok_or(BaselineError::SingularR)
    };
    let sigma = match rule {
        BaselineRule::Euclidean => nu.norm(),
        BaselineRule::Mahalanobis => (nu.transpose() * r_inv()? * &nu)[(0, 0)].abs(),
        BaselineRule::WeightedInnovation => {
            let weighted = (nu.transpose() * r_inv()? * &nu)[(0, 0)].max(0.0).sqrt();
            let hph = h * prior_cov * h.transpose();
            let spread = SymmetricEigen::new((&hph + hph.transpose()) * 0.5)
                .eigenvalues
                .iter()
                .fold(0.0f64, |a, &b| a.max(b.abs()));
            1.0 / (weighted + spread)
        }
    };
    if sigma == 0.0 {
        Err(BaselineError::ZeroInnovation)
    } else if !sigma.is_finite() {
        Err(BaselineError::NonFinite)
    } else {
        Ok(sigma)
    }
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

    #[test]
    fn jkb_values() {
        assert_eq!(jkb(&[0.0, 0.0, 0.0], 0.3), 0.0);
        assert_relative_eq!(jkb(&[1.0, 1.0], 1.0), -0.5, max_relative = 1e-14);
        assert_relative_eq!(
            jkb(&[0.0, 2.0], 1.0),
            ((1.0 + (-2f64).exp()) / 2.0).ln(),
            max_relative = 1e-14
        );
        assert!((jkb(&[0.0, 2.0], 1.0) + 0.56622).abs() < 1e-5);
        // does not underflow to -inf
        assert!(jkb(&[1e3, 2e3], 0.5).is_finite());
    }

    #[test]
    fn grid_validation() {
        assert!(BandwidthGrid::new(vec![], 1.0).is_err());
        assert!(BandwidthGrid::new(vec![1.0, 1.0], 1.0).is_err());
        assert!(BandwidthGrid::new(vec![2.0, 1.0], 1.0).is_err());
        assert!(BandwidthGrid::new(vec![-1.0, 1.0], 1.0).is_err());
        assert!(BandwidthGrid::new(vec![1.0], 0.0).is_err());
        let g = BandwidthGrid::default();
        assert_eq!(g.values().len(), 25);
        assert_eq!(g.values()[0], 0.5);
        assert_eq!(g.values()[24], 50.0);
        assert_relative_eq!(g.values()[12], 5.0, max_relative = 1e-12);
    }

    #[test]
    fn zero_innovation_ties_to_largest_sigma() {
        let problem = UpdateProblem::new(v(2.0), s(1.0), &v(2.0), &s(1.0), &s(1.0)).unwrap();
        let grid = BandwidthGrid::new(vec![0.5, 1.0, 2.0, 5.0, 10.0], 1.0).unwrap();
        let sel = select_bandwidth(&problem, &FilterConfig::kalman(), &grid).unwrap();
        assert!(sel.candidates.iter().all(|c| c.jkb == Some(0.0)));
        assert_eq!(sel.sigma, 10.0);
    }

    #[test]
    fn singleton_grid_matches_direct_run() {
        let problem = UpdateProblem::new(v(0.0), s(1.0), &v(3.0), &s(1.0), &s(1.0)).unwrap();
        let cfg = FilterConfig::kalman();
        let grid = BandwidthGrid::new(vec![3.0], 1.0).unwrap();
        let sel = select_bandwidth(&problem, &cfg, &grid).unwrap();
        let direct = fpi_update(&problem, KernelWidth::Finite(3.0), &cfg).unwrap();
        assert_eq!(sel.sigma, 3.0);
        assert_eq!(sel.outcome, direct);
    }

    #[test]
    fn all_failed_candidates() {
        let problem = UpdateProblem::new(v(0.0), s(1.0), &v(1e4), &s(1.0), &s(1.0)).unwrap();
        let grid = BandwidthGrid::new(vec![0.01, 0.02], 1.0).unwrap();
        let err = select_bandwidth(&problem, &FilterConfig::kalman(), &grid).unwrap_err();
        assert_eq!(err, FilterError::AllCandidatesFailed { candidates: 2 });
    }

    #[test]
    fn baseline_rules() {
        let h = DMatrix::identity(2, 2);
        let x = DVector::zeros(2);
        let p = DMatrix::identity(2, 2);
        let r = DMatrix::identity(2, 2);
        let y = DVector::from_vec(vec![3.0, 4.0]);
        assert_eq!(
            baseline_bandwidth(BaselineRule::Euclidean, &y, &h, &x, &p, &r).unwrap(),
            5.0
        );
        assert_eq!(
            baseline_bandwidth(BaselineRule::Euclidean, &x, &h, &x, &p, &r),
            Err(BaselineError::ZeroInnovation)
        );
        let m = baseline_bandwidth(
            BaselineRule::Mahalanobis,
            &v(2.0),
            &s(1.0),
            &v(0.0),
            &s(1.0),
            &s(4.0),
        )
        .unwrap();
        assert_relative_eq!(m, 1.0, max_relative = 1e-15);
        // (sqrt(4/4) + 1*2*1)^-1 = 1/3
        let w = baseline_bandwidth(
            BaselineRule::WeightedInnovation,
            &v(2.0),
            &s(1.0),
            &v(0.0),
            &s(2.0),
            &s(4.0),
        )
        .unwrap();
        assert_relative_eq!(w, 1.0 / 3.0, max_relative = 1e-15);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn jkb_nonpositive_and_monotone_in_sigma_c(
                errs in proptest::collection::vec(-8.0f64..8.0, 1..6),
                sc in 0.1f64..5.0,
                d in 0.01f64..3.0,
            ) {
                let a = jkb(&errs, sc);
                let b = jkb(&errs, sc + d);
                prop_assert!(a <= 0.0);
                prop_assert!(b >= a - 1e-12);
            }

            #[test]
            fn selection_is_grid_order_invariant(y in -30.0f64..30.0, p in 0.2f64..20.0, r in 0.2f64..20.0, seed in 0u64..1000) {
                use rand::{seq::SliceRandom, SeedableRng};
                let problem = UpdateProblem::new(
                    DVector::from_element(1, 0.0),
                    DMatrix::from_element(1, 1, p),
                    &DVector::from_element(1, y),
                    &DMatrix::from_element(1, 1, 1.0),
                    &DMatrix::from_element(1, 1, r),
                ).unwrap();
                let cfg = FilterConfig::kalman();
                let grid = BandwidthGrid::default();
                let sel = select_bandwidth(&problem, &cfg, &grid).unwrap();
                // evaluate in a shuffled order and reduce by (score, sigma)
                let mut order: Vec<f64> = grid.values().to_vec();
                order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
                let mut best: Option<(f64, f64)> = None;
                for s in order {
                    if let Ok(o) = fpi_update(&problem, KernelWidth::Finite(s), &cfg) {
                        let j = jkb(&o.stacked_errors(), grid.sigma_c());
                        if best.is_none_or(|(bj, bs)| j > bj || (j == bj && s > bs)) {
                            best = Some((j, s));
                        }
                    }
                }
                prop_assert_eq!(best.unwrap().1, sel.sigma);
                for c in &sel.candidates {
                    if let Some(j) = c.jkb {
                        prop_assert!(sel.jkb >= j);
                    }
                }
            }
        }
    }
}
