//! Zero-mean Gaussian-mixture noise and the Gaussian-kernel correntropy
//! utilities built on top of it.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

const WEIGHT_SUM_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MixtureError {
    #[error("mixture has no components")]
    Empty,
    #[error("component {index} has weight {weight} outside [0, 1]")]
    WeightOutOfRange { index: usize, weight: f64 },
    #[error("mixture weights sum to {sum}, expected 1")]
    WeightSum { sum: f64 },
    #[error("component {index} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("component {index} covariance is not square")]
    NotSquare { index: usize },
    #[error("component {index} covariance is not symmetric")]
    NotSymmetric { index: usize },
    #[error(
        "component {index} covariance is not positive definite (min eigenvalue {min_eigenvalue})"
    )]
    NotPositiveDefinite { index: usize, min_eigenvalue: f64 },
    #[error("component {index} has a non-zero mean; only zero-mean mixtures are supported")]
    NonZeroMean { index: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("kernel bandwidth must be positive and finite, got {0}")]
    InvalidBandwidth(f64),
    #[error("correntropy needs at least one error sample")]
    EmptyErrors,
}

/// One weighted zero-mean normal inside a [`GaussianMixture`].
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub covariance: DMatrix<f64>,
    chol_lower: DMatrix<f64>,
}

/// Zero-mean mixture `sum_i a_i N(0, Sigma_i)`.
///
/// Immutable after construction. Every component covariance is symmetric and
/// strictly positive definite; weights sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    components: Vec<MixtureComponent>,
    cumulative: Vec<f64>,
    dim: usize,
}

impl GaussianMixture {
    pub fn new(components: Vec<(f64, DMatrix<f64>)>) -> Result<Self, MixtureError> {
        if components.is_empty() {
            return Err(MixtureError::Empty);
        }
        let dim = components[0].1.nrows();
        let mut sum = 0.0;
        let mut validated = Vec::with_capacity(components.len());
        for (index, (weight, cov)) in components.into_iter().enumerate() {
            if !(0.0..=1.0).contains(&weight) {
                return Err(MixtureError::WeightOutOfRange { index, weight });
            }
            if cov.nrows() != cov.ncols() {
                return Err(MixtureError::NotSquare { index });
            }
            if cov.nrows() != dim {
                return Err(MixtureError::DimensionMismatch {
                    index,
                    expected: dim,
                    found: cov.nrows(),
                });
            }
            if !is_symmetric(&cov, SYMMETRY_TOL) {
                return Err(MixtureError::NotSymmetric { index });
            }
            let min_eigenvalue = SymmetricEigen::new(cov.clone()).eigenvalues.min();
            if !(min_eigenvalue > 0.0) {
                return Err(MixtureError::NotPositiveDefinite {
                    index,
                    min_eigenvalue,
                });
            }
            let chol_lower = cov
                .clone()
                .cholesky()
                .ok_or(MixtureError::NotPositiveDefinite {
                    index,
                    min_eigenvalue,
                })?
                .unpack();
            sum += weight;
            validated.push(MixtureComponent {
                weight,
                covariance: cov,
                chol_lower,
            });
        }
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(MixtureError::WeightSum { sum });
        }
        let mut acc = 0.0;
        let cumulative = validated
            .iter()
            .map(|c| {
                acc += c.weight;
                acc
            })
            .collect();
        Ok(Self {
            components: validated,
            cumulative,
            dim,
        })
    }

    /// Like [`GaussianMixture::new`] but accepts explicit component means,
    /// which must all be zero.
    pub fn with_means(
        components: Vec<(f64, DVector<f64>, DMatrix<f64>)>,
    ) -> Result<Self, MixtureError> {
        let mut stripped = Vec::with_capacity(components.len());
        for (index, (weight, mean, cov)) in components.into_iter().enumerate() {
            if mean.iter().any(|&m| m != 0.0) {
                return Err(MixtureError::NonZeroMean { index });
            }
            stripped.push((weight, cov));
        }
        Self::new(stripped)
    }

    /// One-dimensional mixture from `(weight, variance)` pairs.
    pub fn scalar(components: &[(f64, f64)]) -> Result<Self, MixtureError> {
        Self::new(
            components
                .iter()
                .map(|&(w, var)| (w, DMatrix::from_element(1, 1, var)))
                .collect(),
        )
    }

    /// Joint mixture of independent blocks: the component set is the cartesian
    /// product of the blocks' components, with block-diagonal covariances and
    /// product weights.
    pub fn independent(blocks: &[GaussianMixture]) -> Result<Self, MixtureError> {
        if blocks.is_empty() {
            return Err(MixtureError::Empty);
        }
        let mut joint: Vec<(f64, DMatrix<f64>)> = vec![(1.0, DMatrix::zeros(0, 0))];
        for block in blocks {
            let mut next = Vec::with_capacity(joint.len() * block.components.len());
            for (w, cov) in &joint {
                for c in &block.components {
                    let n = cov.nrows();
                    let d = c.covariance.nrows();
                    let mut m = DMatrix::zeros(n + d, n + d);
                    m.view_mut((0, 0), (n, n)).copy_from(cov);
                    m.view_mut((n, n), (d, d)).copy_from(&c.covariance);
                    next.push((w * c.weight, m));
                }
            }
            joint = next;
        }
        // Product weights may drift from 1 by a few ulps.
        let total: f64 = joint.iter().map(|(w, _)| w).sum();
        for (w, _) in &mut joint {
            *w /= total;
        }
        Self::new(joint)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    /// Second moment `sum_i a_i Sigma_i` (exact, since all means are zero).
    pub fn equivalent_covariance(&self) -> DMatrix<f64> {
        let mut acc = DMatrix::zeros(self.dim, self.dim);
        for c in &self.components {
            acc += &c.covariance * c.weight;
        }
        symmetrize(&acc)
    }

    /// Draws one sample. Consumes exactly one uniform for the component choice
    /// followed by `dim` standard normals.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let u: f64 = rng.gen();
        let idx = self
            .cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.components.len() - 1);
        let z = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.components[idx].chol_lower * z
    }
}

/// Kernel bandwidth `sigma` together with the bandwidth-selection cost width
/// `sigma_c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    sigma: f64,
    sigma_c: f64,
}

impl KernelParams {
    pub fn new(sigma: f64, sigma_c: f64) -> Result<Self, KernelError> {
        check_bandwidth(sigma)?;
        check_bandwidth(sigma_c)?;
        Ok(Self { sigma, sigma_c })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn sigma_c(&self) -> f64 {
        self.sigma_c
    }
}

pub(crate) fn check_bandwidth(sigma: f64) -> Result<(), KernelError> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(KernelError::InvalidBandwidth(sigma))
    }
}

/// `exp(-e^2 / (2 sigma^2))`.
pub fn gaussian_kernel(e: f64, sigma: f64) -> f64 {
    (-(e * e) / (2.0 * sigma * sigma)).exp()
}

/// Sample-mean correntropy estimate: the average kernel value over the errors.
pub fn sample_correntropy(errors: &[f64], sigma: f64) -> Result<f64, KernelError> {
    check_bandwidth(sigma)?;
    if errors.is_empty() {
        return Err(KernelError::EmptyErrors);
    }
    let total: f64 = errors.iter().map(|&e| gaussian_kernel(e, sigma)).sum();
    Ok(total / errors.len() as f64)
}

pub(crate) fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = m.amax().max(1.0);
    (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol * scale))
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}
