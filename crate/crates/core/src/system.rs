//! Uncertain linear time-invariant system and ground-truth generation.
//!
//! The truth evolves with `F + dF`; the filters only ever see the nominal
//! matrices through [`NominalModel`].

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::noise::GaussianMixture;

const STABILITY_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("{what} has shape {rows}x{cols}, expected {exp_rows}x{exp_cols}")]
    Shape {
        what: &'static str,
        rows: usize,
        cols: usize,
        exp_rows: usize,
        exp_cols: usize,
    },
    #[error("perturbed transition F + dF has spectral radius {0}, exceeding 1")]
    Unstable(f64),
    #[error("initial state has length {found}, expected {expected}")]
    InitialState { expected: usize, found: usize },
    #[error("simulation needs at least one step")]
    NoSteps,
}

/// `X_{k+1} = (F + dF) X_k + G q_k`, `Y_k = H X_k + r_k`.
#[derive(Debug, Clone)]
pub struct UncertainLinearModel {
    f: DMatrix<f64>,
    delta_f: DMatrix<f64>,
    g: DMatrix<f64>,
    h: DMatrix<f64>,
    q_mix: GaussianMixture,
    r_mix: GaussianMixture,
}

impl UncertainLinearModel {
    pub fn new(
        f: DMatrix<f64>,
        delta_f: DMatrix<f64>,
        g: DMatrix<f64>,
        h: DMatrix<f64>,
        q_mix: GaussianMixture,
        r_mix: GaussianMixture,
    ) -> Result<Self, ModelError> {
        let n = f.nrows();
        let p = q_mix.dim();
        let m = r_mix.dim();
        check_shape("F", &f, n, n)?;
        check_shape("dF", &delta_f, n, n)?;
        check_shape("G", &g, n, p)?;
        check_shape("H", &h, m, n)?;
        let radius = spectral_radius(&(&f + &delta_f));
        if radius > 1.0 + STABILITY_SLACK {
            return Err(ModelError::Unstable(radius));
        }
        Ok(Self {
            f,
            delta_f,
            g,
            h,
            q_mix,
            r_mix,
        })
    }

    /// Same model with a different perturbation.
    pub fn with_delta_f(&self, delta_f: DMatrix<f64>) -> Result<Self, ModelError> {
        Self::new(
            self.f.clone(),
            delta_f,
            self.g.clone(),
            self.h.clone(),
            self.q_mix.clone(),
            self.r_mix.clone(),
        )
    }

    pub fn state_dim(&self) -> usize {
        self.f.nrows()
    }

    pub fn measurement_dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn delta_f(&self) -> &DMatrix<f64> {
        &self.delta_f
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn q_mix(&self) -> &GaussianMixture {
        &self.q_mix
    }

    pub fn r_mix(&self) -> &GaussianMixture {
        &self.r_mix
    }

    pub fn true_transition(&self) -> DMatrix<f64> {
        &self.f + &self.delta_f
    }

    /// Equivalent process covariance in state coordinates, `G Q G^T`.
    pub fn process_covariance(&self) -> DMatrix<f64> {
        let q = &self.g * self.q_mix.equivalent_covariance() * self.g.transpose();
        (&q + q.transpose()) * 0.5
    }

    pub fn measurement_covariance(&self) -> DMatrix<f64> {
        self.r_mix.equivalent_covariance()
    }

    /// The matrices a filter is allowed to use (dF assumed zero).
    pub fn nominal(&self) -> NominalModel {
        NominalModel {
            f: self.f.clone(),
            h: self.h.clone(),
            q: self.process_covariance(),
            r: self.measurement_covariance(),
        }
    }
}

/// Nominal `(F, H, Q, R)` handed to the filters.
#[derive(Debug, Clone, PartialEq)]
pub struct NominalModel {
    pub f: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

/// States `X_0..X_K` and measurements `Y_1..Y_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub measurements: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.measurements.len()
    }
}

/// Generates a truth trajectory. Per step the rng is consumed as: process
/// noise draw, then measurement noise draw.
pub fn simulate<R: Rng + ?Sized>(
    model: &UncertainLinearModel,
    x0: &DVector<f64>,
    steps: usize,
    rng: &mut R,
) -> Result<Trajectory, ModelError> {
    check_initial(model, x0)?;
    if steps == 0 {
        return Err(ModelError::NoSteps);
    }
    let a = model.true_transition();
    let mut states = Vec::with_capacity(steps + 1);
    let mut measurements = Vec::with_capacity(steps);
    let mut x = x0.clone();
    states.push(x.clone());
    for _ in 0..steps {
        let q = model.q_mix.sample(rng);
        x = &a * &x + &model.g * q;
        let r = model.r_mix.sample(rng);
        measurements.push(&model.h * &x + r);
        states.push(x.clone());
    }
    Ok(Trajectory {
        states,
        measurements,
    })
}

/// Noise-free propagation `X_{k+1} = (F + dF) X_k`, returning `X_0..X_K`.
pub fn propagate_deterministic(
    model: &UncertainLinearModel,
    x0: &DVector<f64>,
    steps: usize,
) -> Result<Vec<DVector<f64>>, ModelError> {
    check_initial(model, x0)?;
    let a = model.true_transition();
    let mut out = Vec::with_capacity(steps + 1);
    out.push(x0.clone());
    for k in 0..steps {
        let next = &a * &out[k];
        out.push(next);
    }
    Ok(out)
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

fn check_shape(
    what: &'static str,
    m: &DMatrix<f64>,
    exp_rows: usize,
    exp_cols: usize,
) -> Result<(), ModelError> {
    if m.nrows() == exp_rows && m.ncols() == exp_cols {
        Ok(())
    } else {
        Err(ModelError::Shape {
            what,
            rows: m.nrows(),
            cols: m.ncols(),
            exp_rows,
            exp_cols,
        })
    }
}

fn check_initial(model: &UncertainLinearModel, x0: &DVector<f64>) -> Result<(), ModelError> {
    if x0.len() == model.state_dim() {
        Ok(())
    } else {
        Err(ModelError::InitialState {
            expected: model.state_dim(),
            found: x0.len(),
        })
    }
}
