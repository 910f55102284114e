//! Robust maximum correntropy Kalman filtering for uncertain linear systems
//! driven by Gaussian-mixture noise.
//!
//! * [`noise`]: zero-mean Gaussian mixtures and correntropy utilities.
//! * [`system`]: the uncertain linear model and truth simulation.
//! * [`filter`]: the filter recursion (KF, RSKF, MCKF and RMCKF as limits).
//! * [`bandwidth`]: per-step kernel bandwidth selection and baseline rules.
//! * [`diagnostics`]: Grammians, the perturbation stability test, the
//!   risk-positivity audit and the fixed-point contraction bounds.
//! * [`bench`]: the Monte Carlo benchmark harness and report writer.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bandwidth;
pub mod bench;
pub mod diagnostics;
pub mod filter;
pub mod noise;
pub mod system;
