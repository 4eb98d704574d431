//! Robust inference of a shared sparse precision matrix (gene co-expression
//! network) from multiple independent expression datasets.
//!
//! The centerpiece is [`mvtlasso::fit`], an EM procedure that models each
//! dataset (*view*) as a noisy linear mixture of latent gene loadings whose
//! signal columns follow a multivariate t-distribution with a sparse inverse
//! dispersion matrix shared across views. Around it the crate provides:
//!
//! * [`glasso`] — an L1-penalized precision matrix solver (block coordinate
//!   descent over the covariance), used standalone as a baseline and inside
//!   every EM M-step,
//! * [`tlasso`] — the single-view robust EM baseline over i.i.d.
//!   multivariate-t samples, also used to warm-start MVTLASSO,
//! * [`ica`] — whitening plus fixed-point ICA used to pre-unmix each view,
//! * [`tdist`] — multivariate-t density, sampling, and the latent-scale
//!   posterior shared by the EM procedures,
//! * [`synth`] — synthetic data generation matching the benchmark protocol,
//! * [`stability`] — stability selection over subsampled refits,
//! * [`bench`] — ROC/AUC benchmark orchestration across methods.
//!
//! All randomized operations take explicit seeds and are deterministic;
//! see [`rng`] for the substream discipline.

pub mod bench;
pub mod error;
pub mod estimator;
pub mod glasso;
pub mod ica;
pub mod mvtlasso;
pub mod rng;
pub mod stability;
pub mod synth;
pub mod tdist;
pub mod tlasso;
pub mod types;

pub use error::Error;
pub use types::{
    ExpressionView, ModelState, PrecisionEstimate, SelectionProbabilityMatrix, TauMatrix,
    ViewParams,
};

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
