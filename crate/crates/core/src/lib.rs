//! Black-box alpha-divergence minimization (BB-α).
//!
//! The crate fits a factorized Gaussian approximation `q(θ)` to a Bayesian
//! posterior by minimizing the tied-site power-EP energy with stochastic
//! gradients. All factors share one site `f(θ) = exp{s(θ)ᵀλ}`, so the energy
//! reads
//!
//! ```text
//! E(λ₀, λ_q) = log Z(λ₀) − log Z(λ_q) − (1/α) Σₙ log E_q[(p(xₙ|θ) / f(θ))^α]
//! ```
//!
//! with `λ = (λ_q − λ₀)/N`. The expectation is estimated with `K`
//! reparameterized samples and a max-shifted log-sum-exp, and gradients come
//! from the reverse-mode tape in [`diff`].
//!
//! Layout:
//!
//! - [`expfam`]: diagonal-Gaussian natural/mean parameters, sites, cavities.
//! - [`diff`]: expression abstraction with a plain evaluator and a tape.
//! - [`models`]: likelihood factors and datasets.
//! - [`energy`]: Monte-Carlo and closed-form energies, certificates.
//! - [`optim`]: Adam / Robbins-Monro SGD and the training loop.
//! - [`oracle`]: closed-form ground truth for conjugate linear regression.
//! - [`diagnostics`]: gradient bias / variance study.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom of this file pin the common `f64` instantiations.
//! Sufficient statistics are fixed as `s(θ) = (θ_d, θ_d²)_d` everywhere, so a
//! Gaussian with variance `v` has `eta2 = −1/(2v)`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt::{Debug, Display};
use std::iter::Sum;

pub mod diagnostics;
pub mod diff;
pub mod energy;
pub mod expfam;
pub mod models;
pub mod optim;
pub mod oracle;
mod special;

pub use special::{log_norm_cdf, log_sum_exp, norm_cdf};

/// Floating point type the numerical core is written against.
pub trait Scalar:
    num_traits::Float
    + num_traits::FloatConst
    + num_traits::FromPrimitive
    + num_traits::NumAssign
    + Debug
    + Display
    + Default
    + Sum
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub type NaturalParams64 = expfam::NaturalParams<f64>;
pub type MeanVarParams64 = expfam::MeanVarParams<f64>;
pub type Gaussian64 = expfam::FactorizedGaussian<f64>;
pub type SiteFactor64 = expfam::SiteFactor<f64>;
pub type Dataset64 = models::Dataset<f64>;
pub type Tape64 = diff::Tape<f64>;
pub type EnergyEstimate64 = energy::EnergyEstimate<f64>;
pub type Params64 = energy::Params<f64>;
