//! Diagonal-Gaussian exponential-family arithmetic.
//!
//! Sufficient statistics are `s(θ) = (θ_d, θ_d²)_d`. A density
//! `exp{s(θ)ᵀλ − A(λ)}` with `λ = (eta1, eta2)` is normalizable iff every
//! `eta2[d] < 0`, in which case `mu = −eta1/(2·eta2)` and `var = −1/(2·eta2)`.
//!
//! The approximate posterior is stored as [`FactorizedGaussian`] (mean and
//! log-variance) so optimizers can move freely without positivity
//! constraints. The tied site [`SiteFactor`] is unnormalized and may carry
//! `eta2` of either sign; only `q` and cavities are required to be proper.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExpFamError {
    #[error("non-normalizable natural parameters: eta2[{index}] = {eta2} is not negative")]
    NonNormalizable { index: usize, eta2: f64 },
    #[error("improper cavity: precision in dimension {index} is {precision} (alpha too large for the current q)")]
    ImproperCavity { index: usize, precision: f64 },
    #[error("non-positive variance {var} in dimension {index}")]
    NonPositiveVariance { index: usize, var: f64 },
    #[error("non-finite parameter in dimension {index}")]
    NonFinite { index: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("data count must be at least 1")]
    EmptyData,
}

fn check_len(expected: usize, got: usize) -> Result<(), ExpFamError> {
    if expected == got {
        Ok(())
    } else {
        Err(ExpFamError::ShapeMismatch { expected, got })
    }
}

/// Natural parameters of a proper diagonal Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaturalParams<T> {
    eta1: Vec<T>,
    eta2: Vec<T>,
}

impl<T: Scalar> NaturalParams<T> {
    pub fn new(eta1: Vec<T>, eta2: Vec<T>) -> Result<Self, ExpFamError> {
        check_len(eta1.len(), eta2.len())?;
        if let Some(index) = eta2.iter().position(|&e| !(e < T::zero())) {
            return Err(ExpFamError::NonNormalizable { index, eta2: eta2[index].as_f64() });
        }
        Ok(Self { eta1, eta2 })
    }

    pub fn eta1(&self) -> &[T] {
        &self.eta1
    }

    pub fn eta2(&self) -> &[T] {
        &self.eta2
    }

    pub fn dim(&self) -> usize {
        self.eta1.len()
    }
}

/// Mean / marginal-variance parameterization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanVarParams<T> {
    mu: Vec<T>,
    var: Vec<T>,
}

impl<T: Scalar> MeanVarParams<T> {
    pub fn new(mu: Vec<T>, var: Vec<T>) -> Result<Self, ExpFamError> {
        check_len(mu.len(), var.len())?;
        if let Some(index) = var.iter().position(|&v| !(v > T::zero())) {
            return Err(ExpFamError::NonPositiveVariance { index, var: var[index].as_f64() });
        }
        Ok(Self { mu, var })
    }

    pub fn mu(&self) -> &[T] {
        &self.mu
    }

    pub fn var(&self) -> &[T] {
        &self.var
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// The variational posterior `q(θ)`: independent Gaussians stored as mean and
/// natural-log variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizedGaussian<T> {
    mu: Vec<T>,
    log_var: Vec<T>,
}

impl<T: Scalar> FactorizedGaussian<T> {
    pub fn new(mu: Vec<T>, log_var: Vec<T>) -> Result<Self, ExpFamError> {
        check_len(mu.len(), log_var.len())?;
        if let Some(index) = mu.iter().chain(log_var.iter()).position(|v| !v.is_finite()) {
            return Err(ExpFamError::NonFinite { index: index % mu.len().max(1) });
        }
        Ok(Self { mu, log_var })
    }

    /// Standard normal in `dim` dimensions.
    pub fn standard(dim: usize) -> Self {
        Self { mu: vec![T::zero(); dim], log_var: vec![T::zero(); dim] }
    }

    /// Isotropic Gaussian with the given mean and variance in every slot.
    pub fn isotropic(dim: usize, mean: T, var: T) -> Result<Self, ExpFamError> {
        if !(var > T::zero()) {
            return Err(ExpFamError::NonPositiveVariance { index: 0, var: var.as_f64() });
        }
        Self::new(vec![mean; dim], vec![var.ln(); dim])
    }

    pub fn from_meanvar(mv: &MeanVarParams<T>) -> Self {
        Self { mu: mv.mu.clone(), log_var: mv.var.iter().map(|v| v.ln()).collect() }
    }

    pub fn from_natural(np: &NaturalParams<T>) -> Self {
        Self::from_meanvar(&nat_to_meanvar(np))
    }

    pub fn mu(&self) -> &[T] {
        &self.mu
    }

    pub fn log_var(&self) -> &[T] {
        &self.log_var
    }

    pub fn var(&self) -> Vec<T> {
        self.log_var.iter().map(|l| l.exp()).collect()
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn to_meanvar(&self) -> MeanVarParams<T> {
        MeanVarParams { mu: self.mu.clone(), var: self.var() }
    }

    pub fn to_natural(&self) -> NaturalParams<T> {
        meanvar_to_nat(&self.to_meanvar())
    }

    /// Log density at `theta`.
    pub fn log_density(&self, theta: &[T]) -> T {
        let half = T::lit(0.5);
        let ln_2pi = T::lit(std::f64::consts::TAU.ln());
        self.mu
            .iter()
            .zip(&self.log_var)
            .zip(theta)
            .map(|((&m, &lv), &t)| -half * (ln_2pi + lv) - half * (t - m) * (t - m) * (-lv).exp())
            .sum()
    }
}

/// The tied site `f(θ) = exp{s(θ)ᵀλ}`. Not a distribution: `eta2` may take
/// any sign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteFactor<T> {
    pub eta1: Vec<T>,
    pub eta2: Vec<T>,
}

impl<T: Scalar> SiteFactor<T> {
    pub fn zeros(dim: usize) -> Self {
        Self { eta1: vec![T::zero(); dim], eta2: vec![T::zero(); dim] }
    }

    pub fn dim(&self) -> usize {
        self.eta1.len()
    }
}

pub fn nat_to_meanvar<T: Scalar>(np: &NaturalParams<T>) -> MeanVarParams<T> {
    let two = T::lit(2.0);
    let mu = np.eta1.iter().zip(&np.eta2).map(|(&e1, &e2)| -e1 / (two * e2)).collect();
    let var = np.eta2.iter().map(|&e2| -T::one() / (two * e2)).collect();
    MeanVarParams { mu, var }
}

pub fn meanvar_to_nat<T: Scalar>(mv: &MeanVarParams<T>) -> NaturalParams<T> {
    let two = T::lit(2.0);
    let eta1 = mv.mu.iter().zip(&mv.var).map(|(&m, &v)| m / v).collect();
    let eta2 = mv.var.iter().map(|&v| -T::one() / (two * v)).collect();
    NaturalParams { eta1, eta2 }
}

/// `A(λ) = Σ_d [mu_d²/(2·var_d) + ½·ln(2π·var_d)]`.
pub fn log_partition<T: Scalar>(np: &NaturalParams<T>) -> T {
    let mv = nat_to_meanvar(np);
    let half = T::lit(0.5);
    let two_pi = T::TAU();
    mv.mu.iter().zip(&mv.var).map(|(&m, &v)| m * m / (T::lit(2.0) * v) + half * (two_pi * v).ln()).sum()
}

/// Tied site `λ = (λ_q − λ₀)/N`.
pub fn site_from_q<T: Scalar>(
    q_nat: &NaturalParams<T>,
    prior_nat: &NaturalParams<T>,
    n_data: usize,
) -> Result<SiteFactor<T>, ExpFamError> {
    check_len(q_nat.dim(), prior_nat.dim())?;
    if n_data == 0 {
        return Err(ExpFamError::EmptyData);
    }
    let n = T::from_usize(n_data).expect("count fits scalar");
    let diff = |a: &[T], b: &[T]| a.iter().zip(b).map(|(&x, &y)| (x - y) / n).collect();
    Ok(SiteFactor { eta1: diff(&q_nat.eta1, &prior_nat.eta1), eta2: diff(&q_nat.eta2, &prior_nat.eta2) })
}

/// Cavity `λ_q − α·λ`. Errors when the result is not normalizable.
pub fn cavity<T: Scalar>(
    q_nat: &NaturalParams<T>,
    site: &SiteFactor<T>,
    alpha: T,
) -> Result<NaturalParams<T>, ExpFamError> {
    check_len(q_nat.dim(), site.dim())?;
    let eta1: Vec<T> = q_nat.eta1.iter().zip(&site.eta1).map(|(&q, &s)| q - alpha * s).collect();
    let eta2: Vec<T> = q_nat.eta2.iter().zip(&site.eta2).map(|(&q, &s)| q - alpha * s).collect();
    if let Some(index) = eta2.iter().position(|&e| !(e < T::zero())) {
        return Err(ExpFamError::ImproperCavity { index, precision: (-T::lit(2.0) * eta2[index]).as_f64() });
    }
    Ok(NaturalParams { eta1, eta2 })
}

/// `θ = mu + exp(½·log_var) ⊙ eps`.
pub fn sample_reparam<T: Scalar>(q: &FactorizedGaussian<T>, eps: &[T]) -> Result<Vec<T>, ExpFamError> {
    check_len(q.dim(), eps.len())?;
    let half = T::lit(0.5);
    Ok(q.mu.iter().zip(&q.log_var).zip(eps).map(|((&m, &lv), &e)| m + (half * lv).exp() * e).collect())
}

/// `ln f(θ) = Σ_d (eta1_d·θ_d + eta2_d·θ_d²)`, no normalizer.
pub fn log_site<T: Scalar>(site: &SiteFactor<T>, theta: &[T]) -> Result<T, ExpFamError> {
    check_len(site.dim(), theta.len())?;
    Ok(site.eta1.iter().zip(&site.eta2).zip(theta).map(|((&a, &b), &t)| a * t + b * t * t).sum())
}

/// Draw a `rows × cols` block of standard-normal noise, row-major.
pub fn standard_normal_block<T: Scalar, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Vec<T> {
    (0..rows * cols).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect()
}
