//! Tied-site energies and their gradients.
//!
//! All parameters of an energy live in one flat slot vector (see
//! [`Params::to_slots`]):
//!
//! ```text
//! [ mu (D) | log_var (D) | log σ² (if trained) | prior mu (D), prior log_var (D) (if trained) ]
//! ```
//!
//! Untrained hyperparameters enter the expression as constants, so their
//! gradient is simply not reported.
//!
//! The Monte-Carlo estimator evaluates
//!
//! ```text
//! Ê = A(λ₀) − A(λ_q) − (1/α)(N/|S|) Σ_{n∈S} [ LSE_k α(ln p(x_n|θ_k) − ln f(θ_k)) − ln K ]
//! ```
//!
//! with `θ_k = mu + exp(½·log_var)·ε_k` and one shared `ε` matrix for the
//! whole batch. For conjugate linear regression the expectation
//! `E_q[(p/f)^α]` has a closed form through a rank-one update of the diagonal
//! cavity precision; [`bbalpha_energy_exact`], [`lower_bound_certificate`] and
//! [`stationarity_residual`] use it.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{evaluate, value_and_gradient, DiffError, Expr, ScalarFn};
use crate::expfam::{standard_normal_block, ExpFamError, FactorizedGaussian};
use crate::models::{Dataset, LikelihoodModel, ModelError};
use crate::Scalar;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnergyError {
    #[error("alpha = 0 is not a BB-alpha energy; use the VB energy")]
    ZeroAlpha,
    #[error("alpha = {alpha} equals the data count; the Monte-Carlo estimator is undefined there")]
    AlphaEqualsN { alpha: f64 },
    #[error("lower-bound certificate needs alpha <= N (alpha = {alpha}, N = {n})")]
    CertificateDomain { alpha: f64, n: usize },
    #[error("empty minibatch")]
    EmptyBatch,
    #[error("batch index {index} out of range for {n_rows} rows")]
    BatchIndex { index: usize, n_rows: usize },
    #[error("noise matrix has {got} columns, parameter dimension is {expected}")]
    EpsShape { expected: usize, got: usize },
    #[error("improper cavity: precision in dimension {index} is {precision}")]
    ImproperCavity { index: usize, precision: f64 },
    #[error("improper tilted distribution for data row {row}")]
    ImproperTilted { row: usize },
    #[error("closed-form energies need the conjugate linear-regression model")]
    NotConjugate,
    #[error("model needs a noise variance but the parameters carry none")]
    MissingNoise,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    ExpFam(#[from] ExpFamError),
}

/// `α` together with the data count it is used against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaParam<T> {
    alpha: T,
    n_data: usize,
}

impl<T: Scalar> AlphaParam<T> {
    pub fn new(alpha: T, n_data: usize) -> Result<Self, EnergyError> {
        if alpha == T::zero() {
            return Err(EnergyError::ZeroAlpha);
        }
        Ok(Self { alpha, n_data })
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn n_data(&self) -> usize {
        self.n_data
    }

    /// Whether the lower-bound certificate applies (`α ≤ N`).
    pub fn certifiable(&self) -> bool {
        self.alpha.as_f64() <= self.n_data as f64
    }

    /// Rejects `α = N`, which the Monte-Carlo estimator does not accept.
    pub fn check_mc(&self) -> Result<(), EnergyError> {
        if self.alpha.as_f64() == self.n_data as f64 {
            Err(EnergyError::AlphaEqualsN { alpha: self.alpha.as_f64() })
        } else {
            Ok(())
        }
    }
}

/// Sample count, refresh period (in minibatches) and seed of the noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    pub k_samples: usize,
    pub refresh_every: usize,
    pub seed: u64,
}

impl MonteCarloConfig {
    pub fn new(k_samples: usize, refresh_every: usize, seed: u64) -> Option<Self> {
        (k_samples >= 1 && refresh_every >= 1).then_some(Self { k_samples, refresh_every, seed })
    }
}

/// `K × D` standard-normal draws, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsMatrix<T> {
    k: usize,
    dim: usize,
    data: Vec<T>,
}

impl<T: Scalar> EpsMatrix<T> {
    pub fn new(k: usize, dim: usize, data: Vec<T>) -> Option<Self> {
        (k >= 1 && data.len() == k * dim).then_some(Self { k, dim, data })
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, k: usize, dim: usize) -> Self {
        Self { k, dim, data: standard_normal_block(rng, k, dim) }
    }

    pub fn zeros(k: usize, dim: usize) -> Self {
        Self { k, dim, data: vec![T::zero(); k * dim] }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, k: usize) -> &[T] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    /// The first `k` rows.
    pub fn head(&self, k: usize) -> Self {
        let k = k.min(self.k);
        Self { k, dim: self.dim, data: self.data[..k * self.dim].to_vec() }
    }
}

/// Variational posterior, prior and output-noise log-variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params<T> {
    pub q: FactorizedGaussian<T>,
    pub prior: FactorizedGaussian<T>,
    pub log_noise: Option<T>,
}

/// Which hyperparameters receive gradients.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trainable {
    pub noise: bool,
    pub prior: bool,
}

impl Trainable {
    pub const Q_ONLY: Self = Self { noise: false, prior: false };
}

impl<T: Scalar> Params<T> {
    pub fn new(
        q: FactorizedGaussian<T>,
        prior: FactorizedGaussian<T>,
        log_noise: Option<T>,
    ) -> Result<Self, EnergyError> {
        if q.dim() != prior.dim() {
            return Err(ExpFamError::ShapeMismatch { expected: q.dim(), got: prior.dim() }.into());
        }
        Ok(Self { q, prior, log_noise })
    }

    pub fn dim(&self) -> usize {
        self.q.dim()
    }

    fn noise_slot(&self, tr: Trainable) -> bool {
        tr.noise && self.log_noise.is_some()
    }

    pub fn n_slots(&self, tr: Trainable) -> usize {
        let d = self.dim();
        2 * d + usize::from(self.noise_slot(tr)) + if tr.prior { 2 * d } else { 0 }
    }

    pub fn to_slots(&self, tr: Trainable) -> Vec<T> {
        let mut v = Vec::with_capacity(self.n_slots(tr));
        v.extend_from_slice(self.q.mu());
        v.extend_from_slice(self.q.log_var());
        if self.noise_slot(tr) {
            v.extend(self.log_noise);
        }
        if tr.prior {
            v.extend_from_slice(self.prior.mu());
            v.extend_from_slice(self.prior.log_var());
        }
        v
    }

    /// Copy of `self` with the trainable slots replaced.
    pub fn with_slots(&self, slots: &[T], tr: Trainable) -> Result<Self, EnergyError> {
        let expected = self.n_slots(tr);
        if slots.len() != expected {
            return Err(DiffError::ArityMismatch { expected, got: slots.len() }.into());
        }
        let d = self.dim();
        let q = FactorizedGaussian::new(slots[..d].to_vec(), slots[d..2 * d].to_vec())?;
        let mut i = 2 * d;
        let mut log_noise = self.log_noise;
        if self.noise_slot(tr) {
            log_noise = Some(slots[i]);
            i += 1;
        }
        let prior = if tr.prior {
            FactorizedGaussian::new(slots[i..i + d].to_vec(), slots[i + d..i + 2 * d].to_vec())?
        } else {
            self.prior.clone()
        };
        Ok(Self { q, prior, log_noise })
    }
}

/// Objective selector: BB-α with the given `α`, or the variational limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Objective<T> {
    BbAlpha(T),
    Vb,
}

/// How the expectation under `q` is evaluated.
#[derive(Debug, Clone, Copy)]
pub enum Estimator<'a, T> {
    MonteCarlo { batch: &'a [usize], eps: &'a EpsMatrix<T> },
    Exact,
}

/// Energy value with its gradient over the trainable slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyEstimate<T> {
    pub value: T,
    pub grad: Vec<T>,
    /// `None` for the VB energy.
    pub alpha: Option<T>,
    /// Samples used; 0 for closed-form energies.
    pub k: usize,
    pub batch_ids: Vec<usize>,
    /// Seed of the noise that produced the estimate, when known.
    pub seed_state: Option<u64>,
}

/// An energy as a function of the trainable slots.
#[derive(Debug, Clone, Copy)]
pub struct EnergyFn<'a, T> {
    pub objective: Objective<T>,
    pub estimator: Estimator<'a, T>,
    /// Supplies values for untrained slots and the slot layout.
    pub params: &'a Params<T>,
    pub trainable: Trainable,
    pub model: &'a LikelihoodModel,
    pub data: &'a Dataset<T>,
}

struct Vars<V> {
    mu: Vec<V>,
    lv: Vec<V>,
    noise: Option<V>,
    pmu: Vec<V>,
    plv: Vec<V>,
}

impl<T: Scalar> EnergyFn<'_, T> {
    fn bind<E: Expr<T>>(&self, e: &mut E, x: &[E::V]) -> Result<Vars<E::V>, EnergyError> {
        let p = self.params;
        let tr = self.trainable;
        let expected = p.n_slots(tr);
        if x.len() != expected {
            return Err(DiffError::ArityMismatch { expected, got: x.len() }.into());
        }
        let d = p.dim();
        let mut i = 2 * d;
        let noise = if p.noise_slot(tr) {
            i += 1;
            Some(x[i - 1])
        } else {
            p.log_noise.map(|v| e.constant(v))
        };
        if self.model.uses_noise() && noise.is_none() {
            return Err(EnergyError::MissingNoise);
        }
        let (pmu, plv) = if tr.prior {
            (x[i..i + d].to_vec(), x[i + d..i + 2 * d].to_vec())
        } else {
            (
                p.prior.mu().iter().map(|&v| e.constant(v)).collect(),
                p.prior.log_var().iter().map(|&v| e.constant(v)).collect(),
            )
        };
        Ok(Vars { mu: x[..d].to_vec(), lv: x[d..2 * d].to_vec(), noise, pmu, plv })
    }

    /// Value and gradient at the current parameters.
    pub fn estimate(&self) -> Result<EnergyEstimate<T>, EnergyError> {
        let slots = self.params.to_slots(self.trainable);
        let (value, grad) = value_and_gradient(self, &slots)?;
        let (k, batch_ids) = match self.estimator {
            Estimator::MonteCarlo { batch, eps } => (eps.k(), batch.to_vec()),
            Estimator::Exact => (0, (0..self.data.n_rows()).collect()),
        };
        let alpha = match self.objective {
            Objective::BbAlpha(a) => Some(a),
            Objective::Vb => None,
        };
        Ok(EnergyEstimate { value, grad, alpha, k, batch_ids, seed_state: None })
    }

    /// Value only.
    pub fn value(&self) -> Result<T, EnergyError> {
        evaluate(self, &self.params.to_slots(self.trainable))
    }
}

impl<T: Scalar> ScalarFn<T> for EnergyFn<'_, T> {
    type Error = EnergyError;

    fn eval<E: Expr<T>>(&self, e: &mut E, x: &[E::V]) -> Result<E::V, EnergyError> {
        let v = self.bind(e, x)?;
        let n = self.data.n_rows();
        if let Objective::BbAlpha(a) = self.objective {
            AlphaParam::new(a, n)?;
        }
        match self.estimator {
            Estimator::MonteCarlo { batch, eps } => {
                if let Objective::BbAlpha(a) = self.objective {
                    AlphaParam::new(a, n)?.check_mc()?;
                }
                mc_energy(e, &v, self.objective, self.model, self.data, batch, eps)
            }
            Estimator::Exact => {
                if !matches!(self.model, LikelihoodModel::Linreg { .. }) {
                    return Err(EnergyError::NotConjugate);
                }
                match self.objective {
                    Objective::BbAlpha(a) => exact_bbalpha(e, &v, self.data, a),
                    Objective::Vb => exact_vb(e, &v, self.data),
                }
            }
        }
    }
}

fn lit<T: Scalar>(x: f64) -> T {
    T::lit(x)
}

/// Per-dimension precision `e^{−lv}` and shift `mu·e^{−lv}`.
fn naturals<T: Scalar, E: Expr<T>>(e: &mut E, mu: &[E::V], lv: &[E::V]) -> (Vec<E::V>, Vec<E::V>) {
    let prec: Vec<E::V> = lv
        .iter()
        .map(|&l| {
            let nl = e.neg(l);
            e.exp(nl)
        })
        .collect();
    let shift = mu.iter().zip(&prec).map(|(&m, &p)| e.mul(m, p)).collect();
    (prec, shift)
}

/// `A = Σ ½mu²e^{−lv} + ½lv + ½ln 2π`.
fn log_partition_expr<T: Scalar, E: Expr<T>>(e: &mut E, mu: &[E::V], prec: &[E::V], lv: &[E::V]) -> E::V {
    let d = mu.len();
    let mut terms = Vec::with_capacity(2 * d);
    for (&m, &p) in mu.iter().zip(prec) {
        let m2 = e.square(m);
        terms.push(e.mul(m2, p));
    }
    terms.extend_from_slice(lv);
    e.lin_comb(&terms, &vec![lit::<T>(0.5); 2 * d], lit::<T>(0.5 * LN_2PI) * T::lit(d as f64))
}

fn check_batch<T: Scalar>(data: &Dataset<T>, batch: &[usize]) -> Result<(), EnergyError> {
    if batch.is_empty() {
        return Err(EnergyError::EmptyBatch);
    }
    if let Some(&index) = batch.iter().find(|&&i| i >= data.n_rows()) {
        return Err(EnergyError::BatchIndex { index, n_rows: data.n_rows() });
    }
    Ok(())
}

fn mc_energy<T: Scalar, E: Expr<T>>(
    e: &mut E,
    v: &Vars<E::V>,
    objective: Objective<T>,
    model: &LikelihoodModel,
    data: &Dataset<T>,
    batch: &[usize],
    eps: &EpsMatrix<T>,
) -> Result<E::V, EnergyError> {
    check_batch(data, batch)?;
    let d = v.mu.len();
    if eps.dim() != d {
        return Err(EnergyError::EpsShape { expected: d, got: eps.dim() });
    }
    let n = T::lit(data.n_rows() as f64);
    let (prec_q, shift_q) = naturals(e, &v.mu, &v.lv);
    let (prec_0, shift_0) = naturals(e, &v.pmu, &v.plv);
    let a_q = log_partition_expr(e, &v.mu, &prec_q, &v.lv);
    let a_0 = log_partition_expr(e, &v.pmu, &prec_0, &v.plv);

    if let Objective::BbAlpha(alpha) = objective {
        for i in 0..d {
            let (pq, p0) = (e.value(prec_q[i]), e.value(prec_0[i]));
            let c = pq - alpha * (pq - p0) / n;
            if !(c > T::zero()) {
                return Err(EnergyError::ImproperCavity { index: i, precision: c.as_f64() });
            }
        }
    }

    // site λ = (λ_q − λ₀)/N with eta2 = −½·precision
    let inv_n = T::one() / n;
    let eta1: Vec<E::V> = (0..d).map(|i| e.lin_comb(&[shift_q[i], shift_0[i]], &[inv_n, -inv_n], T::zero())).collect();
    let half_n = lit::<T>(0.5) * inv_n;
    let eta2: Vec<E::V> = (0..d).map(|i| e.lin_comb(&[prec_q[i], prec_0[i]], &[-half_n, half_n], T::zero())).collect();

    let sd: Vec<E::V> =
        v.lv.iter()
            .map(|&l| {
                let h = e.scale(l, lit(0.5));
                e.exp(h)
            })
            .collect();
    let k = eps.k();
    let mut thetas = Vec::with_capacity(k);
    let mut log_f = Vec::with_capacity(k);
    for kk in 0..k {
        let row = eps.row(kk);
        let theta: Vec<E::V> = (0..d).map(|i| e.lin_comb(&[v.mu[i], sd[i]], &[T::one(), row[i]], T::zero())).collect();
        let sq: Vec<E::V> = theta.iter().map(|&t| e.square(t)).collect();
        let l1 = e.dot(&eta1, &theta);
        let l2 = e.dot(&eta2, &sq);
        log_f.push(e.add(l1, l2));
        thetas.push(theta);
    }

    let scale = n / T::lit(batch.len() as f64);
    let ln_k = T::lit(k as f64).ln();
    let mut per_datum = Vec::with_capacity(batch.len());
    for &idx in batch {
        let (x, y) = (data.row(idx), data.target(idx));
        let mut deltas = Vec::with_capacity(k);
        for kk in 0..k {
            let ll = model.log_lik(e, &thetas[kk], v.noise, x, y)?;
            deltas.push(e.sub(ll, log_f[kk]));
        }
        let term = match objective {
            Objective::BbAlpha(alpha) => {
                let scaled: Vec<E::V> = deltas.iter().map(|&dl| e.scale(dl, alpha)).collect();
                let lse = e.log_sum_exp(&scaled);
                e.shift(lse, -ln_k)
            }
            Objective::Vb => {
                let s = e.sum(&deltas);
                e.scale(s, T::one() / T::lit(k as f64))
            }
        };
        per_datum.push(term);
    }
    let total = e.sum(&per_datum);
    let coef = match objective {
        Objective::BbAlpha(alpha) => -scale / alpha,
        Objective::Vb => -scale,
    };
    Ok(e.lin_comb(&[a_0, a_q, total], &[T::one(), -T::one(), coef], T::zero()))
}

/// Diagonal cavity `(c, h)` = precision and shift of `((N−α)λ_q + αλ₀)/N`.
struct Cavity<V> {
    c: Vec<V>,
    h: Vec<V>,
    inv_c: Vec<V>,
    sum_ln_c: V,
}

fn cavity_expr<T: Scalar, E: Expr<T>>(
    e: &mut E,
    prec_q: &[E::V],
    shift_q: &[E::V],
    prec_0: &[E::V],
    shift_0: &[E::V],
    alpha: T,
    n: T,
) -> Result<Cavity<E::V>, EnergyError> {
    let (wq, w0) = ((n - alpha) / n, alpha / n);
    let d = prec_q.len();
    let mut c = Vec::with_capacity(d);
    let mut h = Vec::with_capacity(d);
    for i in 0..d {
        let ci = e.lin_comb(&[prec_q[i], prec_0[i]], &[wq, w0], T::zero());
        if !(e.value(ci) > T::zero()) {
            return Err(EnergyError::ImproperCavity { index: i, precision: e.value(ci).as_f64() });
        }
        c.push(ci);
        h.push(e.lin_comb(&[shift_q[i], shift_0[i]], &[wq, w0], T::zero()));
    }
    let one = e.constant(T::one());
    let inv_c: Vec<E::V> = c.iter().map(|&ci| e.div(one, ci)).collect();
    let ln_c: Vec<E::V> = c.iter().map(|&ci| e.ln(ci)).collect();
    let sum_ln_c = e.sum(&ln_c);
    Ok(Cavity { c, h, inv_c, sum_ln_c })
}

/// `ln ∫ exp(−½θᵀCθ + hᵀθ) · p(y|θ,x)^α dθ` for the Gaussian likelihood
/// with noise log-variance `lv_s`.
#[allow(clippy::too_many_arguments)]
fn log_tilted_normalizer<T: Scalar, E: Expr<T>>(
    e: &mut E,
    cav: &Cavity<E::V>,
    lv_s: E::V,
    inv_s2: E::V,
    alpha: T,
    x: &[T],
    y: T,
    row: usize,
) -> Result<E::V, EnergyError> {
    let d = x.len();
    let half = lit::<T>(0.5);
    let beta = e.scale(inv_s2, alpha);
    let x2: Vec<T> = x.iter().map(|&v| v * v).collect();
    let s = e.lin_comb(&cav.inv_c, &x2, T::zero());
    let bs = e.mul(beta, s);
    let den = e.shift(bs, T::one());
    if !(e.value(den) > T::zero()) {
        return Err(EnergyError::ImproperTilted { row });
    }
    let yx: Vec<T> = x.iter().map(|&v| y * v).collect();
    let h_t: Vec<E::V> = (0..d).map(|i| e.lin_comb(&[cav.h[i], beta], &[T::one(), yx[i]], T::zero())).collect();
    let w: Vec<E::V> = (0..d).map(|i| e.mul(h_t[i], cav.inv_c[i])).collect();
    let q1 = e.dot(&h_t, &w);
    let uh = e.lin_comb(&w, x, T::zero());
    let uh2 = e.square(uh);
    let num = e.mul(beta, uh2);
    let q2 = e.div(num, den);
    let ln_den = e.ln(den);
    let y2_inv_s2 = e.scale(inv_s2, y * y);
    let d_half_ln_2pi = T::lit(d as f64) * half * T::lit(LN_2PI);
    let ah = -alpha * half;
    Ok(e.lin_comb(
        &[cav.sum_ln_c, ln_den, q1, q2, lv_s, y2_inv_s2],
        &[-half, -half, half, -half, ah, ah],
        d_half_ln_2pi + ah * T::lit(LN_2PI),
    ))
}

fn linreg_noise<T: Scalar, E: Expr<T>>(e: &mut E, v: &Vars<E::V>) -> Result<(E::V, E::V), EnergyError> {
    let lv_s = v.noise.ok_or(EnergyError::MissingNoise)?;
    let nl = e.neg(lv_s);
    Ok((lv_s, e.exp(nl)))
}

fn exact_bbalpha<T: Scalar, E: Expr<T>>(
    e: &mut E,
    v: &Vars<E::V>,
    data: &Dataset<T>,
    alpha: T,
) -> Result<E::V, EnergyError> {
    let n = T::lit(data.n_rows() as f64);
    let (lv_s, inv_s2) = linreg_noise(e, v)?;
    let (prec_q, shift_q) = naturals(e, &v.mu, &v.lv);
    let (prec_0, shift_0) = naturals(e, &v.pmu, &v.plv);
    let a_q = log_partition_expr(e, &v.mu, &prec_q, &v.lv);
    let a_0 = log_partition_expr(e, &v.pmu, &prec_0, &v.plv);
    let cav = cavity_expr(e, &prec_q, &shift_q, &prec_0, &shift_0, alpha, n)?;
    let mut terms = Vec::with_capacity(data.n_rows());
    for r in 0..data.n_rows() {
        terms.push(log_tilted_normalizer(e, &cav, lv_s, inv_s2, alpha, data.row(r), data.target(r), r)?);
    }
    let total = e.sum(&terms);
    // Σ_n (L_n − A_q) = total − N·A_q
    let inv_a = T::one() / alpha;
    Ok(e.lin_comb(&[a_0, a_q, total], &[T::one(), -T::one() + n * inv_a, -inv_a], T::zero()))
}

fn exact_vb<T: Scalar, E: Expr<T>>(e: &mut E, v: &Vars<E::V>, data: &Dataset<T>) -> Result<E::V, EnergyError> {
    let d = v.mu.len();
    let half = lit::<T>(0.5);
    let (lv_s, inv_s2) = linreg_noise(e, v)?;
    let var_q: Vec<E::V> = v.lv.iter().map(|&l| e.exp(l)).collect();
    let (prec_0, _) = naturals(e, &v.pmu, &v.plv);
    // KL(q‖p₀) = ½ Σ [(v_q + (m − m₀)²)/v₀ − 1 + lv₀ − lv]
    let mut kl_terms = Vec::with_capacity(d);
    for i in 0..d {
        let dm = e.sub(v.mu[i], v.pmu[i]);
        let dm2 = e.square(dm);
        let num = e.add(var_q[i], dm2);
        kl_terms.push(e.mul(num, prec_0[i]));
    }
    let a = e.sum(&kl_terms);
    let slv0 = e.sum(&v.plv);
    let slv = e.sum(&v.lv);
    let kl = e.lin_comb(&[a, slv0, slv], &[half, half, -half], -half * T::lit(d as f64));
    // Σ_n E_q ln p = −(N/2)(ln 2π + lv_s) − ½e^{−lv_s} Σ_n [(y − mᵀx)² + Σ x²v]
    let mut sq = Vec::with_capacity(data.n_rows());
    for r in 0..data.n_rows() {
        let x = data.row(r);
        let m = e.lin_comb(&v.mu, x, -data.target(r));
        let m2 = e.square(m);
        let x2: Vec<T> = x.iter().map(|&t| t * t).collect();
        let spread = e.lin_comb(&var_q, &x2, T::zero());
        sq.push(e.add(m2, spread));
    }
    let total_sq = e.sum(&sq);
    let fit = e.mul(total_sq, inv_s2);
    let n = T::lit(data.n_rows() as f64);
    Ok(e.lin_comb(&[kl, lv_s, fit], &[T::one(), half * n, half], half * n * T::lit(LN_2PI)))
}

fn require_linreg(model: &LikelihoodModel) -> Result<(), EnergyError> {
    if matches!(model, LikelihoodModel::Linreg { .. }) {
        Ok(())
    } else {
        Err(EnergyError::NotConjugate)
    }
}

/// Minibatch Monte-Carlo BB-α energy with its gradient over the trainable
/// slots.
pub fn bbalpha_energy_mc<T: Scalar>(
    params: &Params<T>,
    trainable: Trainable,
    model: &LikelihoodModel,
    data: &Dataset<T>,
    batch: &[usize],
    alpha: AlphaParam<T>,
    eps: &EpsMatrix<T>,
) -> Result<EnergyEstimate<T>, EnergyError> {
    EnergyFn {
        objective: Objective::BbAlpha(alpha.alpha()),
        estimator: Estimator::MonteCarlo { batch, eps },
        params,
        trainable,
        model,
        data,
    }
    .estimate()
}

/// Minibatch Monte-Carlo variational free energy with its gradient.
pub fn vb_energy_mc<T: Scalar>(
    params: &Params<T>,
    trainable: Trainable,
    model: &LikelihoodModel,
    data: &Dataset<T>,
    batch: &[usize],
    eps: &EpsMatrix<T>,
) -> Result<EnergyEstimate<T>, EnergyError> {
    EnergyFn {
        objective: Objective::Vb,
        estimator: Estimator::MonteCarlo { batch, eps },
        params,
        trainable,
        model,
        data,
    }
    .estimate()
}

/// Closed-form BB-α energy for conjugate linear regression.
pub fn bbalpha_energy_exact<T: Scalar>(
    params: &Params<T>,
    model: &LikelihoodModel,
    data: &Dataset<T>,
    alpha: AlphaParam<T>,
) -> Result<T, EnergyError> {
    require_linreg(model)?;
    EnergyFn {
        objective: Objective::BbAlpha(alpha.alpha()),
        estimator: Estimator::Exact,
        params,
        trainable: Trainable::Q_ONLY,
        model,
        data,
    }
    .value()
}

/// Closed-form variational free energy `KL(q‖p₀) − Σ_n E_q ln p(y_n|θ)` for
/// conjugate linear regression.
pub fn vb_energy_exact<T: Scalar>(
    params: &Params<T>,
    model: &LikelihoodModel,
    data: &Dataset<T>,
) -> Result<T, EnergyError> {
    require_linreg(model)?;
    EnergyFn {
        objective: Objective::Vb,
        estimator: Estimator::Exact,
        params,
        trainable: Trainable::Q_ONLY,
        model,
        data,
    }
    .value()
}

/// `G̃(N) = −(1/N) Σ_n ln ∫ p₀(θ) p(y_n|θ)^N dθ`.
pub fn g_tilde<T: Scalar>(params: &Params<T>, model: &LikelihoodModel, data: &Dataset<T>) -> Result<T, EnergyError> {
    require_linreg(model)?;
    let mut e = crate::diff::Eval;
    let n = T::lit(data.n_rows() as f64);
    let lv_s = params.log_noise.ok_or(EnergyError::MissingNoise)?;
    let inv_s2 = (-lv_s).exp();
    let (pmu, plv) = (params.prior.mu(), params.prior.log_var());
    let (prec_0, shift_0) = naturals(&mut e, pmu, plv);
    let a_0 = log_partition_expr(&mut e, pmu, &prec_0, plv);
    // with α = N the cavity is the prior itself
    let cav = cavity_expr(&mut e, &prec_0, &shift_0, &prec_0, &shift_0, n, n)?;
    let mut acc = T::zero();
    for r in 0..data.n_rows() {
        acc += log_tilted_normalizer(&mut e, &cav, lv_s, inv_s2, n, data.row(r), data.target(r), r)? - a_0;
    }
    Ok(-acc / n)
}

/// `E(λ₀, λ_q) − G̃(N)`, non-negative for `α ≤ N`.
pub fn lower_bound_certificate<T: Scalar>(
    params: &Params<T>,
    model: &LikelihoodModel,
    data: &Dataset<T>,
    alpha: AlphaParam<T>,
) -> Result<T, EnergyError> {
    if !alpha.certifiable() {
        return Err(EnergyError::CertificateDomain { alpha: alpha.alpha().as_f64(), n: data.n_rows() });
    }
    Ok(bbalpha_energy_exact(params, model, data, alpha)? - g_tilde(params, model, data)?)
}

/// Per-dimension `(mean, variance)` vectors.
pub type MeanVar<T> = (Vec<T>, Vec<T>);

/// Per-row tilted means and marginal variances under the tied cavity.
pub fn tilted_moments<T: Scalar>(
    params: &Params<T>,
    model: &LikelihoodModel,
    data: &Dataset<T>,
    alpha: AlphaParam<T>,
) -> Result<Vec<MeanVar<T>>, EnergyError> {
    require_linreg(model)?;
    let mut e = crate::diff::Eval;
    let n = T::lit(data.n_rows() as f64);
    let alpha = alpha.alpha();
    let lv_s = params.log_noise.ok_or(EnergyError::MissingNoise)?;
    let beta = alpha * (-lv_s).exp();
    let (prec_q, shift_q) = naturals(&mut e, params.q.mu(), params.q.log_var());
    let (prec_0, shift_0) = naturals(&mut e, params.prior.mu(), params.prior.log_var());
    let cav = cavity_expr(&mut e, &prec_q, &shift_q, &prec_0, &shift_0, alpha, n)?;
    let d = params.dim();
    (0..data.n_rows())
        .map(|r| {
            let (x, y) = (data.row(r), data.target(r));
            let u: Vec<T> = (0..d).map(|i| x[i] * cav.inv_c[i]).collect();
            let s: T = (0..d).map(|i| x[i] * u[i]).sum();
            let den = T::one() + beta * s;
            if !(den > T::zero()) {
                return Err(EnergyError::ImproperTilted { row: r });
            }
            let h_t: Vec<T> = (0..d).map(|i| cav.h[i] + beta * y * x[i]).collect();
            let uh: T = (0..d).map(|i| u[i] * h_t[i]).sum();
            let mean = (0..d).map(|i| h_t[i] / cav.c[i] - beta * u[i] * uh / den).collect();
            let var = (0..d).map(|i| T::one() / cav.c[i] - beta * u[i] * u[i] / den).collect();
            Ok((mean, var))
        })
        .collect()
}

/// `‖E_q[s(θ)] − (1/N) Σ_n E_{p̃_n}[s(θ)]‖∞` with `s(θ) = (θ, θ²)`.
pub fn stationarity_residual<T: Scalar>(
    params: &Params<T>,
    model: &LikelihoodModel,
    data: &Dataset<T>,
    alpha: AlphaParam<T>,
) -> Result<T, EnergyError> {
    alpha.check_mc()?;
    let moments = tilted_moments(params, model, data, alpha)?;
    let d = params.dim();
    let n = T::lit(data.n_rows() as f64);
    let mut avg1 = vec![T::zero(); d];
    let mut avg2 = vec![T::zero(); d];
    for (m, v) in &moments {
        for i in 0..d {
            avg1[i] += m[i] / n;
            avg2[i] += (v[i] + m[i] * m[i]) / n;
        }
    }
    let var_q = params.q.var();
    let mut worst = T::zero();
    for i in 0..d {
        let m = params.q.mu()[i];
        worst = worst.max((m - avg1[i]).abs()).max((var_q[i] + m * m - avg2[i]).abs());
    }
    Ok(worst)
}
