//! Closed-form ground truth for Gaussian models.
//!
//! Everything here works in `f64` with dense matrices and Cholesky
//! factorizations, deliberately independent of the rank-one algebra used by
//! [`crate::energy`], so the two can check each other.
//!
//! The linear-regression helpers use the model `y = θᵀx + N(0, σ²)` with a
//! unit prior `θ ~ N(0, I)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

use crate::expfam::FactorizedGaussian;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("alpha-divergence is infinite: the precision blend is not positive definite")]
    UndefinedDivergence,
    #[error("matrix is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("noise variance must be positive, got {0}")]
    NonPositiveNoise(f64),
    #[error("improper tilted distribution for data row {row}")]
    ImproperTilted { row: usize },
    #[error("improper cavity for data row {row}")]
    ImproperCavity { row: usize },
    #[error("no convergence after {iterations} iterations (last change {last_change:e})")]
    NoConvergence { iterations: usize, last_change: f64, trace: Vec<f64> },
    #[error("{what} is outside its domain: {detail}")]
    DomainError { what: &'static str, detail: String },
}

type Result<T> = std::result::Result<T, OracleError>;

fn cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or(OracleError::NotPositiveDefinite)
}

fn log_det_chol(ch: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Multivariate Gaussian in moment form.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDist {
    mu: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianDist {
    pub fn new(mu: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mu.len() || cov.ncols() != mu.len() {
            return Err(OracleError::ShapeMismatch { expected: mu.len(), got: cov.nrows() });
        }
        let scale = cov.amax().max(1.0);
        if (&cov - cov.transpose()).amax() > 1e-12 * scale {
            return Err(OracleError::NotPositiveDefinite);
        }
        cholesky(&cov)?;
        Ok(Self { mu, cov })
    }

    pub fn diagonal(mu: &[f64], var: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(mu), DMatrix::from_diagonal(&DVector::from_column_slice(var)))
    }

    pub fn standard(dim: usize) -> Self {
        Self { mu: DVector::zeros(dim), cov: DMatrix::identity(dim, dim) }
    }

    pub fn from_factorized(q: &FactorizedGaussian<f64>) -> Self {
        Self::diagonal(q.mu(), &q.var()).expect("factorized Gaussians are proper")
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn to_natural(&self) -> FullNatural {
        let precision = cholesky(&self.cov).expect("validated at construction").inverse();
        let shift = &precision * &self.mu;
        FullNatural { precision, shift }
    }

    /// Mean-field projection (marginal means and variances).
    pub fn to_factorized(&self) -> FactorizedGaussian<f64> {
        FactorizedGaussian::new(self.mu.iter().copied().collect(), self.cov.diagonal().iter().map(|v| v.ln()).collect())
            .expect("proper covariance")
    }
}

/// Natural parameters `exp{hᵀθ − ½θᵀPθ}` of a possibly unnormalized
/// Gaussian factor.
#[derive(Debug, Clone, PartialEq)]
pub struct FullNatural {
    pub precision: DMatrix<f64>,
    pub shift: DVector<f64>,
}

impl FullNatural {
    pub fn zeros(dim: usize) -> Self {
        Self { precision: DMatrix::zeros(dim, dim), shift: DVector::zeros(dim) }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    /// `A = ½hᵀP⁻¹h − ½ln|P| + (D/2)ln 2π`; errors unless `P` is positive
    /// definite.
    pub fn log_partition(&self) -> Result<f64> {
        let ch = cholesky(&self.precision)?;
        let sol = ch.solve(&self.shift);
        Ok(0.5 * self.shift.dot(&sol) - 0.5 * log_det_chol(&ch) + 0.5 * self.dim() as f64 * LN_2PI)
    }

    pub fn to_moments(&self) -> Result<GaussianDist> {
        let ch = cholesky(&self.precision)?;
        let cov = ch.inverse();
        let mu = &cov * &self.shift;
        Ok(GaussianDist { mu, cov })
    }

    pub fn add_scaled(&self, other: &Self, c: f64) -> Self {
        Self { precision: &self.precision + &other.precision * c, shift: &self.shift + &other.shift * c }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        (&self.precision - &other.precision).amax().max((&self.shift - &other.shift).amax())
    }
}

/// Moments and log normalizer of a tilted distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltedMoments {
    pub mu_n: DVector<f64>,
    pub cov_n: DMatrix<f64>,
    pub log_norm: f64,
}

/// `KL[p‖q]` between Gaussians.
pub fn kl_divergence(p: &GaussianDist, q: &GaussianDist) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(OracleError::ShapeMismatch { expected: p.dim(), got: q.dim() });
    }
    let cp = cholesky(&p.cov)?;
    let cq = cholesky(&q.cov)?;
    let trace = cq.solve(&p.cov).trace();
    let dm = &q.mu - &p.mu;
    let maha = dm.dot(&cq.solve(&dm));
    Ok(0.5 * (trace + maha - p.dim() as f64 + log_det_chol(&cq) - log_det_chol(&cp)))
}

/// `D_α[p‖q] = (1 − ∫p^α q^{1−α}) / (α(1−α))`, with `KL[q‖p]` at `α = 0`
/// and `KL[p‖q]` at `α = 1`.
pub fn alpha_divergence(p: &GaussianDist, q: &GaussianDist, alpha: f64) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(OracleError::ShapeMismatch { expected: p.dim(), got: q.dim() });
    }
    if alpha == 0.0 {
        return kl_divergence(q, p);
    }
    if alpha == 1.0 {
        return kl_divergence(p, q);
    }
    let np = p.to_natural();
    let nq = q.to_natural();
    let blend = FullNatural {
        precision: &np.precision * alpha + &nq.precision * (1.0 - alpha),
        shift: &np.shift * alpha + &nq.shift * (1.0 - alpha),
    };
    let a_blend = blend.log_partition().map_err(|_| OracleError::UndefinedDivergence)?;
    let log_int = a_blend - alpha * np.log_partition()? - (1.0 - alpha) * nq.log_partition()?;
    Ok(-log_int.exp_m1() / (alpha * (1.0 - alpha)))
}

fn check_linreg(x: &DMatrix<f64>, y: &DVector<f64>, sigma2: f64) -> Result<()> {
    if !(sigma2 > 0.0) {
        return Err(OracleError::NonPositiveNoise(sigma2));
    }
    if x.nrows() != y.len() {
        return Err(OracleError::ShapeMismatch { expected: x.nrows(), got: y.len() });
    }
    Ok(())
}

/// Exact posterior `Σ = (I + XᵀX/σ²)⁻¹`, `μ = ΣXᵀy/σ²`.
pub fn true_posterior_linreg(x: &DMatrix<f64>, y: &DVector<f64>, sigma2: f64) -> Result<GaussianDist> {
    check_linreg(x, y, sigma2)?;
    let d = x.ncols();
    let precision = DMatrix::identity(d, d) + x.transpose() * x / sigma2;
    let shift = x.transpose() * y / sigma2;
    FullNatural { precision, shift }.to_moments()
}

/// `ln p(y | X) = ln N(y | 0, XXᵀ + σ²I)`.
pub fn log_evidence_linreg(x: &DMatrix<f64>, y: &DVector<f64>, sigma2: f64) -> Result<f64> {
    check_linreg(x, y, sigma2)?;
    let n = x.nrows();
    let cov = x * x.transpose() + DMatrix::identity(n, n) * sigma2;
    let ch = cholesky(&cov)?;
    Ok(-0.5 * (n as f64 * LN_2PI + log_det_chol(&ch) + y.dot(&ch.solve(y))))
}

/// Natural parameters of `p(y_n|θ)^α` as a factor in `θ`, plus its
/// `θ`-independent log-constant.
fn likelihood_power(x: &[f64], y: f64, sigma2: f64, alpha: f64) -> (FullNatural, f64) {
    let xv = DVector::from_column_slice(x);
    let beta = alpha / sigma2;
    let nat = FullNatural { precision: &xv * xv.transpose() * beta, shift: &xv * (beta * y) };
    (nat, -0.5 * alpha * (sigma2.ln() + LN_2PI) - 0.5 * beta * y * y)
}

/// Tilted distribution `∝ exp{s(θ)ᵀλ_cav} · p(y|θ,x)^α`.
pub fn tilted(cavity: &FullNatural, x: &[f64], y: f64, sigma2: f64, alpha: f64, row: usize) -> Result<TiltedMoments> {
    let (lik, c) = likelihood_power(x, y, sigma2, alpha);
    let t = cavity.add_scaled(&lik, 1.0);
    let log_norm = t.log_partition().map_err(|_| OracleError::ImproperTilted { row })? + c;
    let m = t.to_moments().map_err(|_| OracleError::ImproperTilted { row })?;
    Ok(TiltedMoments { mu_n: m.mu, cov_n: m.cov, log_norm })
}

fn rows(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..x.nrows()).map(|i| x.row(i).iter().copied().collect()).collect()
}

fn diag_natural(prec: &[f64], shift: &[f64]) -> FullNatural {
    FullNatural {
        precision: DMatrix::from_diagonal(&DVector::from_column_slice(prec)),
        shift: DVector::from_column_slice(shift),
    }
}

/// Converged mean-field BB-α solution.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPoint {
    pub q: FactorizedGaussian<f64>,
    /// Per-dimension precision contributed by one tied site:
    /// `(prec_q − prec_0)/N`.
    pub site_precision: Vec<f64>,
    /// Per-dimension shift of one tied site: `(shift_q − shift_0)/N`.
    pub site_shift: Vec<f64>,
    pub iterations: usize,
}

/// Damped moment-matching iteration for the tied-site mean-field solution.
///
/// The tilted moments are averaged and converted to natural parameters
/// `λ_match`, then `λ_q ← λ_q + s·(λ_match − λ_q)` with
/// `s = (1 − damping) / (sign(α)·min(|α|, 1))`. Matching moves `q` by
/// `O(α)` per sweep, in the direction of the fixed point for `α > 0` and away
/// from it for `α < 0`; the signed `1/α` factor makes the iteration contract
/// at an α-independent rate. For `α ≥ 1` this is plain damping.
pub fn bbalpha_fixed_point(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    sigma2: f64,
    alpha: f64,
    damping: f64,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPoint> {
    check_linreg(x, y, sigma2)?;
    if alpha == 0.0 {
        return Err(OracleError::DomainError { what: "alpha", detail: "0 is the VB limit".into() });
    }
    if !(0.0..1.0).contains(&damping) {
        return Err(OracleError::DomainError { what: "damping", detail: format!("{damping} not in [0, 1)") });
    }
    let n = x.nrows() as f64;
    let d = x.ncols();
    let data = rows(x);
    let step = (1.0 - damping) / (alpha.signum() * alpha.abs().min(1.0));
    // start from the α → 0 solution's precision and the exact posterior mean
    let post = true_posterior_linreg(x, y, sigma2)?;
    let lambda_post = post.to_natural().precision;
    let mut prec: Vec<f64> = (0..d).map(|i| lambda_post[(i, i)]).collect();
    let mut shift: Vec<f64> = (0..d).map(|i| prec[i] * post.mu()[i]).collect();
    let mut trace = Vec::new();
    for it in 1..=max_iter {
        // cavity (N−α)λ + λ₀ with λ = (λ_q − λ₀)/N and λ₀ = (0, I)
        let cp: Vec<f64> = prec.iter().map(|&p| ((n - alpha) * p + alpha) / n).collect();
        let cs: Vec<f64> = shift.iter().map(|&s| (n - alpha) * s / n).collect();
        let cavity = diag_natural(&cp, &cs);
        if cp.iter().any(|&c| !(c > 0.0)) {
            return Err(OracleError::ImproperCavity { row: 0 });
        }
        let mut m1 = vec![0.0; d];
        let mut m2 = vec![0.0; d];
        for (r, xr) in data.iter().enumerate() {
            let t = tilted(&cavity, xr, y[r], sigma2, alpha, r)?;
            for i in 0..d {
                m1[i] += t.mu_n[i] / n;
                m2[i] += (t.cov_n[(i, i)] + t.mu_n[i] * t.mu_n[i]) / n;
            }
        }
        let mut new_prec = vec![0.0; d];
        let mut new_shift = vec![0.0; d];
        for i in 0..d {
            let var = m2[i] - m1[i] * m1[i];
            if !(var > 0.0) {
                return Err(OracleError::ImproperTilted { row: 0 });
            }
            new_prec[i] = prec[i] + step * (1.0 / var - prec[i]);
            new_shift[i] = shift[i] + step * (m1[i] / var - shift[i]);
            if !(new_prec[i] > 0.0) {
                return Err(OracleError::ImproperTilted { row: 0 });
            }
        }
        let change = (0..d)
            .map(|i| {
                let dm = (new_shift[i] / new_prec[i] - shift[i] / prec[i]).abs();
                let dv = (1.0 / new_prec[i] - 1.0 / prec[i]).abs();
                dm.max(dv)
            })
            .fold(0.0, f64::max);
        prec = new_prec;
        shift = new_shift;
        trace.push(change);
        if change < tol {
            let q = FactorizedGaussian::new(
                (0..d).map(|i| shift[i] / prec[i]).collect(),
                prec.iter().map(|p| -p.ln()).collect(),
            )
            .map_err(|_| OracleError::ImproperTilted { row: 0 })?;
            return Ok(FixedPoint {
                q,
                site_precision: prec.iter().map(|p| (p - 1.0) / n).collect(),
                site_shift: shift.iter().map(|s| s / n).collect(),
                iterations: it,
            });
        }
    }
    let last_change = trace.last().copied().unwrap_or(f64::NAN);
    Err(OracleError::NoConvergence { iterations: max_iter, last_change, trace })
}

fn check_example_domain(alpha: f64, sigma2: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 2.0) {
        return Err(OracleError::DomainError { what: "alpha", detail: format!("{alpha} not in (0, 2)") });
    }
    if !(sigma2 > 0.0) {
        return Err(OracleError::DomainError { what: "sigma2", detail: format!("{sigma2} not positive") });
    }
    Ok(())
}

/// Tied-site precision for the data `x₁ = e₁, x₂ = e₂`, `y = 0`:
/// `λ = (√(α² − 2α + (σ²+1)²) − α − σ² + 1) / (2σ²(2 − α))`.
pub fn example1_lambda(alpha: f64, sigma2: f64) -> Result<f64> {
    check_example_domain(alpha, sigma2)?;
    let root = (alpha * alpha - 2.0 * alpha + (sigma2 + 1.0).powi(2)).sqrt();
    let lambda = (root - alpha - sigma2 + 1.0) / (2.0 * sigma2 * (2.0 - alpha));
    if !(1.0 + 2.0 * lambda > 0.0 && 1.0 + (2.0 - alpha) * lambda > 0.0) {
        return Err(OracleError::DomainError { what: "example 1 solution", detail: format!("lambda = {lambda}") });
    }
    Ok(lambda)
}

/// Tied-site precision for the data `x₁ = (1, −1), x₂ = (−1, 1)`, `y = 0`:
/// `λ = (√(4α² − 8α + σ⁴ + 4σ² + 4) − (2α + σ² − 2)) / (2σ²(2 − α))`.
pub fn example2_lambda(alpha: f64, sigma2: f64) -> Result<f64> {
    check_example_domain(alpha, sigma2)?;
    let root = (4.0 * alpha * alpha - 8.0 * alpha + sigma2 * sigma2 + 4.0 * sigma2 + 4.0).sqrt();
    let lambda = (root - (2.0 * alpha + sigma2 - 2.0)) / (2.0 * sigma2 * (2.0 - alpha));
    if !(lambda > 0.0) {
        return Err(OracleError::DomainError { what: "example 2 solution", detail: format!("lambda = {lambda}") });
    }
    Ok(lambda)
}

/// Design matrix and targets of the first example (`x_n = e_n`).
pub fn example1_data(y: [f64; 2]) -> (DMatrix<f64>, DVector<f64>) {
    (DMatrix::identity(2, 2), DVector::from_column_slice(&y))
}

/// Design matrix and targets of the second example (anti-correlated inputs).
pub fn example2_data(y: [f64; 2]) -> (DMatrix<f64>, DVector<f64>) {
    (DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]), DVector::from_column_slice(&y))
}

/// Result of untied power EP with full-covariance `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerEpResult {
    pub q: GaussianDist,
    pub sites: Vec<FullNatural>,
    pub passes: usize,
}

/// Sequential power EP: for each site compute the cavity `λ_q − αλ_n`, tilt
/// by `p^α`, match moments exactly (the full Gaussian family is closed under
/// the tilt), and set `λ_n ← λ_n + (λ_q_new − λ_q)/α`.
pub fn power_ep_message_passing(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    sigma2: f64,
    alpha: f64,
    passes: usize,
) -> Result<PowerEpResult> {
    check_linreg(x, y, sigma2)?;
    if alpha == 0.0 {
        return Err(OracleError::DomainError { what: "alpha", detail: "power EP needs alpha != 0".into() });
    }
    let d = x.ncols();
    let data = rows(x);
    let prior = GaussianDist::standard(d).to_natural();
    let mut sites = vec![FullNatural::zeros(d); data.len()];
    let mut q = prior.clone();
    for _ in 0..passes {
        for (r, xr) in data.iter().enumerate() {
            let cavity = q.add_scaled(&sites[r], -alpha);
            cholesky(&cavity.precision).map_err(|_| OracleError::ImproperCavity { row: r })?;
            let t = tilted(&cavity, xr, y[r], sigma2, alpha, r)?;
            let q_new = GaussianDist::new(t.mu_n, t.cov_n)?.to_natural();
            let delta = q_new.add_scaled(&q, -1.0);
            sites[r] = sites[r].add_scaled(&delta, 1.0 / alpha);
            q = sites.iter().fold(prior.clone(), |acc, s| acc.add_scaled(s, 1.0));
        }
    }
    Ok(PowerEpResult { q: q.to_moments()?, sites, passes })
}

/// Tied cavities `λ_{∖n} = λ_q − α(λ_q − λ₀)/N` for all `n`.
pub fn tied_cavities(q: &FullNatural, prior: &FullNatural, n: usize, alpha: f64) -> Vec<FullNatural> {
    let site = q.add_scaled(prior, -1.0);
    vec![q.add_scaled(&site, -alpha / n as f64); n]
}

/// Constrained power-EP energy
/// `A(λ₀) + (N/α − 1)A(λ_q) − (1/α) Σ_n ln ∫ p(y_n|θ)^α exp{s(θ)ᵀλ_{∖n}} dθ`
/// and the constraint residual `‖(N−α)λ_q + αλ₀ − Σ_n λ_{∖n}‖∞`.
#[allow(clippy::too_many_arguments)]
pub fn ep_energy_constrained(
    q: &FullNatural,
    cavities: &[FullNatural],
    prior: &FullNatural,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    sigma2: f64,
    alpha: f64,
) -> Result<(f64, f64)> {
    check_linreg(x, y, sigma2)?;
    if cavities.len() != x.nrows() {
        return Err(OracleError::ShapeMismatch { expected: x.nrows(), got: cavities.len() });
    }
    if alpha == 0.0 {
        return Err(OracleError::DomainError { what: "alpha", detail: "energy needs alpha != 0".into() });
    }
    let n = x.nrows() as f64;
    let data = rows(x);
    let mut total = 0.0;
    for (r, (xr, cav)) in data.iter().zip(cavities).enumerate() {
        total += tilted(cav, xr, y[r], sigma2, alpha, r)?.log_norm;
    }
    let value = prior.log_partition()? + (n / alpha - 1.0) * q.log_partition()? - total / alpha;
    let target = q.add_scaled(q, n - alpha - 1.0).add_scaled(prior, alpha);
    let sum = cavities.iter().fold(FullNatural::zeros(q.dim()), |acc, c| acc.add_scaled(c, 1.0));
    Ok((value, target.max_abs_diff(&sum)))
}
