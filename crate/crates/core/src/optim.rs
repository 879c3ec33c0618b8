//! Stochastic optimization of the energy.
//!
//! [`train`] runs epochs of shuffled minibatches (without replacement inside
//! an epoch), refreshes the Monte-Carlo noise every `refresh_every`
//! minibatches and applies one optimizer to every trainable slot. The master
//! seed is split into independent ChaCha streams for initialization,
//! batching and noise, so a run is reproducible bit for bit.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::{EnergyError, EnergyFn, EpsMatrix, Estimator, Objective, Params, Trainable};
use crate::expfam::FactorizedGaussian;
use crate::models::{Dataset, LikelihoodModel};
use crate::Scalar;

const STREAM_INIT: u64 = 1;
const STREAM_BATCH: u64 = 2;
const STREAM_EPS: u64 = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged in epoch {epoch}: {reason}")]
    DivergenceDetected { epoch: usize, reason: String },
    #[error("energy evaluation failed in epoch {epoch}: {source}")]
    Energy { epoch: usize, source: EnergyError },
}

/// Marker for the variational limit in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VbTag {
    #[serde(rename = "vb")]
    Vb,
}

/// Either a numeric `α` or the string `"vb"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlphaSetting {
    Value(f64),
    Named(VbTag),
}

impl AlphaSetting {
    pub const VB: Self = Self::Named(VbTag::Vb);

    pub fn objective<T: Scalar>(self) -> Objective<T> {
        match self {
            Self::Value(a) => Objective::BbAlpha(T::lit(a)),
            Self::Named(VbTag::Vb) => Objective::Vb,
        }
    }

    /// Label used in reports: the number, or `vb`.
    pub fn label(self) -> String {
        match self {
            Self::Value(a) => format!("{a}"),
            Self::Named(VbTag::Vb) => "vb".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
    /// Robbins-Monro schedule `γ_t = a / (b + t)`, `t = 1, 2, …`.
    Sgd { a: f64, b: f64 },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitPolicy {
    SmallNormal {
        #[serde(default = "default_init_std")]
        std: f64,
    },
    /// Weights `N(0, 2/(fan_in + fan_out))`, biases zero.
    Glorot,
}

fn default_init_std() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyMode {
    MonteCarlo,
    /// Closed-form energy over the full data set (conjugate linear
    /// regression only); one step per epoch.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: AlphaSetting,
    pub k_samples: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_refresh")]
    pub refresh_every: usize,
    pub init: InitPolicy,
    #[serde(default = "default_init_log_var")]
    pub init_log_var: f64,
    pub seed: u64,
    #[serde(default)]
    pub learn_noise: bool,
    #[serde(default)]
    pub learn_prior: bool,
    #[serde(default = "default_mode")]
    pub energy_mode: EnergyMode,
    /// An epoch whose energy magnitude exceeds this multiple of the previous
    /// epoch's (and rises) is treated as divergence.
    #[serde(default = "default_divergence_factor")]
    pub divergence_factor: f64,
}

fn default_refresh() -> usize {
    1
}
fn default_init_log_var() -> f64 {
    -10.0
}
fn default_mode() -> EnergyMode {
    EnergyMode::MonteCarlo
}
fn default_divergence_factor() -> f64 {
    10.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: AlphaSetting::Value(0.5),
            k_samples: 100,
            batch_size: 32,
            epochs: 200,
            optimizer: OptimizerConfig::adam(1e-3),
            refresh_every: 1,
            init: InitPolicy::SmallNormal { std: 0.1 },
            init_log_var: -10.0,
            seed: 0,
            learn_noise: false,
            learn_prior: false,
            energy_mode: EnergyMode::MonteCarlo,
            divergence_factor: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_rows: usize) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.k_samples == 0 {
            return bad("k_samples must be at least 1".into());
        }
        if self.refresh_every == 0 {
            return bad("refresh_every must be at least 1".into());
        }
        if self.batch_size == 0 || self.batch_size > n_rows {
            return bad(format!("batch_size {} must lie in 1..={n_rows}", self.batch_size));
        }
        if let AlphaSetting::Value(a) = self.alpha {
            if a == 0.0 || !a.is_finite() {
                return bad(format!("alpha {a} is not usable; write \"vb\" for the variational limit"));
            }
        }
        match self.optimizer {
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                if !(lr > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                    return bad("adam needs lr > 0, betas in [0, 1), eps > 0".into());
                }
            }
            OptimizerConfig::Sgd { a, b } => {
                if !(a > 0.0 && b > 0.0) {
                    return bad("sgd schedule needs a > 0 and b > 0".into());
                }
            }
        }
        if !(self.divergence_factor > 1.0) {
            return bad("divergence_factor must exceed 1".into());
        }
        Ok(())
    }

    pub fn trainable(&self) -> Trainable {
        Trainable { noise: self.learn_noise, prior: self.learn_prior }
    }
}

/// A ChaCha stream derived from the master seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Initial `q` for `model`: means from the configured policy, every
/// log-variance set to `cfg.init_log_var`.
pub fn init_q<T: Scalar>(model: &LikelihoodModel, cfg: &TrainConfig) -> FactorizedGaussian<T> {
    let mut rng = stream_rng(cfg.seed, STREAM_INIT);
    let d = model.theta_dim();
    let mut mu = vec![T::zero(); d];
    match cfg.init {
        InitPolicy::SmallNormal { std } => {
            for m in &mut mu {
                *m = T::lit(std * rng.sample::<f64, _>(StandardNormal));
            }
        }
        InitPolicy::Glorot => {
            for block in model.blocks().iter().filter(|b| !b.is_bias) {
                let sd = (2.0 / (block.fan_in + block.fan_out) as f64).sqrt();
                for m in &mut mu[block.offset..block.offset + block.len] {
                    *m = T::lit(sd * rng.sample::<f64, _>(StandardNormal));
                }
            }
        }
    }
    FactorizedGaussian::new(mu, vec![T::lit(cfg.init_log_var); d]).expect("finite initialization")
}

/// First and second moment estimates of Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(dim: usize) -> Self {
        Self { m: vec![T::zero(); dim], v: vec![T::zero(); dim], t: 0 }
    }
}

/// One bias-corrected Adam update of `params` against `grad`.
pub fn adam_step<T: Scalar>(params: &mut [T], grad: &[T], state: &mut AdamState<T>, lr: T, beta1: T, beta2: T, eps: T) {
    assert_eq!(params.len(), grad.len(), "adam shape");
    state.t += 1;
    let t = state.t as i32;
    let one = T::one();
    let c1 = one - beta1.powi(t);
    let c2 = one - beta2.powi(t);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = beta1 * state.m[i] + (one - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (one - beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// `γ_t = a/(b + t)`.
pub fn sgd_rate(a: f64, b: f64, t: u64) -> f64 {
    a / (b + t as f64)
}

/// `(Σ_{t=1}^{T} γ_t, Σ_{t=1}^{T} γ_t²)` for the Robbins-Monro schedule.
pub fn robbins_monro_partial_sums(a: f64, b: f64, horizon: u64) -> (f64, f64) {
    (1..=horizon).fold((0.0, 0.0), |(s1, s2), t| {
        let g = sgd_rate(a, b, t);
        (s1 + g, s2 + g * g)
    })
}

/// Limit of `Σ_{t≥1} γ_t²`, i.e. `a²·ψ₁(b + 1)` with the trigamma function.
pub fn robbins_monro_square_limit(a: f64, b: f64) -> f64 {
    // ψ₁(x) = Σ_{k≥0} 1/(x+k)²; sum directly then add the asymptotic tail
    let x = b + 1.0;
    let n = 1000;
    let head: f64 = (0..n).map(|k| 1.0 / (x + k as f64).powi(2)).sum();
    let z = x + n as f64;
    let tail = 1.0 / z + 1.0 / (2.0 * z * z) + 1.0 / (6.0 * z * z * z) - 1.0 / (30.0 * z.powi(5));
    a * a * (head + tail)
}

/// A random partition of `0..n` into batches of `batch_size` (the last may be
/// shorter).
pub fn epoch_batches<R: Rng + ?Sized>(rng: &mut R, n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean minibatch energy estimate over the epoch.
    pub energy: f64,
    /// Mean gradient L2 norm over the epoch.
    pub grad_norm: f64,
}

/// Which parameter snapshots a trace keeps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotPolicy {
    #[default]
    FinalOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
    pub wall_time_secs: f64,
    pub snapshots: SnapshotPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome<T> {
    /// Final `q`, prior and noise.
    pub params: Params<T>,
    pub trace: TrainTrace,
}

/// Fit `q` (and the configured hyperparameters) to `data`.
pub fn train<T: Scalar>(
    model: &LikelihoodModel,
    data: &Dataset<T>,
    prior: &FactorizedGaussian<T>,
    log_noise: Option<T>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate(data.n_rows())?;
    model.validate().map_err(|e| TrainError::Config(e.to_string()))?;
    if model.uses_noise() && log_noise.is_none() {
        return Err(TrainError::Config("model needs an initial noise log-variance".into()));
    }
    if cfg.energy_mode == EnergyMode::Exact && !matches!(model, LikelihoodModel::Linreg { .. }) {
        return Err(TrainError::Config("exact energies need the linear-regression model".into()));
    }
    let started = Instant::now();
    let q = init_q::<T>(model, cfg);
    let mut params = Params::new(q, prior.clone(), log_noise).map_err(|e| TrainError::Config(e.to_string()))?;
    let tr = cfg.trainable();
    let objective = cfg.alpha.objective::<T>();
    let d = model.theta_dim();
    let mut batch_rng = stream_rng(cfg.seed, STREAM_BATCH);
    let mut eps_rng = stream_rng(cfg.seed, STREAM_EPS);
    let mut eps = EpsMatrix::<T>::zeros(cfg.k_samples, d);
    let mut adam = AdamState::new(params.n_slots(tr));
    let mut step: u64 = 0;
    let mut records = Vec::with_capacity(cfg.epochs);
    let full: Vec<usize> = (0..data.n_rows()).collect();

    for epoch in 0..cfg.epochs {
        let batches = match cfg.energy_mode {
            EnergyMode::MonteCarlo => epoch_batches(&mut batch_rng, data.n_rows(), cfg.batch_size),
            EnergyMode::Exact => vec![full.clone()],
        };
        let mut energy_sum = 0.0;
        let mut norm_sum = 0.0;
        for batch in &batches {
            if step.is_multiple_of(cfg.refresh_every as u64) {
                eps = EpsMatrix::sample(&mut eps_rng, cfg.k_samples, d);
            }
            let estimator = match cfg.energy_mode {
                EnergyMode::MonteCarlo => Estimator::MonteCarlo { batch, eps: &eps },
                EnergyMode::Exact => Estimator::Exact,
            };
            let f = EnergyFn { objective, estimator, params: &params, trainable: tr, model, data };
            let est = f.estimate().map_err(|source| TrainError::Energy { epoch, source })?;
            if !est.value.is_finite() || est.grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::DivergenceDetected { epoch, reason: "non-finite energy or gradient".into() });
            }
            energy_sum += est.value.as_f64();
            norm_sum += est.grad.iter().map(|g| g.as_f64().powi(2)).sum::<f64>().sqrt();
            let mut slots = params.to_slots(tr);
            step += 1;
            match cfg.optimizer {
                OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                    adam_step(&mut slots, &est.grad, &mut adam, T::lit(lr), T::lit(beta1), T::lit(beta2), T::lit(eps))
                }
                OptimizerConfig::Sgd { a, b } => {
                    let rate = T::lit(sgd_rate(a, b, step));
                    for (s, g) in slots.iter_mut().zip(&est.grad) {
                        *s -= rate * *g;
                    }
                }
            }
            params = params
                .with_slots(&slots, tr)
                .map_err(|_| TrainError::DivergenceDetected { epoch, reason: "parameters became non-finite".into() })?;
        }
        let nb = batches.len() as f64;
        let record = EpochRecord { epoch, energy: energy_sum / nb, grad_norm: norm_sum / nb };
        if let Some(prev) = records.last().map(|r: &EpochRecord| r.energy) {
            if record.energy > prev && record.energy.abs() > cfg.divergence_factor * prev.abs().max(1.0) {
                return Err(TrainError::DivergenceDetected {
                    epoch,
                    reason: format!("energy grew from {prev} to {}", record.energy),
                });
            }
        }
        records.push(record);
    }
    Ok(TrainOutcome {
        params,
        trace: TrainTrace {
            records,
            wall_time_secs: started.elapsed().as_secs_f64(),
            snapshots: SnapshotPolicy::FinalOnly,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn adam_single_step_by_hand() {
        let mut p = vec![1.0, -2.0, 0.5];
        let g: Vec<f64> = vec![0.3, -4.0, 1e-9];
        let mut st = AdamState::new(3);
        adam_step(&mut p, &g, &mut st, 0.01, 0.9, 0.999, 1e-8);
        // bias correction makes m̂ = g and v̂ = g² after one step
        for (i, start) in [1.0, -2.0, 0.5].iter().enumerate() {
            let want = start - 0.01 * g[i] / (g[i].abs() + 1e-8);
            assert_relative_eq!(p[i], want, epsilon = 1e-12);
        }
    }

    #[test]
    fn adam_zero_gradient_is_null() {
        let mut p = vec![0.7, 0.1];
        let mut st = AdamState::new(2);
        for _ in 0..5 {
            adam_step(&mut p, &[0.0, 0.0], &mut st, 0.1, 0.9, 0.999, 1e-8);
        }
        assert_eq!(p, vec![0.7, 0.1]);
    }

    #[test]
    fn adam_constant_gradient_steps_by_lr() {
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        let mut last = 0.0;
        for _ in 0..2000 {
            last = p[0];
            adam_step(&mut p, &[2.5], &mut st, 0.01, 0.9, 0.999, 1e-8);
        }
        assert_relative_eq!(last - p[0], 0.01, max_relative = 1e-6);
    }

    #[test]
    fn robbins_monro_sums() {
        let (a, b) = (0.5, 10.0);
        let (s1, s2) = robbins_monro_partial_sums(a, b, 1_000);
        let (d1, d2) = robbins_monro_partial_sums(a, b, 2_000);
        let (q1, _) = robbins_monro_partial_sums(a, b, 4_000);
        // doubling the horizon adds about a·ln 2 each time
        assert!(d1 - s1 > 0.3 && q1 - d1 > 0.3);
        let limit = robbins_monro_square_limit(a, b);
        let (_, big) = robbins_monro_partial_sums(a, b, 1_000_000);
        assert!(s2 < d2 && d2 < limit);
        assert!((limit - big).abs() < 1e-6);
    }

    #[test]
    fn batches_partition_indices() {
        let mut rng = stream_rng(3, 2);
        for n in [1, 7, 32, 100] {
            let bs = epoch_batches(&mut rng, n, 6);
            let mut all: Vec<usize> = bs.concat();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            assert!(bs.iter().all(|b| !b.is_empty() && b.len() <= 6));
        }
    }

    #[test]
    fn init_policies() {
        let model = LikelihoodModel::linreg(100_000);
        let cfg = TrainConfig { seed: 5, ..TrainConfig::default() };
        let q = init_q::<f64>(&model, &cfg);
        let n = q.dim() as f64;
        let m = q.mu().iter().sum::<f64>() / n;
        let sd = (q.mu().iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd - 0.1).abs() < 0.003, "{sd}");
        assert!(q.var().iter().all(|&v| (v - (-10.0_f64).exp()).abs() < 1e-18));
        assert_relative_eq!(q.var()[0], 4.54e-5, max_relative = 1e-3);

        let model = LikelihoodModel::mlp_classification(784, &[400], 10);
        let cfg = TrainConfig { init: InitPolicy::Glorot, ..cfg };
        let q = init_q::<f64>(&model, &cfg);
        let w = &q.mu()[..784 * 400];
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        let want = 2.0 / 1184.0;
        assert!((var - want).abs() < 0.1 * want, "{var}");
        assert!(q.mu()[784 * 400..784 * 400 + 400].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn alpha_setting_serde() {
        let a: AlphaSetting = serde_json::from_str("\"vb\"").unwrap();
        assert_eq!(a, AlphaSetting::VB);
        let a: AlphaSetting = serde_json::from_str("0.5").unwrap();
        assert_eq!(a, AlphaSetting::Value(0.5));
        assert!(serde_json::from_str::<AlphaSetting>("\"bogus\"").is_err());
    }

    #[test]
    fn config_validation() {
        let cfg = TrainConfig { batch_size: 50, ..TrainConfig::default() };
        assert!(cfg.validate(40).is_err());
        assert!(cfg.validate(50).is_ok());
        let cfg = TrainConfig { alpha: AlphaSetting::Value(0.0), ..TrainConfig::default() };
        assert!(cfg.validate(100).is_err());
        let cfg = TrainConfig { optimizer: OptimizerConfig::Sgd { a: 1.0, b: 0.0 }, ..TrainConfig::default() };
        assert!(cfg.validate(100).is_err());
    }
}
