//! Likelihood factors `p(x_n | θ)` and datasets.
//!
//! Every likelihood is written once against [`Expr`], so the same code yields
//! plain values and tape gradients.
//!
//! MLP parameter vectors are packed layer by layer; within a layer the weight
//! matrix comes first (shape `out × in`, row-major) followed by the bias
//! vector. Hidden layers use the rectifier; the readout is linear.

mod data;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{Eval, Expr};
use crate::Scalar;

pub use data::{
    gen_toy_cubic, gen_toy_cubic_n, load_csv, read_csv, synthetic_classification, synthetic_linreg, synthetic_probit,
    CsvSchema, DataError, Dataset, DatasetMeta, Task,
};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("noise variance must be positive, got {sigma2}")]
    NonPositiveNoise { sigma2: f64 },
    #[error("class {class} out of range for {n_classes} classes")]
    ClassOutOfRange { class: f64, n_classes: usize },
    #[error("probit label must be -1 or +1, got {label}")]
    InvalidLabel { label: f64 },
    #[error("parameter vector has length {got}, model expects {expected}")]
    ThetaShape { expected: usize, got: usize },
    #[error("feature vector has length {got}, model expects {expected}")]
    FeatureShape { expected: usize, got: usize },
    #[error("model needs a noise variance but none was supplied")]
    MissingNoise,
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
}

/// A contiguous block of the packed parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamBlock {
    pub offset: usize,
    pub len: usize,
    pub fan_in: usize,
    pub fan_out: usize,
    pub is_bias: bool,
}

/// Pluggable likelihood factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LikelihoodModel {
    /// `Φ(y·(wᵀx + b))` with labels in `{−1, +1}`.
    Probit { n_features: usize, intercept: bool },
    /// `N(y | θᵀx, σ²)`.
    Linreg { n_features: usize },
    /// Rectifier network with Gaussian output noise; `widths` lists
    /// input, hidden and output (= 1) sizes.
    MlpRegression { widths: Vec<usize> },
    /// Rectifier network with softmax readout; `widths` lists input, hidden
    /// and class-count sizes.
    MlpClassification { widths: Vec<usize> },
}

impl LikelihoodModel {
    pub fn probit(n_features: usize, intercept: bool) -> Self {
        Self::Probit { n_features, intercept }
    }

    pub fn linreg(n_features: usize) -> Self {
        Self::Linreg { n_features }
    }

    /// One hidden layer of `hidden` rectifier units.
    pub fn mlp_regression(n_features: usize, hidden: usize) -> Self {
        Self::MlpRegression { widths: vec![n_features, hidden, 1] }
    }

    pub fn mlp_classification(n_features: usize, hidden: &[usize], n_classes: usize) -> Self {
        let mut widths = vec![n_features];
        widths.extend_from_slice(hidden);
        widths.push(n_classes);
        Self::MlpClassification { widths }
    }

    /// Reject degenerate architectures.
    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            Self::Probit { n_features, .. } | Self::Linreg { n_features } if *n_features == 0 => {
                Err(ModelError::InvalidArchitecture("no features".into()))
            }
            Self::MlpRegression { widths } => {
                if widths.len() < 2 || widths.contains(&0) || widths.last() != Some(&1) {
                    Err(ModelError::InvalidArchitecture(format!("regression widths {widths:?}")))
                } else {
                    Ok(())
                }
            }
            Self::MlpClassification { widths } => {
                if widths.len() < 2 || widths.contains(&0) || widths.last().is_some_and(|&c| c < 2) {
                    Err(ModelError::InvalidArchitecture(format!("classification widths {widths:?}")))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn n_features(&self) -> usize {
        match self {
            Self::Probit { n_features, .. } | Self::Linreg { n_features } => *n_features,
            Self::MlpRegression { widths } | Self::MlpClassification { widths } => widths[0],
        }
    }

    /// Number of classes for classification models.
    pub fn n_classes(&self) -> Option<usize> {
        match self {
            Self::MlpClassification { widths } => widths.last().copied(),
            _ => None,
        }
    }

    /// Total parameter count implied by the architecture.
    pub fn theta_dim(&self) -> usize {
        match self {
            Self::Probit { n_features, intercept } => n_features + usize::from(*intercept),
            Self::Linreg { n_features } => *n_features,
            Self::MlpRegression { widths } | Self::MlpClassification { widths } => {
                widths.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
            }
        }
    }

    /// Whether the likelihood has a Gaussian output noise variance.
    pub fn uses_noise(&self) -> bool {
        matches!(self, Self::Linreg { .. } | Self::MlpRegression { .. })
    }

    pub fn task(&self) -> Task {
        match self {
            Self::Probit { .. } => Task::Probit,
            Self::MlpClassification { .. } => Task::Classification,
            _ => Task::Regression,
        }
    }

    /// Parameter blocks with their fan-in/fan-out, for layer-aware
    /// initialization.
    pub fn blocks(&self) -> Vec<ParamBlock> {
        match self {
            Self::Probit { n_features, intercept } => {
                let mut v =
                    vec![ParamBlock { offset: 0, len: *n_features, fan_in: *n_features, fan_out: 1, is_bias: false }];
                if *intercept {
                    v.push(ParamBlock { offset: *n_features, len: 1, fan_in: *n_features, fan_out: 1, is_bias: true });
                }
                v
            }
            Self::Linreg { n_features } => {
                vec![ParamBlock { offset: 0, len: *n_features, fan_in: *n_features, fan_out: 1, is_bias: false }]
            }
            Self::MlpRegression { widths } | Self::MlpClassification { widths } => {
                let mut v = Vec::new();
                let mut offset = 0;
                for w in widths.windows(2) {
                    let (fan_in, fan_out) = (w[0], w[1]);
                    v.push(ParamBlock { offset, len: fan_in * fan_out, fan_in, fan_out, is_bias: false });
                    offset += fan_in * fan_out;
                    v.push(ParamBlock { offset, len: fan_out, fan_in, fan_out, is_bias: true });
                    offset += fan_out;
                }
                v
            }
        }
    }

    /// Validate a target value for this model.
    pub fn check_target<T: Scalar>(&self, y: T) -> Result<(), ModelError> {
        match self {
            Self::Probit { .. } if y != T::one() && y != -T::one() => {
                Err(ModelError::InvalidLabel { label: y.as_f64() })
            }
            Self::MlpClassification { widths } => {
                let c = *widths.last().unwrap_or(&0);
                if y < T::zero() || y.fract() != T::zero() || y.as_f64() >= c as f64 {
                    Err(ModelError::ClassOutOfRange { class: y.as_f64(), n_classes: c })
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// `log p(y | x, θ)` on any expression backend. `log_noise` is the
    /// log-variance of the Gaussian output noise for regression models.
    pub fn log_lik<T: Scalar, E: Expr<T>>(
        &self,
        e: &mut E,
        theta: &[E::V],
        log_noise: Option<E::V>,
        x: &[T],
        y: T,
    ) -> Result<E::V, ModelError> {
        if theta.len() != self.theta_dim() {
            return Err(ModelError::ThetaShape { expected: self.theta_dim(), got: theta.len() });
        }
        if x.len() != self.n_features() {
            return Err(ModelError::FeatureShape { expected: self.n_features(), got: x.len() });
        }
        match self {
            Self::Probit { n_features, intercept } => {
                let bias = if *intercept { Some(theta[*n_features]) } else { None };
                let z = linear_readout(e, &theta[..*n_features], x, bias);
                Ok(match y {
                    y if y == T::one() => e.log_norm_cdf(z),
                    y if y == -T::one() => {
                        let nz = e.neg(z);
                        e.log_norm_cdf(nz)
                    }
                    _ => return Err(ModelError::InvalidLabel { label: y.as_f64() }),
                })
            }
            Self::Linreg { .. } => {
                let lv = log_noise.ok_or(ModelError::MissingNoise)?;
                let mean = linear_readout(e, theta, x, None);
                Ok(gaussian_log_density(e, mean, lv, y))
            }
            Self::MlpRegression { widths } => {
                let lv = log_noise.ok_or(ModelError::MissingNoise)?;
                let out = mlp_forward(e, widths, theta, x);
                Ok(gaussian_log_density(e, out[0], lv, y))
            }
            Self::MlpClassification { widths } => {
                self.check_target(y)?;
                let logits = mlp_forward(e, widths, theta, x);
                let lse = e.log_sum_exp(&logits);
                Ok(e.sub(logits[y.as_f64() as usize], lse))
            }
        }
    }

    /// Plain-value network output (mean for regression, logits for
    /// classification, linear predictor for probit).
    pub fn forward<T: Scalar>(&self, theta: &[T], x: &[T]) -> Vec<T> {
        let mut e = Eval;
        match self {
            Self::Probit { n_features, intercept } => {
                let bias = if *intercept { Some(theta[*n_features]) } else { None };
                vec![linear_readout(&mut e, &theta[..*n_features], x, bias)]
            }
            Self::Linreg { .. } => vec![linear_readout(&mut e, theta, x, None)],
            Self::MlpRegression { widths } | Self::MlpClassification { widths } => {
                mlp_forward(&mut e, widths, theta, x)
            }
        }
    }

    /// Plain-value log-likelihood.
    pub fn log_lik_value<T: Scalar>(&self, theta: &[T], log_noise: Option<T>, x: &[T], y: T) -> Result<T, ModelError> {
        self.log_lik(&mut Eval, theta, log_noise, x, y)
    }
}

fn linear_readout<T: Scalar, E: Expr<T>>(e: &mut E, w: &[E::V], x: &[T], bias: Option<E::V>) -> E::V {
    let z = e.lin_comb(w, x, T::zero());
    match bias {
        Some(b) => e.add(z, b),
        None => z,
    }
}

/// `−½ln(2π) − ½·lv − ½(y − mean)²·e^{−lv}`.
fn gaussian_log_density<T: Scalar, E: Expr<T>>(e: &mut E, mean: E::V, lv: E::V, y: T) -> E::V {
    let half = T::lit(0.5);
    let r = e.shift(mean, -y);
    let r2 = e.square(r);
    let nlv = e.neg(lv);
    let prec = e.exp(nlv);
    let quad = e.mul(r2, prec);
    e.lin_comb(&[lv, quad], &[-half, -half], -half * T::lit(LN_2PI))
}

/// Forward pass through the packed network.
fn mlp_forward<T: Scalar, E: Expr<T>>(e: &mut E, widths: &[usize], theta: &[E::V], x: &[T]) -> Vec<E::V> {
    let n_layers = widths.len() - 1;
    let mut offset = 0;
    let mut act: Vec<E::V> = Vec::new();
    for l in 0..n_layers {
        let (fan_in, fan_out) = (widths[l], widths[l + 1]);
        let w = &theta[offset..offset + fan_in * fan_out];
        let b = &theta[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += fan_in * fan_out + fan_out;
        let mut next = Vec::with_capacity(fan_out);
        for j in 0..fan_out {
            let row = &w[j * fan_in..(j + 1) * fan_in];
            let z = if l == 0 { e.lin_comb(row, x, T::zero()) } else { e.dot(row, &act) };
            let z = e.add(z, b[j]);
            next.push(if l + 1 < n_layers { e.relu(z) } else { z });
        }
        act = next;
    }
    act
}

/// `ln Φ(y·θᵀx)` with `y ∈ {−1, +1}`.
pub fn probit_log_lik<T: Scalar>(theta: &[T], x: &[T], y: T) -> Result<T, ModelError> {
    LikelihoodModel::probit(x.len(), false).log_lik_value(theta, None, x, y)
}

/// `−½ln(2πσ²) − (y − θᵀx)²/(2σ²)`.
pub fn linreg_log_lik<T: Scalar>(theta: &[T], x: &[T], y: T, sigma2: T) -> Result<T, ModelError> {
    if !(sigma2 > T::zero()) {
        return Err(ModelError::NonPositiveNoise { sigma2: sigma2.as_f64() });
    }
    LikelihoodModel::linreg(x.len()).log_lik_value(theta, Some(sigma2.ln()), x, y)
}

/// Gaussian log density of `y` at the output of a one-hidden-layer
/// rectifier network with `hidden` units.
pub fn mlp_regression_log_lik<T: Scalar>(
    theta: &[T],
    x: &[T],
    y: T,
    log_sigma2: T,
    hidden: usize,
) -> Result<T, ModelError> {
    LikelihoodModel::mlp_regression(x.len(), hidden).log_lik_value(theta, Some(log_sigma2), x, y)
}

/// Log-softmax of class `y` for a rectifier network with the given hidden
/// widths and class count.
pub fn mlp_classification_log_lik<T: Scalar>(
    theta: &[T],
    x: &[T],
    y: T,
    hidden: &[usize],
    n_classes: usize,
) -> Result<T, ModelError> {
    LikelihoodModel::mlp_classification(x.len(), hidden, n_classes).log_lik_value(theta, None, x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{check_gradient_with, Tape};
    use crate::expfam::standard_normal_block;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn probit_at_zero() {
        let v = probit_log_lik(&[0.3, -0.3], &[1.0, 1.0], 1.0).unwrap();
        assert_relative_eq!(v, 0.5_f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn probit_labels_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let th: Vec<f64> = standard_normal_block(&mut rng, 1, 3);
            let x: Vec<f64> = standard_normal_block(&mut rng, 1, 3);
            let a = probit_log_lik(&th, &x, 1.0).unwrap().exp();
            let b = probit_log_lik(&th, &x, -1.0).unwrap().exp();
            assert!((a + b - 1.0).abs() <= 1e-12);
        }
        assert!(matches!(probit_log_lik(&[1.0], &[1.0], 0.0), Err(ModelError::InvalidLabel { .. })));
    }

    #[test]
    fn probit_deep_tail_is_finite() {
        let v: f64 = probit_log_lik(&[1.0], &[-20.0], 1.0).unwrap();
        assert!(v.is_finite() && v < -200.0);
    }

    #[test]
    fn linreg_values() {
        let v = linreg_log_lik(&[1.0, 2.0], &[1.0, 1.0], 3.0, 1.0).unwrap();
        assert_relative_eq!(v, -0.5 * LN_2PI, epsilon = 1e-14);
        let v = linreg_log_lik(&[1.0], &[1.0], 4.0, 9.0).unwrap();
        assert_relative_eq!(v, -0.5 * (18.0 * std::f64::consts::PI).ln() - 0.5, epsilon = 1e-14);
        assert_eq!(linreg_log_lik(&[1.0], &[1.0], 4.0, 0.0), Err(ModelError::NonPositiveNoise { sigma2: 0.0 }));
    }

    #[test]
    fn linreg_density_integrates_to_one() {
        let (th, x, s2) = ([0.7, -1.1], [0.4, 2.0], 0.6);
        let h = 1e-3;
        let total: f64 =
            (-20_000..=20_000).map(|i| linreg_log_lik(&th, &x, i as f64 * h - 1.9, s2).unwrap().exp() * h).sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn mlp_regression_zero_network() {
        let m = LikelihoodModel::mlp_regression(3, 4);
        let th = vec![0.0; m.theta_dim()];
        let v = mlp_regression_log_lik(&th, &[1.0, -2.0, 0.5], 0.0, 0.0, 4).unwrap();
        assert_relative_eq!(v, -0.5 * LN_2PI, epsilon = 1e-15);
    }

    #[test]
    fn dead_rectifiers_ignore_first_layer_sign() {
        let m = LikelihoodModel::mlp_regression(2, 3);
        let mut th: Vec<f64> = (0..m.theta_dim()).map(|i| 0.1 * i as f64).collect();
        // W1 rows all negative against a positive input and negative biases
        for v in &mut th[0..6] {
            *v = -v.abs() - 0.5;
        }
        for v in &mut th[6..9] {
            *v = -1.0;
        }
        let x = [1.0, 2.0];
        let a = mlp_regression_log_lik(&th, &x, 0.3, -0.2, 3).unwrap();
        let mut flipped = th.clone();
        for v in &mut flipped[0..6] {
            *v = -*v;
        }
        // flipped weights alone would activate units; keep biases dominating
        for v in &mut flipped[6..9] {
            *v = -100.0;
        }
        let b = mlp_regression_log_lik(&flipped, &x, 0.3, -0.2, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn softmax_uniform_and_normalized() {
        let m = LikelihoodModel::mlp_classification(2, &[3, 3], 4);
        let th = vec![0.0; m.theta_dim()];
        let v = mlp_classification_log_lik(&th, &[0.5, 0.5], 2.0, &[3, 3], 4).unwrap();
        assert_relative_eq!(v, -(4.0_f64.ln()), epsilon = 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let th: Vec<f64> = standard_normal_block(&mut rng, 1, m.theta_dim());
            let x: Vec<f64> = standard_normal_block(&mut rng, 1, 2);
            let s: f64 = (0..4).map(|c| mlp_classification_log_lik(&th, &x, c as f64, &[3, 3], 4).unwrap().exp()).sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
        assert!(matches!(
            mlp_classification_log_lik(&th, &[0.5, 0.5], 4.0, &[3, 3], 4),
            Err(ModelError::ClassOutOfRange { .. })
        ));
    }

    #[test]
    fn theta_dim_and_blocks_agree() {
        let m = LikelihoodModel::mlp_classification(5, &[7, 6], 3);
        assert_eq!(m.theta_dim(), 5 * 7 + 7 + 7 * 6 + 6 + 6 * 3 + 3);
        let blocks = m.blocks();
        assert_eq!(blocks.iter().map(|b| b.len).sum::<usize>(), m.theta_dim());
        assert_eq!(blocks.last().unwrap().offset + blocks.last().unwrap().len, m.theta_dim());
        assert_eq!(LikelihoodModel::probit(8, true).theta_dim(), 9);
    }

    fn grad_check_model(m: &LikelihoodModel, y: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let d = m.theta_dim();
            let th: Vec<f64> = standard_normal_block::<f64, _>(&mut rng, 1, d).iter().map(|v| 0.7 * v).collect();
            let x: Vec<f64> = standard_normal_block(&mut rng, 1, m.n_features());
            let lv = if m.uses_noise() { Some(-0.3) } else { None };
            let mut slots = th.clone();
            slots.extend(lv);
            let mut tape = Tape::new();
            let vars = tape.inputs(&slots);
            let noise = if m.uses_noise() { Some(vars[d]) } else { None };
            let out = m.log_lik(&mut tape, &vars[..d], noise, &x, y).unwrap();
            let g = tape.gradient(out).unwrap();
            let c = check_gradient_with(
                |s| m.log_lik_value(&s[..d], if m.uses_noise() { Some(s[d]) } else { None }, &x, y).unwrap(),
                &g,
                &slots,
                1e-4,
            );
            assert!(c.passed, "{m:?}: {:?}", c.errors);
        }
    }

    #[test]
    fn likelihood_gradients_match_finite_differences() {
        grad_check_model(&LikelihoodModel::probit(3, true), -1.0, 10);
        grad_check_model(&LikelihoodModel::linreg(4), 0.8, 11);
        grad_check_model(&LikelihoodModel::mlp_regression(3, 5), 0.4, 12);
        grad_check_model(&LikelihoodModel::mlp_classification(3, &[4, 4], 3), 1.0, 13);
    }
}
