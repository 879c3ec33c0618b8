//! Monte-Carlo predictive distributions and test metrics.

use bbalpha::energy::Params;
use bbalpha::expfam::FactorizedGaussian;
use bbalpha::models::{Dataset, LikelihoodModel, Task};
use bbalpha::{log_norm_cdf, log_sum_exp, norm_cdf};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// `K` reparameterized draws `θ_k = μ + σ ⊙ ε_k` from `q`.
pub fn draw_thetas(q: &FactorizedGaussian<f64>, k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps: Vec<Vec<f64>> = (0..k).map(|_| (0..q.dim()).map(|_| rng.sample(StandardNormal)).collect()).collect();
    thetas_from_eps(q, &eps)
}

/// `θ_k = μ + σ ⊙ ε_k` for given base noise.
pub fn thetas_from_eps(q: &FactorizedGaussian<f64>, eps: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let sd: Vec<f64> = q.log_var().iter().map(|lv| (0.5 * lv).exp()).collect();
    eps.iter().map(|e| q.mu().iter().zip(&sd).zip(e).map(|((m, s), z)| m + s * z).collect()).collect()
}

/// `ln (1/K) Σ_k N(y | f(x; θ_k), σ²)` in the units the model was trained in.
pub fn predict_loglik_regression(
    model: &LikelihoodModel,
    thetas: &[Vec<f64>],
    log_noise: f64,
    x: &[f64],
    y: f64,
) -> f64 {
    let terms: Vec<f64> = thetas
        .iter()
        .map(|t| model.log_lik_value(t, Some(log_noise), x, y).expect("shapes checked by caller"))
        .collect();
    log_sum_exp(&terms) - (thetas.len() as f64).ln()
}

/// `[P(y = −1), P(y = +1)]` averaged over the draws.
pub fn predict_probit(model: &LikelihoodModel, thetas: &[Vec<f64>], x: &[f64]) -> [f64; 2] {
    let p = thetas.iter().map(|t| norm_cdf(model.forward(t, x)[0])).sum::<f64>() / thetas.len() as f64;
    [1.0 - p, p]
}

/// `ln (1/K) Σ_k Φ(y·z_k)`, accurate in the tails.
pub fn predict_probit_loglik(model: &LikelihoodModel, thetas: &[Vec<f64>], x: &[f64], y: f64) -> f64 {
    let terms: Vec<f64> = thetas.iter().map(|t| log_norm_cdf(y * model.forward(t, x)[0])).collect();
    log_sum_exp(&terms) - (thetas.len() as f64).ln()
}

/// Class probabilities averaged over the draws.
pub fn predict_class(model: &LikelihoodModel, thetas: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let mut probs = Vec::new();
    for t in thetas {
        let logits = model.forward(t, x);
        let lse = log_sum_exp(&logits);
        if probs.is_empty() {
            probs = vec![0.0; logits.len()];
        }
        for (p, l) in probs.iter_mut().zip(&logits) {
            *p += (l - lse).exp();
        }
    }
    let total: f64 = probs.iter().sum();
    probs.iter().map(|p| p / total).collect()
}

/// `ln (1/K) Σ_k softmax_y(θ_k)`.
pub fn predict_class_loglik(model: &LikelihoodModel, thetas: &[Vec<f64>], x: &[f64], y: usize) -> f64 {
    let terms: Vec<f64> = thetas
        .iter()
        .map(|t| {
            let logits = model.forward(t, x);
            logits[y] - log_sum_exp(&logits)
        })
        .collect();
    log_sum_exp(&terms) - (thetas.len() as f64).ln()
}

/// Predictive mean and variances of a regression model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictiveMoments {
    pub mean: f64,
    /// Spread of the network output across draws.
    pub epistemic_var: f64,
    /// Epistemic variance plus output noise.
    pub total_var: f64,
}

pub fn predictive_moments(
    model: &LikelihoodModel,
    thetas: &[Vec<f64>],
    log_noise: f64,
    x: &[f64],
) -> PredictiveMoments {
    let outs: Vec<f64> = thetas.iter().map(|t| model.forward(t, x)[0]).collect();
    let k = outs.len() as f64;
    let mean = outs.iter().sum::<f64>() / k;
    let epistemic_var = outs.iter().map(|o| (o - mean).powi(2)).sum::<f64>() / k;
    PredictiveMoments { mean, epistemic_var, total_var: epistemic_var + log_noise.exp() }
}

/// Average test log-likelihood and test error (error rate, or RMSE in the
/// original target units for regression).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub test_ll: f64,
    pub test_error: f64,
}

/// Metrics of `params` on `test`, which must carry the training split's
/// standardization.
pub fn evaluate(model: &LikelihoodModel, params: &Params<f64>, test: &Dataset<f64>, k: usize, seed: u64) -> Metrics {
    let thetas = draw_thetas(&params.q, k, seed);
    let n = test.n_rows() as f64;
    let mut ll = 0.0;
    let mut err = 0.0;
    for i in 0..test.n_rows() {
        let (x, y) = (test.row(i), test.target(i));
        match test.task() {
            Task::Regression => {
                let lv = params.log_noise.expect("regression model carries a noise variance");
                ll += predict_loglik_regression(model, &thetas, lv, x, y) + test.target_log_jacobian();
                let m = predictive_moments(model, &thetas, lv, x).mean;
                err += (test.destandardize_target(m) - test.destandardize_target(y)).powi(2);
            }
            Task::Probit => {
                ll += predict_probit_loglik(model, &thetas, x, y);
                let [_, p] = predict_probit(model, &thetas, x);
                let label = if p >= 0.5 { 1.0 } else { -1.0 };
                err += f64::from(u8::from(label != y));
            }
            Task::Classification => {
                let c = y as usize;
                ll += predict_class_loglik(model, &thetas, x, c);
                let probs = predict_class(model, &thetas, x);
                err += f64::from(u8::from(argmax(&probs) != c));
            }
        }
    }
    let test_error = if test.task() == Task::Regression { (err / n).sqrt() } else { err / n };
    Metrics { test_ll: ll / n, test_error }
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, x)| if *x > v[best] { i } else { best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn gaussian(mu: Vec<f64>, log_var: Vec<f64>) -> FactorizedGaussian<f64> {
        FactorizedGaussian::new(mu, log_var).unwrap()
    }

    #[test]
    fn single_zero_draw_collapses_to_mean() {
        let model = LikelihoodModel::mlp_regression(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = model.theta_dim();
        let q = gaussian((0..d).map(|_| rng.sample(StandardNormal)).collect(), vec![-1.0; d]);
        let thetas = thetas_from_eps(&q, &[vec![0.0; d]]);
        let (x, y, lv) = ([0.3, -1.2], 0.7, -0.4);
        let got = predict_loglik_regression(&model, &thetas, lv, &x, y);
        let want = model.log_lik_value(q.mu(), Some(lv), &x, y).unwrap();
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn zero_mean_probit_is_even_at_origin() {
        let model = LikelihoodModel::probit(3, true);
        let q = gaussian(vec![0.0; 4], vec![0.0; 4]);
        let thetas = thetas_from_eps(&q, &[vec![0.0; 4]]);
        let p = predict_probit(&model, &thetas, &[0.0; 3]);
        assert_eq!(p, [0.5, 0.5]);
    }

    proptest! {
        #[test]
        fn mixture_lies_between_components(seed in 0u64..10_000, y in -3.0f64..3.0, k in 1usize..20) {
            let model = LikelihoodModel::linreg(2);
            let q = gaussian(vec![0.4, -0.2], vec![0.0, -1.0]);
            let thetas = draw_thetas(&q, k, seed);
            let x = [1.0, 0.5];
            let comps: Vec<f64> = thetas.iter().map(|t| model.log_lik_value(t, Some(0.0), &x, y).unwrap()).collect();
            let v = predict_loglik_regression(&model, &thetas, 0.0, &x, y);
            let lo = comps.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = comps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }

        #[test]
        fn probabilities_sum_to_one(seed in 0u64..10_000, x0 in -3.0f64..3.0, x1 in -3.0f64..3.0) {
            let model = LikelihoodModel::mlp_classification(2, &[4], 3);
            let d = model.theta_dim();
            let q = gaussian(vec![0.1; d], vec![0.0; d]);
            let thetas = draw_thetas(&q, 7, seed);
            let p = predict_class(&model, &thetas, &[x0, x1]);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
            let pp = predict_probit(&LikelihoodModel::probit(2, false), &draw_thetas(&gaussian(vec![0.5, -1.0], vec![0.0; 2]), 7, seed), &[x0, x1]);
            prop_assert!((pp[0] + pp[1] - 1.0).abs() < 1e-12);
        }
    }
}
