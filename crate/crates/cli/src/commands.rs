//! Subcommand implementations. Each returns its results; `main` decides
//! where they are written.

use std::path::{Path, PathBuf};
use std::time::Instant;

use bbalpha::diagnostics::{gradient_bias_study, BiasReport};
use bbalpha::energy::Params;
use bbalpha::expfam::FactorizedGaussian;
use bbalpha::models::{gen_toy_cubic_n, Dataset, DatasetMeta, LikelihoodModel};
use bbalpha::optim::{train, AlphaSetting, InitPolicy, OptimizerConfig, TrainConfig, TrainOutcome};
use bbalpha::oracle::{
    alpha_divergence, example1_data, example1_lambda, example2_data, example2_lambda, kl_divergence,
    true_posterior_linreg, GaussianDist, OracleError,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::posterior::StoredPosterior;
use crate::predict::{draw_thetas, evaluate, predictive_moments};
use crate::report::{aggregate, write_metrics_csv, RunReport, SplitMetrics, TraceSummary, RANK_CONVENTION};

const SPLIT_STREAM: u64 = 0x5917;
const PREDICT_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// Train/test indices of split `seed`: a seeded permutation cut at
/// `round(fraction · n)`, each side sorted.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let n_train = ((fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let (mut tr, mut te) = (idx[..n_train].to_vec(), idx[n_train..].to_vec());
    tr.sort_unstable();
    te.sort_unstable();
    (tr, te)
}

/// Training-split statistics restricted to what the config standardizes.
pub fn standardization(train_raw: &Dataset<f64>, features: bool, targets: bool) -> DatasetMeta {
    let mut probe = train_raw.clone();
    probe.standardize(targets);
    let mut stats = probe.meta().clone();
    if !features {
        stats.features_standardized = false;
        stats.feature_means.iter_mut().for_each(|m| *m = 0.0);
        stats.feature_stds.iter_mut().for_each(|s| *s = 1.0);
    }
    stats
}

/// Prediction draws shared by every method on a split.
pub fn prediction_seed(split_seed: u64) -> u64 {
    split_seed ^ PREDICT_STREAM
}

fn initial_log_noise(cfg: &RunConfig, model: &LikelihoodModel) -> Option<f64> {
    model.uses_noise().then(|| cfg.model.noise_var.ln())
}

fn prior(cfg: &RunConfig, model: &LikelihoodModel) -> Result<FactorizedGaussian<f64>, CliError> {
    FactorizedGaussian::isotropic(model.theta_dim(), 0.0, cfg.model.prior_var)
        .map_err(|e| CliError::Usage(format!("prior: {e}")))
}

/// Everything `cmd_train` produces.
pub struct TrainRun {
    pub report: RunReport,
    /// `(split, method, posterior)` in split-major order.
    pub posteriors: Vec<(usize, String, StoredPosterior)>,
}

struct SplitOutput {
    metrics: Vec<SplitMetrics>,
    traces: Vec<TraceSummary>,
    posteriors: Vec<(usize, String, StoredPosterior)>,
}

/// One split: standardize on the training rows, train every method and
/// evaluate on the held-out rows.
fn run_split(
    cfg: &RunConfig,
    data: &Dataset<f64>,
    model: &LikelihoodModel,
    split: usize,
) -> Result<SplitOutput, CliError> {
    let seed = cfg.train.seed.wrapping_add(split as u64);
    let (tr, te) = split_indices(data.n_rows(), cfg.protocol.train_fraction, seed);
    let stats = standardization(&data.subset(&tr), cfg.dataset.standardize_features, cfg.dataset.standardize_targets);
    let train_ds = data.subset(&tr).apply_standardization(&stats);
    let test_ds = data.subset(&te).apply_standardization(&stats);
    let prior = prior(cfg, model)?;
    let mut out = SplitOutput { metrics: Vec::new(), traces: Vec::new(), posteriors: Vec::new() };
    for alpha in cfg.methods() {
        let method = alpha.label();
        let tcfg =
            TrainConfig { alpha, seed, batch_size: cfg.train.batch_size.min(train_ds.n_rows()), ..cfg.train.clone() };
        let TrainOutcome { params, trace } = train(model, &train_ds, &prior, initial_log_noise(cfg, model), &tcfg)
            .map_err(|source| CliError::Train { split, method: method.clone(), source })?;
        let m = evaluate(model, &params, &test_ds, cfg.protocol.metrics_k, prediction_seed(seed));
        let last = trace.records.last().copied().expect("at least one epoch");
        out.metrics.push(SplitMetrics {
            split,
            method: method.clone(),
            seed,
            test_ll: m.test_ll,
            test_error: m.test_error,
            final_energy: last.energy,
        });
        out.traces.push(TraceSummary {
            split,
            method: method.clone(),
            epochs: trace.records.len(),
            first_energy: trace.records[0].energy,
            final_energy: last.energy,
            final_grad_norm: last.grad_norm,
            wall_time_secs: trace.wall_time_secs,
        });
        out.posteriors.push((split, method, StoredPosterior { q: params.q, log_noise: params.log_noise }));
    }
    Ok(out)
}

/// Repeated random splits, every configured method on each.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainRun, CliError> {
    let started = Instant::now();
    let data = cfg.load_dataset()?;
    let model = cfg.build_model(&data)?;
    if data.n_rows() < 2 {
        return Err(CliError::Usage("need at least two rows to split".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.protocol.workers)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    let outputs: Vec<SplitOutput> = pool.install(|| {
        (0..cfg.protocol.n_splits).into_par_iter().map(|s| run_split(cfg, &data, &model, s)).collect::<Result<_, _>>()
    })?;
    let methods: Vec<String> = cfg.methods().iter().map(|a| a.label()).collect();
    let mut splits = Vec::new();
    let mut traces = Vec::new();
    let mut posteriors = Vec::new();
    for o in outputs {
        splits.extend(o.metrics);
        traces.extend(o.traces);
        posteriors.extend(o.posteriors);
    }
    let report = RunReport {
        name: cfg.name.clone(),
        config: cfg.clone(),
        aggregates: aggregate(&methods, &splits),
        methods,
        splits,
        traces,
        rank_convention: RANK_CONVENTION.into(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainRun { report, posteriors })
}

/// Writes `report.json`, `metrics.csv` and (when enabled)
/// `posteriors/split{S}_{method}.txt` under `dir`.
pub fn write_train_artifacts(run: &TrainRun, dir: &Path, save_posteriors: bool) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut written = Vec::new();
    let report_path = dir.join("report.json");
    let json = serde_json::to_string_pretty(&run.report).expect("report serializes");
    std::fs::write(&report_path, json + "\n").map_err(|e| CliError::io(&report_path, e))?;
    written.push(report_path);
    let csv_path = dir.join("metrics.csv");
    let file = std::fs::File::create(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;
    write_metrics_csv(file, &run.report.splits)
        .map_err(|e| CliError::Format { path: csv_path.clone(), message: e.to_string() })?;
    written.push(csv_path);
    if save_posteriors {
        let pdir = dir.join("posteriors");
        std::fs::create_dir_all(&pdir).map_err(|e| CliError::io(&pdir, e))?;
        for (split, method, post) in &run.posteriors {
            let p = pdir.join(format!("split{split}_{method}.txt"));
            std::fs::write(&p, post.to_text()).map_err(|e| CliError::io(&p, e))?;
            written.push(p);
        }
    }
    Ok(written)
}

/// Result of the bias study together with the pretrained parameters.
pub struct BiasRun {
    pub report: BiasReport,
    pub params: Params<f64>,
}

impl BiasRun {
    pub fn summary_line(&self) -> String {
        let verdict = if self.report.monotone_in_k() { "PASS" } else { "FAIL" };
        format!("monotone-in-K: {verdict}")
    }
}

/// Pretrain on the whole (standardized) dataset with `cfg.train`, then run
/// the gradient bias study at the fitted parameters.
pub fn cmd_bias(cfg: &RunConfig) -> Result<BiasRun, CliError> {
    let raw = cfg.load_dataset()?;
    let stats = standardization(&raw, cfg.dataset.standardize_features, cfg.dataset.standardize_targets);
    let data = raw.apply_standardization(&stats);
    let model = cfg.build_model(&data)?;
    let prior = prior(cfg, &model)?;
    let tcfg = TrainConfig { batch_size: cfg.train.batch_size.min(data.n_rows()), ..cfg.train.clone() };
    let out = train(&model, &data, &prior, initial_log_noise(cfg, &model), &tcfg)
        .map_err(|source| CliError::Train { split: 0, method: cfg.train.alpha.label(), source })?;
    let report = gradient_bias_study(&model, &data, &out.params, &cfg.bias)?;
    Ok(BiasRun { report, params: out.params })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticRow {
    pub alpha: f64,
    pub lambda: f64,
    pub q_variance: f64,
    pub true_variance: f64,
    /// `KL[q ‖ p]` from the fitted factorized `q` to the exact posterior.
    pub kl_to_truth: f64,
}

/// Default α grid of `analytic`: 0.01, 0.1, 0.2, …, 1.9, 1.99.
pub fn default_analytic_grid() -> Vec<f64> {
    let mut g = vec![0.01];
    g.extend((1..20).map(|i| i as f64 / 10.0));
    g.push(1.99);
    g
}

/// Closed-form tied-site solutions of the two two-point examples (`y = 0`).
pub fn cmd_analytic(alphas: &[f64], example: u8, sigma2: f64) -> Result<Vec<AnalyticRow>, CliError> {
    let (x, y) = match example {
        1 => example1_data([0.0, 0.0]),
        2 => example2_data([0.0, 0.0]),
        e => return Err(CliError::Usage(format!("example must be 1 or 2, got {e}"))),
    };
    let truth = true_posterior_linreg(&x, &y, sigma2)?;
    alphas
        .iter()
        .map(|&alpha| {
            let lambda = if example == 1 { example1_lambda(alpha, sigma2)? } else { example2_lambda(alpha, sigma2)? };
            let q_variance = 1.0 / (1.0 + 2.0 * lambda);
            let q = GaussianDist::diagonal(&[0.0; 2], &[q_variance; 2])?;
            Ok(AnalyticRow {
                alpha,
                lambda,
                q_variance,
                true_variance: truth.cov()[(0, 0)],
                kl_to_truth: kl_divergence(&q, &truth)?,
            })
        })
        .collect::<Result<_, OracleError>>()
        .map_err(CliError::from)
}

/// Settings of the toy predictive experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub alphas: Vec<AlphaSetting>,
    pub seed: u64,
    pub n_points: usize,
    pub hidden: usize,
    pub noise_var: f64,
    pub prior_var: f64,
    /// Train on standardized inputs and targets; the noise variance stays
    /// fixed in original units.
    pub standardize: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub k_samples: usize,
    pub lr: f64,
    pub init_log_var: f64,
    pub grid_min: f64,
    pub grid_max: f64,
    pub grid_points: usize,
    pub predict_k: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            alphas: vec![AlphaSetting::Value(1e-6), AlphaSetting::Value(0.5), AlphaSetting::Value(1.0)],
            seed: 0,
            n_points: 20,
            hidden: 100,
            noise_var: 9.0,
            prior_var: 1.0,
            standardize: true,
            epochs: 450,
            batch_size: 20,
            k_samples: 100,
            lr: 1e-2,
            init_log_var: -10.0,
            grid_min: -6.0,
            grid_max: 6.0,
            grid_points: 121,
            predict_k: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyRow {
    pub alpha: f64,
    pub x: f64,
    pub mean: f64,
    /// Predictive standard deviation including the output noise.
    pub std: f64,
    pub epistemic_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToySummary {
    pub alpha: f64,
    /// Mean of `std` over the grid.
    pub mean_std: f64,
    /// Predictive-mean RMSE against `x³` on the training inputs.
    pub train_rmse_vs_cubic: f64,
    pub final_energy: f64,
}

pub struct ToyRun {
    pub rows: Vec<ToyRow>,
    pub summaries: Vec<ToySummary>,
}

fn alpha_value(a: AlphaSetting) -> f64 {
    match a {
        AlphaSetting::Value(v) => v,
        AlphaSetting::Named(_) => 0.0,
    }
}

/// Fits the cubic toy problem with the noise variance and prior frozen, and tabulates the predictive distribution on a grid.
pub fn cmd_toy_predictive(cfg: &ToyConfig) -> Result<ToyRun, CliError> {
    if cfg.grid_points < 2 || !(cfg.grid_max > cfg.grid_min) || cfg.predict_k == 0 || cfg.alphas.is_empty() {
        return Err(CliError::Usage(
            "toy grid needs ≥ 2 points on a non-empty interval, predict_k ≥ 1 and an α".into(),
        ));
    }
    let raw = gen_toy_cubic_n::<f64>(cfg.seed, cfg.n_points);
    let stats = standardization(&raw, cfg.standardize, cfg.standardize);
    let data = raw.apply_standardization(&stats);
    let (x_mean, x_std) = (stats.feature_means[0], stats.feature_stds[0]);
    let y_std = if stats.targets_standardized { stats.target_std } else { 1.0 };
    // noise variance is fixed in original units
    let lv = cfg.noise_var.ln() - 2.0 * y_std.ln();
    let model = LikelihoodModel::mlp_regression(1, cfg.hidden);
    model.validate()?;
    let prior = FactorizedGaussian::isotropic(model.theta_dim(), 0.0, cfg.prior_var)
        .map_err(|e| CliError::Usage(format!("prior: {e}")))?;
    let grid: Vec<f64> = (0..cfg.grid_points)
        .map(|i| cfg.grid_min + (cfg.grid_max - cfg.grid_min) * i as f64 / (cfg.grid_points - 1) as f64)
        .collect();
    let fits: Vec<(AlphaSetting, TrainOutcome<f64>)> = cfg
        .alphas
        .par_iter()
        .map(|&alpha| {
            let tcfg = TrainConfig {
                alpha,
                k_samples: cfg.k_samples,
                batch_size: cfg.batch_size.min(data.n_rows()),
                epochs: cfg.epochs,
                optimizer: OptimizerConfig::adam(cfg.lr),
                init: InitPolicy::Glorot,
                init_log_var: cfg.init_log_var,
                seed: cfg.seed,
                ..TrainConfig::default()
            };
            train(&model, &data, &prior, Some(lv), &tcfg).map(|o| (alpha, o)).map_err(|source| CliError::Train {
                split: 0,
                method: alpha.label(),
                source,
            })
        })
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for (alpha, out) in fits {
        let a = alpha_value(alpha);
        let thetas = draw_thetas(&out.params.q, cfg.predict_k, prediction_seed(cfg.seed));
        let predict = |x: f64| {
            let m = predictive_moments(&model, &thetas, lv, &[(x - x_mean) / x_std]);
            let epistemic_var = m.epistemic_var * y_std * y_std;
            (data.destandardize_target(m.mean), epistemic_var, epistemic_var + cfg.noise_var)
        };
        let mut std_sum = 0.0;
        for &x in &grid {
            let (mean, epi, total) = predict(x);
            std_sum += total.sqrt();
            rows.push(ToyRow { alpha: a, x, mean, std: total.sqrt(), epistemic_std: epi.sqrt() });
        }
        let sq: f64 = (0..raw.n_rows())
            .map(|i| {
                let x = raw.row(i)[0];
                (predict(x).0 - x.powi(3)).powi(2)
            })
            .sum();
        summaries.push(ToySummary {
            alpha: a,
            mean_std: std_sum / grid.len() as f64,
            train_rmse_vs_cubic: (sq / raw.n_rows() as f64).sqrt(),
            final_energy: out.trace.records.last().map_or(f64::NAN, |r| r.energy),
        });
    }
    Ok(ToyRun { rows, summaries })
}

/// The cubic toy data set.
pub fn cmd_gen_toy(seed: u64, n: usize) -> Dataset<f64> {
    gen_toy_cubic_n(seed, n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceRow {
    pub alpha: f64,
    /// `NaN` where the divergence is undefined (`p^α q^{1−α}` not
    /// integrable).
    pub divergence: f64,
}

/// `D_α[p ‖ q]` for diagonal Gaussians over an α grid.
pub fn cmd_divergence(
    p_mean: &[f64],
    p_var: &[f64],
    q_mean: &[f64],
    q_var: &[f64],
    alphas: &[f64],
) -> Result<Vec<DivergenceRow>, CliError> {
    let dim = p_mean.len();
    if [p_var.len(), q_mean.len(), q_var.len()].iter().any(|&l| l != dim) || dim == 0 {
        return Err(CliError::Usage("means and variances must share one non-zero length".into()));
    }
    let g = |m: &[f64], v: &[f64]| GaussianDist::diagonal(m, v);
    let (p, q) = (g(p_mean, p_var)?, g(q_mean, q_var)?);
    alphas
        .iter()
        .map(|&alpha| match alpha_divergence(&p, &q, alpha) {
            Ok(d) => Ok(DivergenceRow { alpha, divergence: d }),
            Err(OracleError::UndefinedDivergence) => Ok(DivergenceRow { alpha, divergence: f64::NAN }),
            Err(e) => Err(e.into()),
        })
        .collect()
}

/// Serialize rows with headers taken from their field names.
pub fn write_rows<W: std::io::Write, R: Serialize>(w: W, rows: &[R]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// Parse rows written by [`write_rows`].
pub fn read_rows<R: std::io::Read, T: for<'de> Deserialize<'de>>(r: R) -> csv::Result<Vec<T>> {
    csv::Reader::from_reader(r).deserialize().collect()
}

/// Writes the toy data set as `x,y`.
pub fn write_dataset_csv<W: std::io::Write>(w: W, data: &Dataset<f64>) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = data.meta().feature_names.clone();
    header.push(data.meta().target_name.clone());
    out.write_record(&header)?;
    for i in 0..data.n_rows() {
        let mut rec: Vec<String> = data.row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(format!("{:?}", data.target(i)));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_partition_rows() {
        for seed in 0..5 {
            let (tr, te) = split_indices(37, 0.9, seed);
            assert_eq!(tr.len(), 33);
            let mut all = [tr.clone(), te].concat();
            all.sort_unstable();
            assert_eq!(all, (0..37).collect::<Vec<_>>());
            assert_eq!(split_indices(37, 0.9, seed).0, tr);
        }
        assert_ne!(split_indices(37, 0.9, 0).0, split_indices(37, 0.9, 1).0);
    }

    #[test]
    fn analytic_rows_by_hand() {
        let rows = cmd_analytic(&[1.0], 1, 1.0).unwrap();
        assert!((rows[0].q_variance - 1.0 / 3f64.sqrt()).abs() < 1e-12);
        assert!((rows[0].true_variance - 0.5).abs() < 1e-12);
        assert!(rows[0].kl_to_truth > 0.0);
        assert!(matches!(cmd_analytic(&[2.5], 1, 1.0), Err(CliError::Oracle(_))));
        assert!(cmd_analytic(&[0.5], 3, 1.0).is_err());
    }

    #[test]
    fn divergence_zero_for_identical() {
        let rows = cmd_divergence(&[0.0], &[1.0], &[0.0], &[1.0], &[-1.0, 0.0, 0.5, 1.0, 2.0]).unwrap();
        assert!(rows.iter().all(|r| r.divergence.abs() < 1e-12));
        let rows = cmd_divergence(&[0.0], &[4.0], &[0.0], &[1.0], &[3.0]).unwrap();
        assert!(rows[0].divergence.is_nan());
    }
}
