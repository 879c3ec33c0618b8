//! Gradient bias and variance of the Monte-Carlo energy.
//!
//! For a trained `q`, a fixed set of minibatches and each `(α, K)` cell, the
//! study averages `n_repeats` independent `K`-sample gradients and compares
//! the average with a `k_truth`-sample reference on the same minibatch. The
//! bias of a cell is the mean over minibatches of `‖ḡ_K − g_ref‖₂ / √dim`;
//! the VB objective is always run as a baseline and its bias is subtracted to
//! remove the Monte-Carlo floor shared by all columns.
//!
//! The spread of the noisy gradients is reported as `grad_std`: for each
//! minibatch, the root of the per-dimension mean squared deviation from the
//! grand mean over all minibatches, averaged over minibatches. It therefore
//! reflects subsampling as well as Monte-Carlo noise.
//!
//! Noise is drawn with common random numbers: the `r`-th repeat of a given
//! `(K, minibatch)` uses the same standard normal draws for every objective,
//! so differences between columns are not blurred by independent noise.

use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::{AlphaParam, EnergyError, EnergyFn, EpsMatrix, Estimator, Objective, Params, Trainable};
use crate::models::{Dataset, LikelihoodModel};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("invalid study configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error("failed to write report: {0}")]
    Io(#[from] std::io::Error),
}

/// Study parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasConfig {
    /// Nonzero α values; the VB baseline is added automatically.
    pub alphas: Vec<f64>,
    pub ks: Vec<usize>,
    pub n_minibatches: usize,
    pub batch_size: usize,
    pub n_repeats: usize,
    pub k_truth: usize,
    pub seed: u64,
    pub learn_noise: bool,
}

impl Default for BiasConfig {
    fn default() -> Self {
        Self {
            alphas: vec![1e-6, 0.5, 1.0],
            ks: vec![1, 5, 10],
            n_minibatches: 15,
            batch_size: 32,
            n_repeats: 1000,
            k_truth: 10_000,
            seed: 0,
            learn_noise: false,
        }
    }
}

impl BiasConfig {
    pub fn validate(&self, n_rows: usize) -> Result<(), DiagnosticsError> {
        let bad = |m: &str| Err(DiagnosticsError::Config(m.to_string()));
        if self.alphas.iter().any(|&a| a == 0.0 || !a.is_finite()) {
            return bad("alphas must be finite and nonzero (the VB baseline is always included)");
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return bad("ks must be nonempty and positive");
        }
        if self.n_minibatches == 0 || self.n_repeats < 2 || self.k_truth == 0 {
            return bad("need n_minibatches >= 1, n_repeats >= 2, k_truth >= 1");
        }
        if self.batch_size == 0 || self.batch_size > n_rows {
            return bad("batch_size must be in 1..=n_rows");
        }
        Ok(())
    }
}

/// One `(α, K)` cell. `alpha` is `None` for the VB baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasCell {
    pub alpha: Option<f64>,
    pub k: usize,
    pub bias_raw: f64,
    pub bias_vb_baseline: f64,
    pub bias_net: f64,
    /// Standard error of `bias_raw` over minibatches.
    pub bias_se: f64,
    /// Standard error of `bias_net` over minibatches.
    pub net_se: f64,
    /// Mean over minibatches of the root mean squared deviation of the
    /// noisy gradients from their grand mean over all minibatches; it
    /// includes the subsampling variability.
    pub grad_std: f64,
    /// Mean over minibatches of the Monte-Carlo standard deviation alone.
    pub mc_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    /// VB rows first, then each α in configuration order; `K` ascending
    /// inside each group.
    pub cells: Vec<BiasCell>,
    pub n_minibatches: usize,
    pub n_repeats: usize,
    pub k_truth: usize,
    pub dim: usize,
}

impl BiasReport {
    pub fn cell(&self, alpha: Option<f64>, k: usize) -> Option<&BiasCell> {
        self.cells.iter().find(|c| c.alpha == alpha && c.k == k)
    }

    /// Cells of one objective ordered by `K`.
    pub fn column(&self, alpha: Option<f64>) -> Vec<&BiasCell> {
        let mut v: Vec<&BiasCell> = self.cells.iter().filter(|c| c.alpha == alpha).collect();
        v.sort_by_key(|c| c.k);
        v
    }

    /// Whether `bias_net` strictly decreases in `K` for every nonzero α.
    pub fn monotone_in_k(&self) -> bool {
        let mut alphas: Vec<f64> = self.cells.iter().filter_map(|c| c.alpha).collect();
        alphas.dedup();
        alphas.iter().all(|&a| self.column(Some(a)).windows(2).all(|w| w[1].bias_net < w[0].bias_net))
    }

    /// Writes `alpha,k,bias_raw,bias_net,grad_std`; the VB row has `alpha = 0`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DiagnosticsError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["alpha", "k", "bias_raw", "bias_net", "grad_std"])
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        for c in &self.cells {
            out.write_record([
                format!("{}", c.alpha.unwrap_or(0.0)),
                c.k.to_string(),
                format!("{:e}", c.bias_raw),
                format!("{:e}", c.bias_net),
                format!("{:e}", c.grad_std),
            ])
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        }
        out.flush()?;
        Ok(())
    }
}

const TAG_TRUTH: u64 = 1 << 62;

fn noise_rng(seed: u64, k: usize, minibatch: usize, repeat: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((k as u64) << 40) ^ ((minibatch as u64) << 28) ^ repeat);
    rng
}

/// Fixed minibatches, each drawn without replacement.
pub fn fixed_minibatches(seed: u64, n_rows: usize, batch_size: usize, count: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TAG_TRUTH | 1);
    (0..count)
        .map(|_| {
            let mut b = sample(&mut rng, n_rows, batch_size).into_vec();
            b.sort_unstable();
            b
        })
        .collect()
}

fn gradient<T: Scalar>(
    objective: Objective<T>,
    params: &Params<T>,
    trainable: Trainable,
    model: &LikelihoodModel,
    data: &Dataset<T>,
    batch: &[usize],
    eps: &EpsMatrix<T>,
) -> Result<Vec<f64>, EnergyError> {
    let f = EnergyFn { objective, estimator: Estimator::MonteCarlo { batch, eps }, params, trainable, model, data };
    Ok(f.estimate()?.grad.into_iter().map(Scalar::as_f64).collect())
}

struct CellStats {
    bias: Vec<f64>,
    std: Vec<f64>,
    mc_std: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_err(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (var / v.len() as f64).sqrt()
}

/// Runs the study for the trained `params`.
pub fn gradient_bias_study<T: Scalar>(
    model: &LikelihoodModel,
    data: &Dataset<T>,
    params: &Params<T>,
    cfg: &BiasConfig,
) -> Result<BiasReport, DiagnosticsError> {
    cfg.validate(data.n_rows())?;
    for &a in &cfg.alphas {
        AlphaParam::new(T::lit(a), data.n_rows())?.check_mc()?;
    }
    let trainable = Trainable { noise: cfg.learn_noise && params.log_noise.is_some(), prior: false };
    let d = params.dim();
    let slots = params.n_slots(trainable);
    let batches = fixed_minibatches(cfg.seed, data.n_rows(), cfg.batch_size, cfg.n_minibatches);

    let mut objectives: Vec<(Option<f64>, Objective<T>)> = vec![(None, Objective::Vb)];
    objectives.extend(cfg.alphas.iter().map(|&a| (Some(a), Objective::BbAlpha(T::lit(a)))));
    let n_obj = objectives.len();

    // reference gradients per (objective, minibatch)
    let refs: Vec<Vec<Vec<f64>>> = batches
        .par_iter()
        .enumerate()
        .map(|(mb, batch)| {
            let eps = EpsMatrix::sample(&mut noise_rng(cfg.seed, cfg.k_truth, mb, TAG_TRUTH), cfg.k_truth, d);
            objectives
                .iter()
                .map(|(_, obj)| gradient(*obj, params, trainable, model, data, batch, &eps))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;

    let mut stats: Vec<Vec<CellStats>> = (0..n_obj)
        .map(|_| cfg.ks.iter().map(|_| CellStats { bias: vec![], std: vec![], mc_std: vec![] }).collect())
        .collect();

    for (ki, &k) in cfg.ks.iter().enumerate() {
        // per objective and minibatch: sum and sum of squares over repeats
        let mut sums = vec![vec![vec![0.0; slots]; batches.len()]; n_obj];
        let mut sqs = vec![vec![vec![0.0; slots]; batches.len()]; n_obj];
        for (mb, batch) in batches.iter().enumerate() {
            // per repeat: gradient of every objective on shared noise
            let grads: Vec<Vec<Vec<f64>>> = (0..cfg.n_repeats as u64)
                .into_par_iter()
                .map(|r| {
                    let eps = EpsMatrix::sample(&mut noise_rng(cfg.seed, k, mb, r), k, d);
                    objectives
                        .iter()
                        .map(|(_, obj)| gradient(*obj, params, trainable, model, data, batch, &eps))
                        .collect::<Result<Vec<_>, _>>()
                })
                .collect::<Result<_, _>>()?;
            for oi in 0..n_obj {
                for g in &grads {
                    for (j, v) in g[oi].iter().enumerate() {
                        sums[oi][mb][j] += v;
                        sqs[oi][mb][j] += v * v;
                    }
                }
            }
        }
        let reps = cfg.n_repeats as f64;
        for oi in 0..n_obj {
            let mut grand = vec![0.0; slots];
            for s in &sums[oi] {
                for (g, v) in grand.iter_mut().zip(s) {
                    *g += v / (reps * batches.len() as f64);
                }
            }
            let cell = &mut stats[oi][ki];
            for mb in 0..batches.len() {
                let (sum, sq) = (&sums[oi][mb], &sqs[oi][mb]);
                let avg: Vec<f64> = sum.iter().map(|v| v / reps).collect();
                let err = avg.iter().zip(&refs[mb][oi]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                cell.bias.push(err / (slots as f64).sqrt());
                let mut within = 0.0;
                let mut around = 0.0;
                for j in 0..slots {
                    within += (sq[j] - reps * avg[j] * avg[j]).max(0.0) / (reps - 1.0);
                    around += (sq[j] - 2.0 * grand[j] * sum[j] + reps * grand[j] * grand[j]).max(0.0) / reps;
                }
                cell.mc_std.push((within / slots as f64).sqrt());
                cell.std.push((around / slots as f64).sqrt());
            }
        }
    }

    let mut cells = Vec::with_capacity(n_obj * cfg.ks.len());
    for (oi, (label, _)) in objectives.iter().enumerate() {
        for (ki, &k) in cfg.ks.iter().enumerate() {
            let s = &stats[oi][ki];
            let bias_raw = mean(&s.bias);
            let baseline = mean(&stats[0][ki].bias);
            let diffs: Vec<f64> = s.bias.iter().zip(&stats[0][ki].bias).map(|(a, b)| a - b).collect();
            cells.push(BiasCell {
                alpha: *label,
                k,
                bias_raw,
                bias_vb_baseline: baseline,
                bias_net: bias_raw - baseline,
                bias_se: std_err(&s.bias),
                net_se: std_err(&diffs),
                grad_std: mean(&s.std),
                mc_std: mean(&s.mc_std),
            });
        }
    }
    Ok(BiasReport {
        cells,
        n_minibatches: cfg.n_minibatches,
        n_repeats: cfg.n_repeats,
        k_truth: cfg.k_truth,
        dim: slots,
    })
}
