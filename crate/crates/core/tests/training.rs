use bbalpha::energy::{stationarity_residual, AlphaParam, Params};
use bbalpha::expfam::FactorizedGaussian;
use bbalpha::models::{gen_toy_cubic, synthetic_linreg, synthetic_probit, Dataset, LikelihoodModel};
use bbalpha::optim::*;
use bbalpha::oracle::bbalpha_fixed_point;
use nalgebra::{DMatrix, DVector};

fn exact_cfg(alpha: f64, n: usize) -> TrainConfig {
    TrainConfig {
        alpha: AlphaSetting::Value(alpha),
        energy_mode: EnergyMode::Exact,
        epochs: 5000,
        optimizer: OptimizerConfig::adam(1e-2),
        init_log_var: -3.0,
        batch_size: n,
        ..TrainConfig::default()
    }
}

fn as_matrix(data: &Dataset<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let x = DMatrix::from_fn(data.n_rows(), data.n_features(), |r, c| data.row(r)[c]);
    (x, DVector::from_column_slice(data.targets()))
}

#[test]
fn exact_mode_reaches_stationarity_and_oracle_fixed_point() {
    for (seed, alpha) in [(1, 0.5), (2, 1.0), (3, 1.5), (4, -0.5), (5, 0.1)] {
        let sigma2: f64 = 0.5;
        let (data, _) = synthetic_linreg::<f64>(seed, 15, 2, sigma2);
        let model = LikelihoodModel::linreg(2);
        let prior = FactorizedGaussian::standard(2);
        let out = train(&model, &data, &prior, Some(sigma2.ln()), &exact_cfg(alpha, 15)).unwrap();
        let p = Params::new(out.params.q.clone(), prior.clone(), Some(sigma2.ln())).unwrap();
        let r = stationarity_residual(&p, &model, &data, AlphaParam::new(alpha, 15).unwrap()).unwrap();
        assert!(r <= 1e-6, "alpha {alpha}: residual {r:e}");

        let (x, y) = as_matrix(&data);
        let fp = bbalpha_fixed_point(&x, &y, sigma2, alpha, 0.5, 1e-13, 100_000)
            .unwrap_or_else(|e| panic!("alpha {alpha}: {e}"));
        for i in 0..2 {
            assert!((fp.q.mu()[i] - p.q.mu()[i]).abs() < 1e-5);
            assert!((fp.q.var()[i] - p.q.var()[i]).abs() < 1e-5);
        }
    }
}

#[test]
fn training_is_deterministic() {
    let (data, _) = synthetic_probit::<f64>(7, 120, 3);
    let model = LikelihoodModel::probit(3, true);
    let prior = FactorizedGaussian::standard(model.theta_dim());
    let cfg = TrainConfig {
        alpha: AlphaSetting::Value(0.5),
        k_samples: 10,
        epochs: 5,
        optimizer: OptimizerConfig::adam(1e-2),
        seed: 42,
        ..TrainConfig::default()
    };
    let a = train(&model, &data, &prior, None, &cfg).unwrap();
    let b = train(&model, &data, &prior, None, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.trace.records, b.trace.records);
    let c = train(&model, &data, &prior, None, &TrainConfig { seed: 43, ..cfg }).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn monte_carlo_training_decreases_energy_on_toy_cubic() {
    let data = gen_toy_cubic::<f64>(0);
    let model = LikelihoodModel::mlp_regression(1, 20);
    let prior = FactorizedGaussian::standard(model.theta_dim());
    for alpha in [AlphaSetting::VB, AlphaSetting::Value(0.5), AlphaSetting::Value(1.0)] {
        let cfg = TrainConfig {
            alpha,
            k_samples: 10,
            batch_size: 5,
            epochs: 200,
            optimizer: OptimizerConfig::adam(1e-2),
            init: InitPolicy::Glorot,
            ..TrainConfig::default()
        };
        let out = train(&model, &data, &prior, Some(9.0_f64.ln()), &cfg).unwrap();
        let rec = &out.trace.records;
        let head: f64 = rec[..10].iter().map(|r| r.energy).sum::<f64>() / 10.0;
        let tail: f64 = rec[rec.len() - 10..].iter().map(|r| r.energy).sum::<f64>() / 10.0;
        assert!(tail < head, "{}: {head} -> {tail}", alpha.label());
        assert!(rec.iter().all(|r| r.energy.is_finite()));
    }
}

#[test]
fn single_precision_training_runs() {
    let (data, _) = synthetic_probit::<f32>(3, 80, 2);
    let model = LikelihoodModel::probit(2, false);
    let prior = FactorizedGaussian::<f32>::standard(2);
    let cfg =
        TrainConfig { k_samples: 5, epochs: 20, optimizer: OptimizerConfig::adam(1e-2), ..TrainConfig::default() };
    let out = train(&model, &data, &prior, None, &cfg).unwrap();
    assert!(out.trace.records.iter().all(|r| r.energy.is_finite()));
    assert!(out.params.q.mu().iter().all(|m| m.is_finite()));
}
