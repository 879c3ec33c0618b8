use bbalpha::energy::{bbalpha_energy_exact, stationarity_residual, AlphaParam, EnergyError, Params};
use bbalpha::expfam::FactorizedGaussian;
use bbalpha::models::{Dataset, LikelihoodModel, Task};
use bbalpha::oracle::*;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn to_dataset(x: &DMatrix<f64>, y: &DVector<f64>) -> Dataset<f64> {
    let mut feats = Vec::with_capacity(x.len());
    for r in 0..x.nrows() {
        feats.extend(x.row(r).iter());
    }
    Dataset::new(feats, x.ncols(), y.iter().copied().collect(), Task::Regression, "oracle").unwrap()
}

fn alpha_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 / 10.0).collect()
}

fn random_problem(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (DMatrix<f64>, DVector<f64>, f64) {
    let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.5..1.5));
    let y = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
    (x, y, rng.random_range(0.3..2.0))
}

#[test]
fn fixed_point_matches_closed_forms_on_grid() {
    for (example, closed) in [(1, example1_lambda as fn(f64, f64) -> _), (2, example2_lambda)] {
        let (x, y) = if example == 1 { example1_data([0.0, 0.0]) } else { example2_data([0.0, 0.0]) };
        let mut prev = 0.0;
        for alpha in alpha_grid() {
            let fp = bbalpha_fixed_point(&x, &y, 1.0, alpha, 0.5, 1e-14, 100_000).unwrap();
            let want = closed(alpha, 1.0).unwrap();
            for &l in &fp.site_precision {
                assert!((l - want).abs() < 1e-8, "example {example}, alpha {alpha}: {l} vs {want}");
            }
            let var = fp.q.var()[0];
            assert!(var > prev, "variance not increasing at alpha {alpha}");
            prev = var;
        }
    }
}

#[test]
fn small_alpha_limits() {
    let (x, y) = example1_data([0.0, 0.0]);
    let fp = bbalpha_fixed_point(&x, &y, 1.0, 1e-6, 0.5, 1e-14, 100_000).unwrap();
    assert!((fp.q.var()[0] - 0.5).abs() < 1e-6);

    let (x, y) = example2_data([0.0, 0.0]);
    let fp = bbalpha_fixed_point(&x, &y, 1.0, 1e-6, 0.5, 1e-14, 100_000).unwrap();
    assert!((fp.site_precision[0] - 1.0).abs() < 1e-6);
    assert!((fp.q.var()[0] - 1.0 / 3.0).abs() < 1e-6);
    let truth = true_posterior_linreg(&x, &y, 1.0).unwrap();
    assert!(fp.q.var()[0] < truth.cov()[(0, 0)]);
}

#[test]
fn fixed_point_zeroes_energy_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..20 {
        let (x, y, sigma2) = random_problem(&mut rng, 3 + case % 4, 1 + case % 3);
        let alpha = [0.3, 0.5, 1.0, 1.5, -0.5][case % 5];
        let fp = bbalpha_fixed_point(&x, &y, sigma2, alpha, 0.5, 1e-13, 200_000).unwrap();
        let data = to_dataset(&x, &y);
        let model = LikelihoodModel::linreg(x.ncols());
        let params = Params::new(fp.q.clone(), FactorizedGaussian::standard(x.ncols()), Some(sigma2.ln())).unwrap();
        let a = AlphaParam::new(alpha, data.n_rows()).unwrap();
        let r = stationarity_residual(&params, &model, &data, a).unwrap();
        assert!(r <= 1e-8, "case {case}: residual {r}");

        let mut mu = fp.q.mu().to_vec();
        mu[0] += 0.1;
        let moved = Params::new(
            FactorizedGaussian::new(mu, fp.q.log_var().to_vec()).unwrap(),
            params.prior.clone(),
            params.log_noise,
        )
        .unwrap();
        let r = stationarity_residual(&moved, &model, &data, a).unwrap();
        assert!(r > 1e-3, "case {case}: perturbed residual {r}");
    }
}

#[test]
fn tied_cavities_reduce_to_bbalpha_energy() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut agreed = 0;
    for case in 0..30 {
        let d = 1 + case % 3;
        let (x, y, sigma2) = random_problem(&mut rng, 2 + case % 5, d);
        let n = x.nrows();
        let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lv: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..0.0)).collect();
        let pmu: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
        let plv: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
        let alpha = [0.5, 1.0, -1.0, 1.7][case % 4];

        let q = FactorizedGaussian::new(mu.clone(), lv.clone()).unwrap();
        let prior = FactorizedGaussian::new(pmu.clone(), plv.clone()).unwrap();
        let params = Params::new(q.clone(), prior.clone(), Some(sigma2.ln())).unwrap();
        let data = to_dataset(&x, &y);
        let model = LikelihoodModel::linreg(d);
        let e = bbalpha_energy_exact(&params, &model, &data, AlphaParam::new(alpha, n).unwrap());

        let qn = GaussianDist::from_factorized(&q).to_natural();
        let pn = GaussianDist::from_factorized(&prior).to_natural();
        let cav = tied_cavities(&qn, &pn, n, alpha);
        match (ep_energy_constrained(&qn, &cav, &pn, &x, &y, sigma2, alpha), e) {
            (Ok((v, residual)), Ok(e)) => {
                assert!(residual < 1e-12, "case {case}: residual {residual}");
                assert!((v - e).abs() <= 1e-9 * e.abs().max(1.0), "case {case}: {v} vs {e}");
                agreed += 1;
            }
            (Err(OracleError::ImproperTilted { row }), Err(EnergyError::ImproperTilted { row: r2 })) => {
                assert_eq!(row, r2);
            }
            (a, b) => panic!("case {case}: oracle {a:?} vs energy {b:?}"),
        }
    }
    assert!(agreed >= 20, "only {agreed} proper instances");
}

#[test]
fn power_ep_recovers_truth_where_bbalpha_does_not() {
    let (x, y) = example1_data([1.0, 2.0]);
    let truth = true_posterior_linreg(&x, &y, 1.0).unwrap();
    let ep = power_ep_message_passing(&x, &y, 1.0, 1.0, 3).unwrap();
    assert!((ep.q.mu() - truth.mu()).amax() < 1e-8);
    assert!((ep.q.cov() - truth.cov()).amax() < 1e-8);

    let fp = bbalpha_fixed_point(&x, &y, 1.0, 1.0, 0.5, 1e-13, 100_000).unwrap();
    let ep_site_prec: f64 = ep.sites.iter().map(|s| s.precision[(0, 0)]).sum::<f64>() / 2.0;
    assert!((fp.site_precision[0] - ep_site_prec).abs() > 1e-3);
    assert!((fp.q.var()[0] - truth.cov()[(0, 0)]).abs() > 1e-3);
    assert!((fp.q.mu()[1] - truth.mu()[1]).abs() > 1e-3);
}
