use std::path::Path;
use std::process::Command;

use bbalpha::energy::Params;
use bbalpha::expfam::FactorizedGaussian;
use bbalpha::models::{read_csv, CsvSchema, Task};
use bbalpha_cli::commands::{
    cmd_analytic, cmd_bias, cmd_divergence, cmd_gen_toy, cmd_toy_predictive, cmd_train, default_analytic_grid,
    read_rows, split_indices, standardization, write_dataset_csv, write_rows, write_train_artifacts, AnalyticRow,
    DivergenceRow, ToyConfig, ToyRow,
};
use bbalpha_cli::posterior::StoredPosterior;
use bbalpha_cli::predict::evaluate;
use bbalpha_cli::report::{mean_se, read_metrics_csv, RunReport};
use bbalpha_cli::RunConfig;

const SMOKE: &str = r#"
name = "smoke"
[dataset]
kind = "synthetic_linreg"
n = 60
d = 3
sigma2 = 0.5
seed = 2
[model]
kind = "linreg"
noise_var = 0.5
[train]
k_samples = 10
epochs = 1
[protocol]
n_splits = 1
alphas = [0.5, "vb"]
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bbalpha"))
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn smoke_run_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("smoke.toml");
    write(&cfg_path, SMOKE);
    let out = dir.path().join("out");
    let status = bin().args(["train", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap()]).output().unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    for f in ["report.json", "metrics.csv", "posteriors/split0_0.5.txt", "posteriors/split0_vb.txt"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let report: RunReport = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.methods, ["0.5", "vb"]);
    assert_eq!(report.splits.len(), 2);
    assert!(report.rank_convention.contains("1 = best"));
}

#[test]
fn rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("smoke.toml");
    write(&cfg_path, &SMOKE.replace("n_splits = 1", "n_splits = 3\nworkers = 2"));
    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let st = bin().args(["train", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap()]).status().unwrap();
        assert!(st.success());
        csvs.push(std::fs::read(out.join("metrics.csv")).unwrap());
        csvs.push(std::fs::read(out.join("posteriors/split2_vb.txt")).unwrap());
    }
    assert_eq!(csvs[0], csvs[2]);
    assert_eq!(csvs[1], csvs[3]);
}

#[test]
fn artifacts_round_trip() {
    let cfg = RunConfig::parse(SMOKE).unwrap();
    let run = cmd_train(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_train_artifacts(&run, dir.path(), true).unwrap();
    let report: RunReport =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report, run.report);
    let rows = read_metrics_csv(std::fs::File::open(dir.path().join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(rows, run.report.splits);
    for (s, m, p) in &run.posteriors {
        let text = std::fs::read_to_string(dir.path().join(format!("posteriors/split{s}_{m}.txt"))).unwrap();
        assert_eq!(&StoredPosterior::parse(&text).unwrap(), p);
    }

    let analytic = cmd_analytic(&default_analytic_grid(), 1, 1.0).unwrap();
    let mut buf = Vec::new();
    write_rows(&mut buf, &analytic).unwrap();
    assert_eq!(read_rows::<_, AnalyticRow>(buf.as_slice()).unwrap(), analytic);

    let div = cmd_divergence(&[0.0], &[4.0], &[0.0], &[1.0], &[0.5, 3.0]).unwrap();
    let mut buf = Vec::new();
    write_rows(&mut buf, &div).unwrap();
    let back: Vec<DivergenceRow> = read_rows(buf.as_slice()).unwrap();
    assert_eq!(back[0], div[0]);
    assert!(back[1].divergence.is_nan());

    let toy = cmd_gen_toy(3, 20);
    let path = dir.path().join("toy.csv");
    write_dataset_csv(std::fs::File::create(&path).unwrap(), &toy).unwrap();
    let back = read_csv::<f64>(&path, &CsvSchema::new("y", Task::Regression)).unwrap();
    assert_eq!(back.targets(), toy.targets());
    assert_eq!(back.n_rows(), 20);
    for r in 0..20 {
        assert_eq!(back.row(r), toy.row(r));
    }
}

#[test]
fn aggregates_recompute_from_rows() {
    let cfg =
        RunConfig::parse(&SMOKE.replace("n_splits = 1", "n_splits = 4").replace("epochs = 1", "epochs = 5")).unwrap();
    let run = cmd_train(&cfg).unwrap();
    for agg in &run.report.aggregates {
        let rows: Vec<_> = run.report.splits.iter().filter(|r| r.method == agg.method).collect();
        assert_eq!(rows.len(), 4);
        let (m, se) = mean_se(&rows.iter().map(|r| r.test_ll).collect::<Vec<_>>());
        assert!((m - agg.test_ll_mean).abs() < 1e-10 && (se - agg.test_ll_se).abs() < 1e-10);
        let (m, se) = mean_se(&rows.iter().map(|r| r.test_error).collect::<Vec<_>>());
        assert!((m - agg.test_error_mean).abs() < 1e-10 && (se - agg.test_error_se).abs() < 1e-10);
    }
    let rank_total: f64 = run.report.aggregates.iter().map(|a| a.rank_ll_mean).sum();
    assert!((rank_total - 3.0).abs() < 1e-12);
}

#[test]
fn large_k_prediction_is_stable_across_seeds() {
    let cfg = RunConfig::parse(
        &SMOKE
            .replace("epochs = 1", "epochs = 30")
            .replace("n_splits = 1", "n_splits = 5")
            .replace("alphas = [0.5, \"vb\"]", "alphas = [0.5]\nmetrics_k = 10000"),
    )
    .unwrap();
    let run = cmd_train(&cfg).unwrap();
    let data = cfg.load_dataset().unwrap();
    let model = cfg.build_model(&data).unwrap();
    let prior = FactorizedGaussian::isotropic(model.theta_dim(), 0.0, cfg.model.prior_var).unwrap();
    let redrawn: Vec<f64> = run
        .posteriors
        .iter()
        .map(|(s, _, post)| {
            let seed = run.report.splits[*s].seed;
            let (tr, te) = split_indices(data.n_rows(), cfg.protocol.train_fraction, seed);
            let stats = standardization(&data.subset(&tr), true, true);
            let test = data.subset(&te).apply_standardization(&stats);
            let params = Params::new(post.q.clone(), prior.clone(), post.log_noise).unwrap();
            evaluate(&model, &params, &test, 10_000, seed + 12345).test_ll
        })
        .collect();
    let agg = &run.report.aggregates[0];
    let (m, _) = mean_se(&redrawn);
    assert!((m - agg.test_ll_mean).abs() <= 3.0 * agg.test_ll_se, "{m} vs {} ± {}", agg.test_ll_mean, agg.test_ll_se);
}

#[test]
fn separable_probit_reaches_zero_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("a,b,label\n");
    for i in 0..60 {
        let t = (i as f64 + 0.5) / 60.0 * 4.0 - 2.0;
        let label = if t > 0.0 { 1 } else { 0 };
        text.push_str(&format!("{},{},{label}\n", t + t.signum(), 0.3 * (i as f64).sin()));
    }
    write(&dir.path().join("sep.csv"), &text);
    let cfg_path = dir.path().join("sep.toml");
    write(
        &cfg_path,
        r#"
name = "separable"
[dataset]
kind = "csv"
path = "sep.csv"
target = "label"
task = "probit"
[model]
kind = "probit"
[train]
k_samples = 10
batch_size = 16
epochs = 50
optimizer = { kind = "adam", lr = 0.02 }
[protocol]
n_splits = 2
train_fraction = 0.8
alphas = [0.5]
"#,
    );
    let run = cmd_train(&RunConfig::load(&cfg_path).unwrap()).unwrap();
    for r in &run.report.splits {
        assert_eq!(r.test_error, 0.0);
        assert!(r.test_ll > -0.2, "{r:?}");
    }
}

#[test]
fn analytic_table_has_expected_shape() {
    let rows = cmd_analytic(&default_analytic_grid(), 1, 1.0).unwrap();
    assert!(rows.windows(2).all(|w| w[1].q_variance > w[0].q_variance));
    assert!((rows[0].q_variance - 0.5).abs() / 0.5 < 0.01);
    let one = rows.iter().find(|r| r.alpha == 1.0).unwrap();
    assert!((one.q_variance - 1.0 / 3f64.sqrt()).abs() < 1e-12);
    assert!(rows.iter().all(|r| (r.true_variance - 0.5).abs() < 1e-12 && r.kl_to_truth >= 0.0));
    let rows2 = cmd_analytic(&[1e-6, 1.0], 2, 1.0).unwrap();
    assert!((rows2[0].lambda - 1.0).abs() < 1e-5);
}

#[test]
fn bias_command_reports_every_cell() {
    let cfg = RunConfig::parse(
        r#"
name = "bias-smoke"
[dataset]
kind = "synthetic_linreg"
n = 100
d = 3
sigma2 = 0.5
seed = 1
[model]
kind = "linreg"
noise_var = 0.5
[train]
k_samples = 10
epochs = 20
optimizer = { kind = "adam", lr = 0.01 }
[bias]
n_minibatches = 4
n_repeats = 40
k_truth = 500
"#,
    )
    .unwrap();
    let run = cmd_bias(&cfg).unwrap();
    assert!(run.summary_line().starts_with("monotone-in-K: "));
    assert_eq!(run.report.cells.len(), 4 * 3);
    for c in run.report.cells.iter().filter(|c| c.alpha.is_none()) {
        assert_eq!(c.bias_net, 0.0);
    }
    let mut buf = Vec::new();
    run.report.write_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 13);
}

#[test]
fn toy_predictive_is_deterministic_and_fits() {
    let cfg = ToyConfig::default();
    let a = cmd_toy_predictive(&cfg).unwrap();
    let b = cmd_toy_predictive(&cfg).unwrap();
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.rows.len(), 3 * cfg.grid_points);
    for s in &a.summaries {
        assert!(s.train_rmse_vs_cubic < 3.0, "{s:?}");
    }
    assert!(a.summaries.windows(2).all(|w| w[0].mean_std < w[1].mean_std));
    let mut buf = Vec::new();
    write_rows(&mut buf, &a.rows).unwrap();
    assert_eq!(read_rows::<_, ToyRow>(buf.as_slice()).unwrap(), a.rows);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    write(&bad, "name = \"x\"\n[dataset]\nkind = \"nonsense\"\n");
    assert_eq!(bin().args(["train", bad.to_str().unwrap()]).output().unwrap().status.code(), Some(2));
    let missing = dir.path().join("missing.toml");
    assert_eq!(bin().args(["train", missing.to_str().unwrap()]).output().unwrap().status.code(), Some(4));
    let csv_missing = dir.path().join("csv.toml");
    write(&csv_missing, "name = \"x\"\n[dataset]\nkind = \"csv\"\npath = \"nope.csv\"\ntarget = \"y\"\ntask = \"regression\"\n[model]\nkind = \"linreg\"\n");
    assert_eq!(bin().args(["train", csv_missing.to_str().unwrap()]).output().unwrap().status.code(), Some(4));
    assert_eq!(bin().args(["analytic", "--alphas", "2.5"]).output().unwrap().status.code().map(|c| c != 0), Some(true));
    assert_eq!(bin().arg("bogus").output().unwrap().status.code(), Some(2));
}

#[test]
fn small_commands_write_csv() {
    let out = bin().args(["gen-toy", "--seed", "1", "--n", "5"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().next(), Some("x1,y"));
    assert_eq!(text.lines().count(), 6);
    let out = bin()
        .args(["divergence", "--p-mean", "0", "--p-var", "1", "--q-mean", "0", "--q-var", "1", "--alphas", "-1,0.5,1"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let rows: Vec<DivergenceRow> = read_rows(out.stdout.as_slice()).unwrap();
    assert!(rows.iter().all(|r| r.divergence.abs() < 1e-12));
    let toy = cmd_gen_toy(1, 5);
    let mut buf = Vec::new();
    write_dataset_csv(&mut buf, &toy).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), text);
}

#[test]
fn breast_cancer_probit_beats_chance() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/breast_cancer.csv");
    let cfg = RunConfig::parse(&format!(
        r#"
name = "breast-cancer"
[dataset]
kind = "csv"
path = {path:?}
target = "target"
task = "probit"
[model]
kind = "probit"
[train]
k_samples = 20
epochs = 20
optimizer = {{ kind = "adam", lr = 0.01 }}
[protocol]
n_splits = 2
alphas = [1e-6, 0.5, 1.0]
"#
    ))
    .unwrap();
    let run = cmd_train(&cfg).unwrap();
    for a in &run.report.aggregates {
        assert!(a.test_error_mean < 0.1, "{a:?}");
        assert!(a.test_ll_mean > -0.3, "{a:?}");
    }
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        if path.file_name().unwrap() == "toy.toml" {
            toml::from_str::<ToyConfig>(&text).unwrap();
        } else {
            RunConfig::parse(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        }
        seen += 1;
    }
    assert!(seen >= 4);
}
