//! Datasets, CSV ingestion, standardization and synthetic generators.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv error in {path}: {message}")]
    Csv { path: String, message: String },
    #[error("parse error at row {row}, column \"{column}\": cannot read {value:?} as a number")]
    Parse { row: usize, column: String, value: String },
    #[error("missing column \"{0}\"")]
    MissingColumn(String),
    #[error("dataset has no rows")]
    Empty,
    #[error("{targets} targets for {rows} rows")]
    Shape { rows: usize, targets: usize },
    #[error("non-finite value at row {row}")]
    NonFinite { row: usize },
    #[error("target column has {distinct} distinct values; probit labels need at most 2")]
    TooManyLabels { distinct: usize },
    #[error("class label {value} at row {row} is not a non-negative integer")]
    BadClassLabel { row: usize, value: f64 },
}

/// Kind of supervised task a target column encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Probit,
    Regression,
    Classification,
}

/// Which column is the target and how to read it. Every other column is a
/// feature unless `features` lists them explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub target: String,
    pub task: Task,
    #[serde(default)]
    pub features: Option<Vec<String>>,
}

impl CsvSchema {
    pub fn new(target: impl Into<String>, task: Task) -> Self {
        Self { target: target.into(), task, features: None }
    }
}

/// Provenance and standardization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub feature_names: Vec<String>,
    pub target_name: String,
    /// Column means subtracted from the features (zeros when raw).
    pub feature_means: Vec<f64>,
    /// Column scales the features were divided by (ones when raw).
    pub feature_stds: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
    pub features_standardized: bool,
    pub targets_standardized: bool,
}

impl DatasetMeta {
    fn raw(name: &str, n_features: usize) -> Self {
        Self {
            name: name.to_string(),
            feature_names: (1..=n_features).map(|i| format!("x{i}")).collect(),
            target_name: "y".into(),
            feature_means: vec![0.0; n_features],
            feature_stds: vec![1.0; n_features],
            target_mean: 0.0,
            target_std: 1.0,
            features_standardized: false,
            targets_standardized: false,
        }
    }
}

/// Row-major feature matrix with one target per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset<T> {
    features: Vec<T>,
    n_features: usize,
    targets: Vec<T>,
    task: Task,
    meta: DatasetMeta,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        features: Vec<T>,
        n_features: usize,
        targets: Vec<T>,
        task: Task,
        name: &str,
    ) -> Result<Self, DataError> {
        if targets.is_empty() {
            return Err(DataError::Empty);
        }
        if features.len() != targets.len() * n_features {
            return Err(DataError::Shape { rows: features.len() / n_features.max(1), targets: targets.len() });
        }
        for (i, y) in targets.iter().enumerate() {
            let row = &features[i * n_features..(i + 1) * n_features];
            if !y.is_finite() || row.iter().any(|v| !v.is_finite()) {
                return Err(DataError::NonFinite { row: i + 1 });
            }
        }
        Ok(Self { features, n_features, targets, task, meta: DatasetMeta::raw(name, n_features) })
    }

    pub fn n_rows(&self) -> usize {
        self.targets.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn target(&self, i: usize) -> T {
        self.targets[i]
    }

    pub fn features(&self) -> &[T] {
        &self.features
    }

    pub fn targets(&self) -> &[T] {
        &self.targets
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut DatasetMeta {
        &mut self.meta
    }

    /// Rows at `indices`, in that order, with the same metadata.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Self {
            features,
            n_features: self.n_features,
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
            task: self.task,
            meta: self.meta.clone(),
        }
    }

    /// Standardize features (and regression targets when requested) using
    /// statistics of this dataset, recording them in the metadata.
    pub fn standardize(&mut self, targets: bool) {
        let n = self.n_rows() as f64;
        let d = self.n_features;
        let mut means = vec![0.0; d];
        let mut stds = vec![0.0; d];
        for i in 0..self.n_rows() {
            for (j, v) in self.row(i).iter().enumerate() {
                means[j] += v.as_f64() / n;
            }
        }
        for i in 0..self.n_rows() {
            for (j, v) in self.row(i).iter().enumerate() {
                stds[j] += (v.as_f64() - means[j]).powi(2) / n;
            }
        }
        let stds: Vec<f64> = stds.iter().map(|v| if *v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        self.meta.feature_means = means;
        self.meta.feature_stds = stds;
        self.meta.features_standardized = true;
        if targets && self.task == Task::Regression {
            let m = self.targets.iter().map(|v| v.as_f64()).sum::<f64>() / n;
            let s = (self.targets.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>() / n).sqrt();
            self.meta.target_mean = m;
            self.meta.target_std = if s > 0.0 { s } else { 1.0 };
            self.meta.targets_standardized = true;
        }
        let raw = self.clone();
        *self = raw.with_statistics_of(&self.meta.clone(), true);
    }

    /// Apply another dataset's recorded statistics to this one's raw values.
    /// `self` must hold raw (unstandardized) values.
    pub fn apply_standardization(&self, stats: &DatasetMeta) -> Self {
        self.with_statistics_of(stats, false)
    }

    fn with_statistics_of(&self, stats: &DatasetMeta, keep_names: bool) -> Self {
        let d = self.n_features;
        let mut features = self.features.clone();
        if stats.features_standardized {
            for (k, v) in features.iter_mut().enumerate() {
                let j = k % d;
                *v = T::lit((v.as_f64() - stats.feature_means[j]) / stats.feature_stds[j]);
            }
        }
        let mut targets = self.targets.clone();
        if stats.targets_standardized {
            for v in &mut targets {
                *v = T::lit((v.as_f64() - stats.target_mean) / stats.target_std);
            }
        }
        let mut meta = stats.clone();
        if !keep_names {
            meta.name = self.meta.name.clone();
        }
        Self { features, n_features: d, targets, task: self.task, meta }
    }

    /// Map a standardized regression prediction back to the original units.
    pub fn destandardize_target(&self, y: T) -> T {
        if self.meta.targets_standardized {
            T::lit(y.as_f64() * self.meta.target_std + self.meta.target_mean)
        } else {
            y
        }
    }

    /// Log-density correction `−ln std_y` turning a standardized-scale
    /// log-likelihood into one in original units.
    pub fn target_log_jacobian(&self) -> T {
        if self.meta.targets_standardized {
            T::lit(-self.meta.target_std.ln())
        } else {
            T::zero()
        }
    }
}

/// Read a CSV file without standardizing. Probit labels are mapped to
/// `{−1, +1}` (the smaller of two distinct values becomes `−1`).
pub fn read_csv<T: Scalar>(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset<T>, DataError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let csv_err = |e: csv::Error| DataError::Csv { path: shown.clone(), message: e.to_string() };
    let file = std::fs::File::open(path).map_err(|source| DataError::Io { path: shown.clone(), source })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let headers: Vec<String> = reader.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let find = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| DataError::MissingColumn(name.into()));
    let target_col = find(&schema.target)?;
    let feature_cols: Vec<usize> = match &schema.features {
        Some(names) => names.iter().map(|n| find(n)).collect::<Result<_, _>>()?,
        None => (0..headers.len()).filter(|&c| c != target_col).collect(),
    };
    let mut features = Vec::new();
    let mut targets = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let row = r + 1;
        let cell = |c: usize| -> Result<f64, DataError> {
            let raw = record.get(c).unwrap_or("");
            raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| DataError::Parse {
                row,
                column: headers[c].clone(),
                value: raw.to_string(),
            })
        };
        for &c in &feature_cols {
            features.push(T::lit(cell(c)?));
        }
        targets.push(cell(target_col)?);
    }
    if targets.is_empty() {
        return Err(DataError::Empty);
    }
    let targets = map_targets(targets, schema.task)?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut ds = Dataset::new(features, feature_cols.len(), targets, schema.task, &name)?;
    ds.meta.feature_names = feature_cols.iter().map(|&c| headers[c].clone()).collect();
    ds.meta.target_name = schema.target.clone();
    Ok(ds)
}

fn map_targets<T: Scalar>(raw: Vec<f64>, task: Task) -> Result<Vec<T>, DataError> {
    match task {
        Task::Regression => Ok(raw.into_iter().map(T::lit).collect()),
        Task::Classification => raw
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(T::lit(v))
                } else {
                    Err(DataError::BadClassLabel { row: i + 1, value: v })
                }
            })
            .collect(),
        Task::Probit => {
            let mut distinct = raw.clone();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            let positive = match distinct.as_slice() {
                [only] => {
                    if *only > 0.0 {
                        *only
                    } else {
                        f64::INFINITY
                    }
                }
                [_, hi] => *hi,
                _ => return Err(DataError::TooManyLabels { distinct: distinct.len() }),
            };
            Ok(raw.into_iter().map(|v| if v == positive { T::one() } else { -T::one() }).collect())
        }
    }
}

/// Read a CSV file and standardize its features (and regression targets)
/// on all of its rows.
pub fn load_csv<T: Scalar>(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset<T>, DataError> {
    let mut ds = read_csv(path, schema)?;
    ds.standardize(true);
    Ok(ds)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// The 20-point cubic toy problem: `x ~ U[−4, 4]`, `y = x³ + ε`,
/// `ε ~ N(0, 9)`.
pub fn gen_toy_cubic<T: Scalar>(seed: u64) -> Dataset<T> {
    gen_toy_cubic_n(seed, 20)
}

/// [`gen_toy_cubic`] with a configurable row count.
pub fn gen_toy_cubic_n<T: Scalar>(seed: u64, n: usize) -> Dataset<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = rng.random_range(-4.0..=4.0);
        let y = x * x * x + 3.0 * normal(&mut rng);
        xs.push(T::lit(x));
        ys.push(T::lit(y));
    }
    Dataset::new(xs, 1, ys, Task::Regression, "toy_cubic").expect("generator output is well formed")
}

/// Probit data with standard-normal features and weights; labels are drawn
/// with `P(y = +1) = Φ(wᵀx)`. Returns the data and the true weights.
pub fn synthetic_probit<T: Scalar>(seed: u64, n: usize, d: usize) -> (Dataset<T>, Vec<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
    let mut xs = Vec::with_capacity(n * d);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
        let y = if z + normal(&mut rng) > 0.0 { 1.0 } else { -1.0 };
        xs.extend(x.into_iter().map(T::lit));
        ys.push(T::lit(y));
    }
    let ds = Dataset::new(xs, d, ys, Task::Probit, "synthetic_probit").expect("generator output is well formed");
    (ds, w.into_iter().map(T::lit).collect())
}

/// Conjugate linear-regression data: `θ ~ N(0, I)`, `x ~ N(0, I)`,
/// `y = θᵀx + N(0, σ²)`. Returns the data and the true weights.
pub fn synthetic_linreg<T: Scalar>(seed: u64, n: usize, d: usize, sigma2: f64) -> (Dataset<T>, Vec<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
    let mut xs = Vec::with_capacity(n * d);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        let y = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + sigma2.sqrt() * normal(&mut rng);
        xs.extend(x.into_iter().map(T::lit));
        ys.push(T::lit(y));
    }
    let ds = Dataset::new(xs, d, ys, Task::Regression, "synthetic_linreg").expect("generator output is well formed");
    (ds, w.into_iter().map(T::lit).collect())
}

/// Gaussian clusters: class centres `~ N(0, 4I)`, points `centre + N(0, I)`,
/// labels uniform over classes.
pub fn synthetic_classification<T: Scalar>(seed: u64, n: usize, d: usize, n_classes: usize) -> Dataset<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<Vec<f64>> = (0..n_classes).map(|_| (0..d).map(|_| 2.0 * normal(&mut rng)).collect()).collect();
    let mut xs = Vec::with_capacity(n * d);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.random_range(0..n_classes);
        xs.extend(centres[c].iter().map(|m| T::lit(m + normal(&mut rng))));
        ys.push(T::lit(c as f64));
    }
    Dataset::new(xs, d, ys, Task::Classification, "synthetic_classes").expect("generator output is well formed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn toy_cubic_shape_and_range() {
        let ds: Dataset<f64> = gen_toy_cubic(3);
        assert_eq!(ds.n_rows(), 20);
        assert!(ds.features().iter().all(|x| x.abs() <= 4.0));
        let again: Dataset<f64> = gen_toy_cubic(3);
        assert_eq!(ds, again);
        let other: Dataset<f64> = gen_toy_cubic(4);
        assert_ne!(ds, other);
    }

    #[test]
    fn toy_cubic_noise_variance() {
        let ds: Dataset<f64> = gen_toy_cubic_n(99, 100_000);
        let r: Vec<f64> = (0..ds.n_rows()).map(|i| ds.target(i) - ds.row(i)[0].powi(3)).collect();
        let m = r.iter().sum::<f64>() / r.len() as f64;
        let v = r.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (r.len() - 1) as f64;
        assert!((v - 9.0).abs() < 0.3, "{v}");
    }

    #[test]
    fn csv_fixture_standardized() {
        let f = write_tmp("x1,x2,y\n1,10,0.5\n2,20,1.5\n3,60,2.5\n");
        let ds: Dataset<f64> = load_csv(f.path(), &CsvSchema::new("y", Task::Regression)).unwrap();
        assert_eq!((ds.n_rows(), ds.n_features()), (3, 2));
        assert_eq!(ds.meta().feature_means, vec![2.0, 30.0]);
        assert!(ds.meta().feature_stds.iter().all(|s| *s > 0.0));
        for j in 0..2 {
            let m: f64 = (0..3).map(|i| ds.row(i)[j]).sum::<f64>() / 3.0;
            assert!(m.abs() <= 1e-10);
        }
        assert_eq!(ds.meta().feature_names, vec!["x1", "x2"]);
    }

    #[test]
    fn csv_parse_error_names_cell() {
        let f = write_tmp("x1,x2,x3,y\n1,2,3,1\n4,5,abc,0\n");
        let err = read_csv::<f64>(f.path(), &CsvSchema::new("y", Task::Probit)).unwrap_err();
        match err {
            DataError::Parse { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "x3");
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = read_csv::<f64>(f.path(), &CsvSchema::new("label", Task::Probit)).unwrap_err();
        assert!(matches!(err, DataError::MissingColumn(c) if c == "label"));
    }

    #[test]
    fn probit_labels_mapped_to_signs() {
        let f = write_tmp("a,cls\n0.1,0\n0.2,1\n0.3,1\n");
        let ds = read_csv::<f64>(f.path(), &CsvSchema::new("cls", Task::Probit)).unwrap();
        assert_eq!(ds.targets(), &[-1.0, 1.0, 1.0]);
        let f = write_tmp("a,cls\n0.1,2\n0.2,4\n");
        let ds = read_csv::<f64>(f.path(), &CsvSchema::new("cls", Task::Probit)).unwrap();
        assert_eq!(ds.targets(), &[-1.0, 1.0]);
    }

    #[test]
    fn standardization_round_trips_targets() {
        let (raw, _) = synthetic_linreg::<f64>(1, 50, 3, 0.5);
        let mut train = raw.subset(&(0..40).collect::<Vec<_>>());
        train.standardize(true);
        let test = raw.subset(&(40..50).collect::<Vec<_>>()).apply_standardization(train.meta());
        for i in 0..10 {
            let back = test.destandardize_target(test.target(i));
            assert!((back - raw.target(40 + i)).abs() <= 1e-12);
        }
        assert_eq!(test.target_log_jacobian(), -train.meta().target_std.ln());
    }
}
