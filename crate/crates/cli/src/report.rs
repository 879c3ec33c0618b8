//! Run reports and per-split metric tables.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const RANK_CONVENTION: &str =
    "per split, methods ranked 1 = best (highest test LL, lowest test error); tied methods share the average of their ranks";

/// One trained method on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: usize,
    pub method: String,
    /// Training seed; the split permutation and prediction draws derive from it.
    pub seed: u64,
    pub test_ll: f64,
    pub test_error: f64,
    pub final_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub split: usize,
    pub method: String,
    pub epochs: usize,
    pub first_energy: f64,
    pub final_energy: f64,
    pub final_grad_norm: f64,
    pub wall_time_secs: f64,
}

/// Mean and standard error (sample std / √n) over splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub n_splits: usize,
    pub test_ll_mean: f64,
    pub test_ll_se: f64,
    pub test_error_mean: f64,
    pub test_error_se: f64,
    pub rank_ll_mean: f64,
    pub rank_error_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub config: RunConfig,
    pub methods: Vec<String>,
    pub splits: Vec<SplitMetrics>,
    pub aggregates: Vec<Aggregate>,
    pub traces: Vec<TraceSummary>,
    pub rank_convention: String,
    pub wall_time_secs: f64,
}

/// Sample mean and standard error; the error is 0 for a single value.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Ranks with 1 = smallest `key`; ties receive the average of their ranks.
pub fn average_ranks(key: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..key.len()).collect();
    order.sort_by(|&a, &b| key[a].total_cmp(&key[b]));
    let mut ranks = vec![0.0; key.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && key[order[j + 1]] == key[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Aggregates in the order of `methods`.
pub fn aggregate(methods: &[String], splits: &[SplitMetrics]) -> Vec<Aggregate> {
    let n_splits = splits.iter().map(|s| s.split + 1).max().unwrap_or(0);
    let mut rank_ll = vec![Vec::new(); methods.len()];
    let mut rank_err = vec![Vec::new(); methods.len()];
    for s in 0..n_splits {
        let rows: Vec<&SplitMetrics> =
            methods.iter().filter_map(|m| splits.iter().find(|r| r.split == s && &r.method == m)).collect();
        if rows.len() != methods.len() {
            continue;
        }
        let ll: Vec<f64> = rows.iter().map(|r| -r.test_ll).collect();
        let err: Vec<f64> = rows.iter().map(|r| r.test_error).collect();
        for (i, (a, b)) in average_ranks(&ll).into_iter().zip(average_ranks(&err)).enumerate() {
            rank_ll[i].push(a);
            rank_err[i].push(b);
        }
    }
    methods
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let rows: Vec<&SplitMetrics> = splits.iter().filter(|r| &r.method == m).collect();
            let (ll, ll_se) = mean_se(&rows.iter().map(|r| r.test_ll).collect::<Vec<_>>());
            let (er, er_se) = mean_se(&rows.iter().map(|r| r.test_error).collect::<Vec<_>>());
            Aggregate {
                method: m.clone(),
                n_splits: rows.len(),
                test_ll_mean: ll,
                test_ll_se: ll_se,
                test_error_mean: er,
                test_error_se: er_se,
                rank_ll_mean: mean_se(&rank_ll[i]).0,
                rank_error_mean: mean_se(&rank_err[i]).0,
            }
        })
        .collect()
}

/// Writes `split,method,seed,test_ll,test_error,final_energy`.
pub fn write_metrics_csv<W: Write>(w: W, rows: &[SplitMetrics]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["split", "method", "seed", "test_ll", "test_error", "final_energy"])?;
    for r in rows {
        out.write_record([
            r.split.to_string(),
            r.method.clone(),
            r.seed.to_string(),
            format!("{:?}", r.test_ll),
            format!("{:?}", r.test_error),
            format!("{:?}", r.final_energy),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(r: R) -> Result<Vec<SplitMetrics>, String> {
    let mut reader = csv::Reader::from_reader(r);
    let headers = reader.headers().map_err(|e| e.to_string())?.clone();
    let expected = ["split", "method", "seed", "test_ll", "test_error", "final_energy"];
    if headers.iter().ne(expected) {
        return Err(format!("unexpected header {headers:?}"));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| e.to_string())?;
        let bad = |c: &str| format!("row {}: bad {c}", i + 1);
        let f = |c: usize| rec[c].parse::<f64>().map_err(|_| bad(expected[c]));
        rows.push(SplitMetrics {
            split: rec[0].parse().map_err(|_| bad("split"))?,
            method: rec[1].to_string(),
            seed: rec[2].parse().map_err(|_| bad("seed"))?,
            test_ll: f(3)?,
            test_error: f(4)?,
            final_energy: f(5)?,
        });
    }
    Ok(rows)
}
