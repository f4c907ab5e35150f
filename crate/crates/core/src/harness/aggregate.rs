//! Seed replication, aggregation and mask overlap.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::train::{train_run_detailed, RunArtifacts, RunReport};
use crate::error::{Error, Result};
use crate::masking::{jaccard, GradMask};
use crate::numeric::mean_max_std;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub max: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub count: usize,
}

impl MetricSummary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("cannot summarize an empty metric list"));
        }
        let (mean, max, std) = mean_max_std(values);
        Ok(Self {
            mean,
            max,
            std,
            count: values.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub seed: u64,
    pub error: String,
    pub numeric: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub label: String,
    pub config_hash: String,
    /// Successful runs, ordered by seed.
    pub reports: Vec<RunReport>,
    pub failures: Vec<RunFailure>,
    pub metrics: BTreeMap<String, MetricSummary>,
    /// Set when at least one seed failed.
    pub partial: bool,
}

/// Summaries of every metric present in all `reports`.
pub fn summarize(reports: &[RunReport]) -> Result<BTreeMap<String, MetricSummary>> {
    let mut out = BTreeMap::new();
    let Some(first) = reports.first() else {
        return Ok(out);
    };
    for key in first.summary_metrics().keys() {
        let values: Vec<f64> = reports
            .iter()
            .filter_map(|r| r.summary_metrics().get(key).copied())
            .collect();
        if values.len() == reports.len() {
            out.insert(key.clone(), MetricSummary::of(&values)?);
        }
    }
    Ok(out)
}

/// Runs `config` once per seed on a pool of `jobs` threads (0 means the
/// rayon default). Results are ordered by seed; duplicates are dropped.
pub fn replicate(
    config: &RunConfig,
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<(u64, Result<RunArtifacts>)>> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    config.validate()?;
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(|| {
        sorted
            .par_iter()
            .map(|&seed| {
                let cfg = RunConfig {
                    seed,
                    ..config.clone()
                };
                (seed, train_run_detailed(&cfg))
            })
            .collect()
    }))
}

/// Splits per-seed outcomes into reports and failures and summarizes the
/// reports.
pub fn aggregate(config: &RunConfig, results: Vec<(u64, Result<RunReport>)>) -> Result<Aggregate> {
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(rep) => reports.push(rep),
            Err(e) => failures.push(RunFailure {
                seed,
                numeric: e.is_numeric(),
                error: e.to_string(),
            }),
        }
    }
    reports.sort_by_key(|r| r.seed);
    failures.sort_by_key(|f| f.seed);
    Ok(Aggregate {
        label: config.method.label(),
        config_hash: config.hash(),
        metrics: summarize(&reports)?,
        partial: !failures.is_empty(),
        reports,
        failures,
    })
}

pub fn replicate_and_aggregate(
    config: &RunConfig,
    seeds: &[u64],
    jobs: usize,
) -> Result<Aggregate> {
    let results = replicate(config, seeds, jobs)?
        .into_iter()
        .map(|(seed, r)| (seed, r.map(|a| a.report)))
        .collect();
    aggregate(config, results)
}

/// Pairwise Jaccard overlap of positive sets.
pub fn overlap_matrix(masks: &[GradMask]) -> Result<Vec<Vec<f64>>> {
    if masks.len() < 2 {
        return Err(Error::invalid("overlap needs at least two masks"));
    }
    let n = masks[0].len();
    if let Some(m) = masks.iter().find(|m| m.len() != n) {
        return Err(Error::LengthMismatch {
            context: "overlap mask",
            expected: n,
            found: m.len(),
        });
    }
    let k = masks.len();
    let mut out = vec![vec![1.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let v = jaccard(&masks[i], &masks[j])?;
            out[i][j] = v;
            out[j][i] = v;
        }
    }
    Ok(out)
}
