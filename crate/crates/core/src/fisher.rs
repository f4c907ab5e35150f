//! Diagonal of the empirical Fisher information.
//!
//! `F_i(w) = (1/|D|) Σ_j (∂ log p(y_j | x_j; w) / ∂w_i)²`, using the gold
//! labels. Per-example gradients may be computed in parallel; the reduction
//! sorts each coordinate's terms and sums them pairwise, so the scores do not
//! depend on thread count or on the order of the examples.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;
use crate::model::{log_likelihood_grad, Dataset, Model};
use crate::numeric::pairwise_sum;
use crate::params::ParamVector;

#[derive(Clone, Debug, PartialEq)]
pub struct FisherDiag {
    scores: Vec<f64>,
    at_params_hash: String,
    dataset_size: usize,
    sample_cap: Option<usize>,
}

impl FisherDiag {
    /// Wraps externally supplied scores (non-negative, finite).
    pub fn from_scores(scores: Vec<f64>) -> Result<Self> {
        validate_scores(&scores)?;
        Ok(Self {
            scores,
            at_params_hash: String::new(),
            dataset_size: 0,
            sample_cap: None,
        })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn at_params_hash(&self) -> &str {
        &self.at_params_hash
    }

    /// Number of examples the scores were averaged over.
    pub fn dataset_size(&self) -> usize {
        self.dataset_size
    }

    pub fn sample_cap(&self) -> Option<usize> {
        self.sample_cap
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_json(
            path,
            &FisherFile {
                format_version: FISHER_FILE_VERSION,
                at_params_hash: self.at_params_hash.clone(),
                dataset_size: self.dataset_size,
                sample_cap: self.sample_cap,
                scores: self.scores.clone(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f: FisherFile = fsio::read_json(path)?;
        if f.format_version != FISHER_FILE_VERSION {
            return Err(Error::FormatVersion {
                expected: FISHER_FILE_VERSION,
                found: f.format_version,
            });
        }
        validate_scores(&f.scores)?;
        Ok(Self {
            scores: f.scores,
            at_params_hash: f.at_params_hash,
            dataset_size: f.dataset_size,
            sample_cap: f.sample_cap,
        })
    }
}

fn validate_scores(scores: &[f64]) -> Result<()> {
    if let Some(i) = scores.iter().position(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::invalid(format!(
            "Fisher score {i} is {} (must be finite and >= 0)",
            scores[i]
        )));
    }
    Ok(())
}

pub const FISHER_FILE_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FisherFile {
    pub format_version: u32,
    pub at_params_hash: String,
    pub dataset_size: usize,
    #[serde(default)]
    pub sample_cap: Option<usize>,
    pub scores: Vec<f64>,
}

/// Full pass over `data`.
pub fn empirical_fisher_diag(
    model: &Model,
    params: &ParamVector,
    data: &Dataset,
) -> Result<FisherDiag> {
    empirical_fisher_diag_capped(model, params, data, None)
}

/// Like [`empirical_fisher_diag`] but uses only the first `cap` examples
/// when a cap is given.
pub fn empirical_fisher_diag_capped(
    model: &Model,
    params: &ParamVector,
    data: &Dataset,
    cap: Option<usize>,
) -> Result<FisherDiag> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cap == Some(0) {
        return Err(Error::invalid("Fisher sample cap must be positive"));
    }
    model.check_params(params)?;
    let n = cap.map_or(data.len(), |c| c.min(data.len()));
    let per_example: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            log_likelihood_grad(model, params, data, j).map_err(|e| match e {
                Error::NumericOverflow(_) => {
                    Error::NumericOverflow(format!("log-likelihood gradient of example {j}"))
                }
                other => other,
            })
        })
        .collect::<Result<_>>()?;

    let scores: Vec<f64> = (0..params.len())
        .into_par_iter()
        .map(|i| {
            let mut terms: Vec<f64> = per_example.iter().map(|g| g[i] * g[i]).collect();
            terms.sort_unstable_by(f64::total_cmp);
            pairwise_sum(&terms) / n as f64
        })
        .collect();
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NumericOverflow(format!("Fisher score {i}")));
    }
    Ok(FisherDiag {
        scores,
        at_params_hash: params.content_hash(),
        dataset_size: n,
        sample_cap: cap,
    })
}
