//! Desk-scale experiment harness: data, training runs, probes, replication
//! and reports.

pub mod aggregate;
pub mod config;
pub mod data;
pub mod probe;
pub mod report;
pub mod train;

use sha2::{Digest, Sha256};

pub use aggregate::{
    aggregate, overlap_matrix, replicate, replicate_and_aggregate, summarize, Aggregate,
    MetricSummary, RunFailure,
};
pub use config::{
    apply_override, default_source, from_toml_with_overrides, Method, OptimizerKind, Pretrained,
    ProbeConfig, RunConfig, SourceTask,
};
pub use data::{make_dataset, subsample, CsvTask, DataSpec, DomainShift, Generator, Splits};
pub use probe::{linear_probe, linear_probe_on, ProbeResult};
pub use train::{
    method_mask, metric_for, prepare_run, pretrain_source, pretrain_source_cached, run_fisher,
    shuffle_labels, train_run, train_run_detailed, transplant_backbone, MaskSummary, RunArtifacts,
    RunReport, RunSetup,
};

/// Independent sub-seed for one purpose (data, init, batches, masks, ...)
/// of a run seed.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}
