use std::fmt;
use std::path::{Path, PathBuf};

use childgrad::fsio::{read_json, write_atomic, write_json};
use childgrad::harness::report::{matrix_csv, mean_max_table, rows_to_csv, runs_csv};
use childgrad::harness::{
    aggregate, derive_seed, from_toml_with_overrides, method_mask, overlap_matrix, prepare_run,
    replicate, run_fisher, summarize, Pretrained, RunConfig, RunReport,
};
use childgrad::theory::{model_sharpness, variance_table, BoundGrid, VarianceGrid};
use childgrad::{Checkpoint, Error, FisherDiag, GradMask};
use serde::{Deserialize, Serialize};

use crate::Common;

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    /// Some seeds of a replicated run failed; outputs for the rest exist.
    Partial {
        failed: usize,
        total: usize,
        numeric: bool,
    },
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => e.fmt(f),
            CliError::Partial { failed, total, .. } => {
                write!(f, "{failed} of {total} seeds failed; see aggregate.json")
            }
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult = Result<(), CliError>;

pub fn exit_code(e: &CliError) -> u8 {
    match e {
        CliError::Partial { numeric: true, .. } => 3,
        CliError::Partial { .. } => 1,
        CliError::Core(e) if e.is_numeric() => 3,
        CliError::Core(
            Error::Config(_)
            | Error::UnknownGenerator(_)
            | Error::UnknownParameter(_)
            | Error::InvalidArgument(_)
            | Error::Domain(_)
            | Error::MalformedCsv { .. }
            | Error::FormatVersion { .. }
            | Error::LabelOutOfRange { .. }
            | Error::LengthMismatch { .. }
            | Error::ShapeMismatch { .. }
            | Error::EmptyDataset,
        ) => 2,
        CliError::Core(_) => 1,
    }
}

fn prepare_out(out: &Path, overwrite: bool) -> Result<(), Error> {
    if out.is_dir() && std::fs::read_dir(out)?.next().is_some() && !overwrite {
        return Err(Error::Config(format!(
            "output directory {} is not empty (pass --overwrite to replace its files)",
            out.display()
        )));
    }
    std::fs::create_dir_all(out)?;
    Ok(())
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Io(io) => Error::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io}", path.display()),
        )),
        other => other,
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let path = common
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    RunConfig::load(path, &common.overrides)
}

fn seeds(common: &Common) -> Result<Vec<u64>, Error> {
    let mut s = common.seed.clone();
    s.sort_unstable();
    s.dedup();
    if s.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    Ok(s)
}

fn with_seed(cfg: &RunConfig, seed: u64) -> RunConfig {
    RunConfig {
        seed,
        ..cfg.clone()
    }
}

pub fn train(common: &Common) -> CliResult {
    let cfg = load_config(common)?;
    let seeds = seeds(common)?;
    prepare_out(&common.out, common.overwrite)?;
    let out = &common.out;
    write_json(&out.join("config.json"), &cfg)?;
    let mut results = Vec::with_capacity(seeds.len());
    for (seed, run) in replicate(&cfg, &seeds, common.jobs)? {
        let run = match run {
            Ok(a) => a,
            Err(e) => {
                eprintln!("seed {seed}: {e}");
                results.push((seed, Err(e)));
                continue;
            }
        };
        let mask_file = format!("mask_{seed}.json");
        run.mask.save(&out.join(&mask_file), &run.head)?;
        Checkpoint::new(cfg.model.clone(), run.final_params, Some(run.state))
            .save(&out.join(format!("checkpoint_{seed}.json")))?;
        eprintln!("seed {seed}: {:.2}s", run.report.wall_seconds);
        let mut report = run.report.canonical();
        report.method.mask.positive_index_file = Some(mask_file);
        write_json(&out.join(format!("run_{seed}.json")), &report)?;
        results.push((seed, Ok(report)));
    }
    let agg = aggregate(&cfg, results)?;
    write_json(&out.join("aggregate.json"), &agg)?;
    write_atomic(&out.join("runs.csv"), runs_csv(&agg.reports)?.as_bytes())?;
    let mut summary = if agg.reports.is_empty() {
        String::new()
    } else {
        mean_max_table(&[(agg.label.clone(), agg.metrics.clone())])
    };
    for f in &agg.failures {
        summary.push_str(&format!("failed seed {}: {}\n", f.seed, f.error));
    }
    write_atomic(&out.join("summary.txt"), summary.as_bytes())?;
    print!("{summary}");
    if agg.partial {
        return Err(CliError::Partial {
            failed: agg.failures.len(),
            total: seeds.len(),
            numeric: agg.failures.iter().any(|f| f.numeric),
        });
    }
    Ok(())
}

pub fn fisher(common: &Common) -> CliResult {
    let cfg = load_config(common)?;
    let seeds = seeds(common)?;
    prepare_out(&common.out, common.overwrite)?;
    for seed in seeds {
        let cfg = with_seed(&cfg, seed);
        let setup = prepare_run(&cfg)?;
        let path = common.out.join(format!("fisher_{seed}.json"));
        run_fisher(&cfg, &setup)?.save(&path)?;
        println!("{}", path.display());
    }
    Ok(())
}

pub fn mask(common: &Common, fisher: Option<&Path>) -> CliResult {
    let cfg = load_config(common)?;
    let seeds = seeds(common)?;
    let saved = fisher
        .map(|p| FisherDiag::load(p).map_err(|e| with_path(p, e)))
        .transpose()?;
    prepare_out(&common.out, common.overwrite)?;
    for seed in seeds {
        let cfg = with_seed(&cfg, seed);
        let setup = prepare_run(&cfg)?;
        let fisher = match (&saved, cfg.method.needs_fisher()) {
            (_, false) => None,
            (Some(f), true) => {
                if f.at_params_hash() != setup.w0.content_hash() {
                    return Err(Error::Config(format!(
                        "Fisher file was computed at different weights than seed {seed}'s w0"
                    ))
                    .into());
                }
                Some(f.clone())
            }
            (None, true) => Some(run_fisher(&cfg, &setup)?),
        };
        let m = method_mask(&cfg, &setup, fisher.as_ref())?;
        let path = common.out.join(format!("mask_{seed}.json"));
        m.save(&path, &setup.head)?;
        println!(
            "{}: {} of {} positive",
            path.display(),
            m.positive_count(),
            m.len()
        );
    }
    Ok(())
}

pub fn overlap(masks: &[PathBuf], out: &Path, overwrite: bool) -> CliResult {
    let loaded = masks
        .iter()
        .map(|p| GradMask::load(p).map_err(|e| with_path(p, e)))
        .collect::<Result<Vec<_>, _>>()?;
    let names: Vec<String> = masks.iter().map(|p| p.display().to_string()).collect();
    let csv = matrix_csv(&names, &overlap_matrix(&loaded)?)?;
    prepare_out(out, overwrite)?;
    write_atomic(&out.join("overlap.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TheoryConfig {
    variance: VarianceGrid,
    bound: BoundGrid,
}

pub fn theory(common: &Common) -> CliResult {
    let text = match &common.config {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
        None => String::new(),
    };
    let cfg: TheoryConfig = from_toml_with_overrides(&text, &common.overrides)?;
    let seed = seeds(common)?[0];
    prepare_out(&common.out, common.overwrite)?;
    let variance = variance_table(&cfg.variance, derive_seed(seed, "theory-variance"))?;
    write_atomic(
        &common.out.join("theory_variance.csv"),
        rows_to_csv(&variance)?.as_bytes(),
    )?;
    let bound = cfg.bound.table(derive_seed(seed, "theory-bound"))?;
    write_atomic(
        &common.out.join("theory_bound.csv"),
        rows_to_csv(&bound)?.as_bytes(),
    )?;
    let worst = variance
        .iter()
        .map(|r| r.max_relative_error)
        .fold(0.0, f64::max);
    println!(
        "{} variance cells, worst relative error {worst:.4}; {} bound rows",
        variance.len(),
        bound.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct SharpnessRecord<'a> {
    checkpoint: &'a Path,
    seed: u64,
    iters: usize,
    sharpness: f64,
}

pub fn sharpness(common: &Common, checkpoint: &Path, iters: usize) -> CliResult {
    let mut cfg = load_config(common)?;
    cfg.seed = seeds(common)?[0];
    cfg.pretrained = Pretrained::Checkpoint {
        path: checkpoint.to_path_buf(),
    };
    let setup = prepare_run(&cfg)?;
    let rho = model_sharpness(
        &setup.model,
        &setup.w0,
        &setup.splits.train,
        iters,
        derive_seed(cfg.seed, "sharpness"),
    )?;
    prepare_out(&common.out, common.overwrite)?;
    write_json(
        &common.out.join("sharpness.json"),
        &SharpnessRecord {
            checkpoint,
            seed: cfg.seed,
            iters,
            sharpness: rho,
        },
    )?;
    println!("{rho}");
    Ok(())
}

fn report_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>, Error> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<Result<_, _>>()?;
            found.retain(|f| {
                f.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("run_") && n.ends_with(".json"))
            });
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(Error::Config("no run report files found".into()));
    }
    Ok(files)
}

pub fn report(runs: &[PathBuf], out: Option<&Path>, overwrite: bool) -> CliResult {
    let mut groups: Vec<(String, Vec<RunReport>)> = Vec::new();
    let mut all = Vec::new();
    for f in report_files(runs)? {
        let r: RunReport = read_json(&f).map_err(|e| with_path(&f, e))?;
        let label = r.method.spec.label();
        match groups.iter_mut().find(|(l, _)| *l == label) {
            Some((_, g)) => g.push(r.clone()),
            None => groups.push((label, vec![r.clone()])),
        }
        all.push(r);
    }
    let rows = groups
        .iter()
        .map(|(l, g)| Ok((l.clone(), summarize(g)?)))
        .collect::<Result<Vec<_>, Error>>()?;
    let table = mean_max_table(&rows);
    print!("{table}");
    if let Some(out) = out {
        prepare_out(out, overwrite)?;
        write_atomic(&out.join("report.txt"), table.as_bytes())?;
        write_atomic(&out.join("report.csv"), runs_csv(&all)?.as_bytes())?;
    }
    Ok(())
}
