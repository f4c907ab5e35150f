//! Run configuration, read from TOML with dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::{DataSpec, DomainShift};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, OutputKind};
use crate::optim::OptimConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum Method {
    Vanilla {},
    /// Fresh Bernoulli(p) mask every step.
    ChildF {
        p: f64,
    },
    /// Fixed mask of the top-p fraction by Fisher score at w0.
    ChildD {
        p: f64,
    },
    /// Fixed mask of a uniformly random p fraction.
    RandomD {
        p: f64,
    },
    /// Fixed mask of the bottom-p fraction by Fisher score.
    LowestD {
        p: f64,
    },
    /// Fisher mask; non-child coordinates are zeroed at w0 and stay frozen.
    PruneD {
        p: f64,
    },
    /// Only the top `k` layers below the head, plus the head.
    TopkLayers {
        k: usize,
    },
    /// Plain fine-tuning with the penalty `λ‖w - w0‖²`.
    WeightDecayW0 {
        lambda: f64,
    },
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::Vanilla {} => "vanilla".into(),
            Method::ChildF { p } => format!("child_f(p={p})"),
            Method::ChildD { p } => format!("child_d(p={p})"),
            Method::RandomD { p } => format!("random_d(p={p})"),
            Method::LowestD { p } => format!("lowest_d(p={p})"),
            Method::PruneD { p } => format!("prune_d(p={p})"),
            Method::TopkLayers { k } => format!("topk_layers(k={k})"),
            Method::WeightDecayW0 { lambda } => format!("weight_decay_w0(lambda={lambda})"),
        }
    }

    pub fn ratio(&self) -> Option<f64> {
        match self {
            Method::ChildF { p }
            | Method::ChildD { p }
            | Method::RandomD { p }
            | Method::LowestD { p }
            | Method::PruneD { p } => Some(*p),
            _ => None,
        }
    }

    /// Whether the method ranks coordinates by Fisher score.
    pub fn needs_fisher(&self) -> bool {
        matches!(
            self,
            Method::ChildD { .. } | Method::LowestD { .. } | Method::PruneD { .. }
        )
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self.ratio() {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Config(format!(
                    "{}: p must lie in (0, 1]",
                    self.label()
                )));
            }
        }
        if let Method::WeightDecayW0 { lambda } = self {
            if !(*lambda >= 0.0 && lambda.is_finite()) {
                return Err(Error::Config("weight_decay_w0: lambda must be >= 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    /// Plain masked SGD with the same learning-rate schedule.
    Sgd,
}

fn default_batch_size() -> usize {
    32
}

fn default_true() -> bool {
    true
}

/// Vanilla training on a source task that produces w0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceTask {
    pub data: DataSpec,
    /// Output layer of the source model when it differs from the target's.
    /// The backbone is then transplanted and the target head initialized
    /// fresh.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputKind>,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub optim: OptimConfig,
    /// Replace the trained head with a fresh initialization.
    #[serde(default)]
    pub reinit_head: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Pretrained {
    /// Random initialization from the run seed.
    FreshSeed,
    Checkpoint {
        path: PathBuf,
    },
    Source(SourceTask),
}

/// Linear probe on the final representation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub data: DataSpec,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub optim: OptimConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: ModelSpec,
    pub data: DataSpec,
    /// When omitted from a config file: vanilla pretraining on the target
    /// generator under the default domain translation (see
    /// [`default_source`]).
    pub pretrained: Pretrained,
    pub method: Method,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample_n: Option<usize>,
    /// Cap on the examples used for the Fisher estimate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fisher_samples: Option<usize>,
    /// Head coordinates bypass the mask.
    #[serde(default = "default_true")]
    pub exempt_head: bool,
    /// Power-iteration steps for a final sharpness estimate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sharpness_iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeConfig>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.method.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if self.subsample_n == Some(0)
            || self.fisher_samples == Some(0)
            || self.sharpness_iters == Some(0)
        {
            return Err(Error::Config(
                "subsample_n, fisher_samples and sharpness_iters must be positive".into(),
            ));
        }
        if let Pretrained::Source(src) = &self.pretrained {
            src.data.validate()?;
            if src.epochs == 0 || src.batch_size == 0 {
                return Err(Error::Config(
                    "source epochs and batch_size must be positive".into(),
                ));
            }
        }
        if let Some(p) = &self.probe {
            p.data.validate()?;
            if p.epochs == 0 || p.batch_size == 0 {
                return Err(Error::Config(
                    "probe epochs and batch_size must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form with the seed cleared.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.seed = 0;
        let json = serde_json::to_vec(&canon).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value = toml_with_overrides(text, overrides)?;
        if let Some(t) = value.as_table_mut() {
            if !t.contains_key("pretrained") {
                if let Some(src) = default_source(t) {
                    t.insert("pretrained".into(), src);
                }
            }
        }
        let cfg: RunConfig = deserialize(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }
}

/// Parses TOML, applies dotted `key=value` overrides, then deserializes.
pub fn from_toml_with_overrides<T: DeserializeOwned>(
    text: &str,
    overrides: &[String],
) -> Result<T> {
    deserialize(toml_with_overrides(text, overrides)?)
}

fn toml_with_overrides(text: &str, overrides: &[String]) -> Result<toml::Value> {
    let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let mut value = toml::Value::Table(table);
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    check_generators(&value)?;
    Ok(value)
}

fn deserialize<T: DeserializeOwned>(value: toml::Value) -> Result<T> {
    value
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

/// The source task used when a config names no `pretrained` section: the
/// target's generator translated by one standard deviation, trained for
/// the target's epochs, batch size and optimizer settings.
pub fn default_source(config: &toml::Table) -> Option<toml::Value> {
    let mut data = config.get("data")?.as_table()?.clone();
    data.remove("shift");
    data.insert(
        "transform".into(),
        toml::Value::try_from(DomainShift::default()).ok()?,
    );
    let mut src = toml::Table::new();
    src.insert("kind".into(), "source".into());
    src.insert("data".into(), data.into());
    for key in ["epochs", "batch_size", "optim"] {
        if let Some(v) = config.get(key) {
            src.insert(key.into(), v.clone());
        }
    }
    Some(src.into())
}

const DATA_KEYS: [&str; 4] = ["generator", "train_fraction", "shift", "transform"];

fn generator_keys(name: &str) -> Option<&'static [&'static str]> {
    Some(match name {
        "two_gaussians" => &["d", "separation", "n"],
        "two_moons" => &["noise", "n"],
        "linear_regression" => &["d", "noise", "n"],
        "csv" => &["path", "task"],
        _ => return None,
    })
}

/// Rejects unknown generator names and unknown keys in data tables, which
/// serde cannot do for the flattened generator parameters.
fn check_generators(value: &toml::Value) -> Result<()> {
    match value {
        toml::Value::Table(t) => {
            if let Some(toml::Value::String(g)) = t.get("generator") {
                let keys = generator_keys(g).ok_or_else(|| Error::UnknownGenerator(g.clone()))?;
                if let Some(k) = t
                    .keys()
                    .find(|k| !keys.contains(&k.as_str()) && !DATA_KEYS.contains(&k.as_str()))
                {
                    return Err(Error::Config(format!(
                        "unknown key `{k}` for generator {g}"
                    )));
                }
            }
            t.values().try_for_each(check_generators)
        }
        _ => Ok(()),
    }
}

/// Parses the right-hand side of `key=value` as a TOML value, falling back
/// to a bare string.
fn parse_scalar(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    toml::from_str::<toml::Table>(&doc)
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `a.b.c=value` in the document, creating intermediate tables.
pub fn apply_override(doc: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let mut cur = doc;
    for part in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?} descends into a non-table")))?;
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override {key:?} descends into a non-table")))?;
    table.insert(parts[parts.len() - 1].to_string(), parse_scalar(raw.trim()));
    Ok(())
}
