//! Flat parameter storage with a registry of named tensors.

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_len, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Depth index of the layer owning this tensor (0 = closest to the input).
    pub layer: usize,
}

impl ParamEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.numel()
    }
}

/// All model parameters in one contiguous `Vec<f64>`, plus the shape
/// registry that maps tensor names to index ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams")]
pub struct ParamVector {
    entries: Vec<ParamEntry>,
    values: Vec<f64>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Appends a zero-initialized tensor.
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], layer: usize) -> Result<()> {
        let name = name.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid(format!(
                "tensor `{name}` has empty shape {shape:?}"
            )));
        }
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let entry = ParamEntry {
            name: name.clone(),
            shape: shape.to_vec(),
            offset: self.values.len(),
            layer,
        };
        self.values.resize(self.values.len() + entry.numel(), 0.0);
        self.index.insert(name, self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        let r = self.entry(name)?.range();
        Ok(&self.values[r])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let r = self.entry(name)?.range();
        Ok(&mut self.values[r])
    }

    /// Same registry, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        check_len("ParamVector::with_values", self.len(), values.len())?;
        Ok(Self {
            entries: self.entries.clone(),
            values,
            index: self.index.clone(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self.entries.clone(),
            values: vec![0.0; self.len()],
            index: self.index.clone(),
        }
    }

    /// Number of distinct layers referenced by the registry.
    pub fn layer_count(&self) -> usize {
        self.entries.iter().map(|e| e.layer + 1).max().unwrap_or(0)
    }

    /// Indices of every scalar belonging to one of the named tensors.
    pub fn indices_of<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for name in names {
            out.extend(self.entry(name)?.range());
        }
        out.sort_unstable();
        Ok(out)
    }

    /// Content hash over names, shapes and the exact bit patterns of values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            for d in &e.shape {
                h.update((*d as u64).to_le_bytes());
            }
        }
        for v in &self.values {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn reindex(&mut self) -> Result<()> {
        self.index.clear();
        let mut offset = 0;
        for (i, e) in self.entries.iter().enumerate() {
            if e.offset != offset {
                return Err(Error::invalid(format!(
                    "tensor `{}` has offset {} (expected {offset})",
                    e.name, e.offset
                )));
            }
            offset += e.numel();
            if self.index.insert(e.name.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate parameter `{}`", e.name)));
            }
        }
        check_len("ParamVector registry", offset, self.values.len())
    }
}

#[derive(Deserialize)]
struct RawParams {
    entries: Vec<ParamEntry>,
    values: Vec<f64>,
}

impl TryFrom<RawParams> for ParamVector {
    type Error = Error;

    fn try_from(raw: RawParams) -> Result<Self> {
        let mut p = ParamVector {
            entries: raw.entries,
            values: raw.values,
            index: HashMap::new(),
        };
        p.reindex()?;
        Ok(p)
    }
}

impl Default for ParamVector {
    fn default() -> Self {
        Self::new()
    }
}
