//! Classification of parameter names into transformer layers and categories.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Attention,
    Mlp,
    GateProjection,
    Layernorm,
    Embedding,
    LmHead,
    /// Matched no rule. Treated like a norm: outside the coefficient set and
    /// merged with the fallback coefficient.
    Other,
}

/// Rules used to classify parameter names. Keyword lists are matched as
/// substrings, in the order embedding, lm_head, gate, norm, attention, mlp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NamingScheme {
    /// Regex with one capture group holding the layer index.
    pub layer_pattern: String,
    pub embedding_keywords: Vec<String>,
    pub lm_head_keywords: Vec<String>,
    pub gate_keywords: Vec<String>,
    pub norm_keywords: Vec<String>,
    pub attention_keywords: Vec<String>,
    pub mlp_keywords: Vec<String>,
}

impl Default for NamingScheme {
    fn default() -> Self {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            layer_pattern: r"(?:^|\.)layers\.(\d+)\.".into(),
            embedding_keywords: v(&["embed"]),
            lm_head_keywords: v(&["lm_head"]),
            gate_keywords: v(&["gate_proj"]),
            norm_keywords: v(&["norm", "ln_"]),
            attention_keywords: v(&["attn", "attention", "q_proj", "k_proj", "v_proj", "o_proj"]),
            mlp_keywords: v(&["mlp", "up_proj", "down_proj", "ffn", "fc1", "fc2"]),
        }
    }
}

impl NamingScheme {
    /// Load from a `.toml` or `.json` file; missing fields take defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text)
                .map_err(|e| Error::Schema(format!("{}: {e}", path.display()))),
            _ => serde_json::from_str(&text)
                .map_err(|e| Error::Schema(format!("{}: {e}", path.display()))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub layer_index: Option<usize>,
    pub category: Category,
    pub in_coefficient_set: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelTopology {
    pub records: BTreeMap<String, ParamRecord>,
    /// Names that matched no category rule.
    pub unmatched: Vec<String>,
}

impl ModelTopology {
    pub fn get(&self, name: &str) -> Option<&ParamRecord> {
        self.records.get(name)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Layer indices with at least one coefficient-set parameter.
    pub fn coefficient_layers(&self) -> BTreeSet<usize> {
        self.records
            .values()
            .filter(|r| r.in_coefficient_set)
            .filter_map(|r| r.layer_index)
            .collect()
    }

    /// Coefficient-set parameter names of one layer, in name order.
    pub fn coefficient_params(&self, layer: usize) -> impl Iterator<Item = &str> {
        self.records
            .iter()
            .filter(move |(_, r)| r.in_coefficient_set && r.layer_index == Some(layer))
            .map(|(n, _)| n.as_str())
    }

    /// Every parameter name carrying `layer` as its index, norms included.
    pub fn layer_params(&self, layer: usize) -> impl Iterator<Item = &str> {
        self.records
            .iter()
            .filter(move |(_, r)| r.layer_index == Some(layer))
            .map(|(n, _)| n.as_str())
    }
}

pub fn parse_topology(archive: &TensorArchive, scheme: &NamingScheme) -> Result<ModelTopology> {
    let names: Vec<&str> = archive.names().collect();
    classify_names(&names, scheme)
}

pub fn classify_names(names: &[&str], scheme: &NamingScheme) -> Result<ModelTopology> {
    let layer_re = Regex::new(&scheme.layer_pattern)
        .map_err(|e| Error::InvalidArgument(format!("layer pattern: {e}")))?;
    let mut topo = ModelTopology::default();
    for &name in names {
        let layer_index = layer_re
            .captures(name)
            .and_then(|c| c.get(1))
            .and_then(|m| m.as_str().parse::<usize>().ok());
        let has = |kws: &[String]| kws.iter().any(|k| name.contains(k.as_str()));
        let category = if has(&scheme.embedding_keywords) {
            Category::Embedding
        } else if has(&scheme.lm_head_keywords) {
            Category::LmHead
        } else if has(&scheme.gate_keywords) {
            Category::GateProjection
        } else if has(&scheme.norm_keywords) {
            Category::Layernorm
        } else if has(&scheme.attention_keywords) {
            Category::Attention
        } else if has(&scheme.mlp_keywords) {
            Category::Mlp
        } else {
            topo.unmatched.push(name.to_string());
            Category::Other
        };
        let in_coefficient_set = layer_index.is_some()
            && matches!(
                category,
                Category::Attention | Category::Mlp | Category::GateProjection
            );
        topo.records.insert(
            name.to_string(),
            ParamRecord {
                layer_index,
                category,
                in_coefficient_set,
            },
        );
    }
    for name in &topo.unmatched {
        log::warn!("parameter `{name}` matched no naming rule; treated as `other`");
    }
    Ok(topo)
}
