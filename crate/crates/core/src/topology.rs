//! Structural view of a checkpoint: embedding block, ordered encoder layers,
//! and everything else (pooler, classifier, ...).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensorstore::Checkpoint;

const INDEX_SLOT: &str = "{i}";

#[derive(Debug, thiserror::Error)]
pub enum TopologyError {
    #[error("layer pattern {0:?} must contain exactly one \"{{i}}\" slot")]
    BadPattern(String),
    #[error("no layer tensors found for pattern {0:?}")]
    NoLayers(String),
    #[error("non-contiguous layer indices: found {found:?}")]
    NonContiguous { found: Vec<usize> },
    #[error("tensor {name:?} matches more than one block ({blocks})")]
    Ambiguous { name: String, blocks: String },
    #[error("cannot read naming scheme {path}: {reason}")]
    Config { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, TopologyError>;

/// How tensor names map onto model blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamingScheme {
    pub embedding_prefixes: Vec<String>,
    /// Template with a single `{i}` slot for the 0-based layer index.
    pub layer_pattern: String,
    #[serde(default)]
    pub other_prefixes: Vec<String>,
}

impl Default for NamingScheme {
    fn default() -> Self {
        Self::bert()
    }
}

impl NamingScheme {
    pub fn bert() -> Self {
        Self {
            embedding_prefixes: vec!["embeddings.".into()],
            layer_pattern: "encoder.layer.{i}.".into(),
            other_prefixes: vec!["pooler.".into(), "classifier.".into()],
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scheme: Self = serde_json::from_str(text).map_err(|e| TopologyError::Config {
            path: "<inline>".into(),
            reason: e.to_string(),
        })?;
        scheme.validate()?;
        Ok(scheme)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| TopologyError::Config {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_json(&text).map_err(|e| match e {
            TopologyError::Config { reason, .. } => TopologyError::Config {
                path: path.display().to_string(),
                reason,
            },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.pattern_parts().map(|_| ())
    }

    fn pattern_parts(&self) -> Result<(&str, &str)> {
        let p = &self.layer_pattern;
        if p.matches(INDEX_SLOT).count() != 1 {
            return Err(TopologyError::BadPattern(p.clone()));
        }
        Ok(p.split_once(INDEX_SLOT).unwrap())
    }

    /// If `name` belongs to an encoder layer, its 0-based index and the part of
    /// the name following the layer prefix.
    pub fn match_layer<'a>(&self, name: &'a str) -> Option<(usize, &'a str)> {
        let (head, tail) = self.pattern_parts().ok()?;
        let rest = name.strip_prefix(head)?;
        let digits = rest.bytes().take_while(u8::is_ascii_digit).count();
        if digits == 0 {
            return None;
        }
        let index = rest[..digits].parse().ok()?;
        let after = rest[digits..].strip_prefix(tail)?;
        Some((index, after))
    }

    /// Full name of `suffix` inside layer `index` (0-based).
    pub fn layer_name(&self, index: usize, suffix: &str) -> String {
        self.layer_pattern.replacen(INDEX_SLOT, &index.to_string(), 1) + suffix
    }

    fn is_embedding(&self, name: &str) -> bool {
        self.embedding_prefixes.iter().any(|p| name.starts_with(p))
    }

    fn is_other_prefix(&self, name: &str) -> bool {
        self.other_prefixes.iter().any(|p| name.starts_with(p))
    }
}

/// Block assignment of every tensor in a checkpoint. Layer lists are 0-based:
/// `layer_tensors[0]` holds the lowest encoder layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ModelTopology {
    pub num_layers: usize,
    pub embedding_tensors: Vec<String>,
    pub layer_tensors: Vec<Vec<String>>,
    pub other_tensors: Vec<String>,
    #[serde(skip)]
    pub scheme: NamingScheme,
}

/// Tensors that match neither the embedding prefixes nor the layer pattern
/// are placed in the "other" block.
pub fn infer_topology(c: &Checkpoint, scheme: &NamingScheme) -> Result<ModelTopology> {
    scheme.validate()?;
    let mut embedding = Vec::new();
    let mut other = Vec::new();
    let mut layers: BTreeMap<usize, Vec<String>> = BTreeMap::new();

    for name in c.names() {
        let emb = scheme.is_embedding(name);
        let layer = scheme.match_layer(name);
        let oth = scheme.is_other_prefix(name);
        let hits = [emb, layer.is_some(), oth];
        if hits.iter().filter(|&&h| h).count() > 1 {
            let blocks: Vec<&str> = ["embedding", "layer", "other"]
                .iter()
                .zip(hits)
                .filter(|(_, h)| *h)
                .map(|(b, _)| *b)
                .collect();
            return Err(TopologyError::Ambiguous {
                name: name.to_string(),
                blocks: blocks.join(", "),
            });
        }
        match layer {
            Some((i, _)) => layers.entry(i).or_default().push(name.to_string()),
            None if emb => embedding.push(name.to_string()),
            None => other.push(name.to_string()),
        }
    }

    if layers.is_empty() {
        return Err(TopologyError::NoLayers(scheme.layer_pattern.clone()));
    }
    let found: Vec<usize> = layers.keys().copied().collect();
    if found.iter().enumerate().any(|(pos, &i)| pos != i) {
        return Err(TopologyError::NonContiguous { found });
    }

    Ok(ModelTopology {
        num_layers: layers.len(),
        embedding_tensors: embedding,
        layer_tensors: layers.into_values().collect(),
        other_tensors: other,
        scheme: scheme.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total: usize,
    pub embedding: usize,
    pub per_layer: Vec<usize>,
    pub other: usize,
    /// Embedding plus encoder layers, excluding pooler/head tensors.
    pub without_other: usize,
}

pub fn count_parameters(c: &Checkpoint, t: &ModelTopology) -> ParamReport {
    let count =
        |names: &[String]| -> usize { names.iter().filter_map(|n| c.entry(n)).map(|e| e.numel()).sum() };
    let embedding = count(&t.embedding_tensors);
    let per_layer: Vec<usize> = t.layer_tensors.iter().map(|l| count(l)).collect();
    let other = count(&t.other_tensors);
    let layers: usize = per_layer.iter().sum();
    ParamReport {
        total: embedding + layers + other,
        embedding,
        per_layer,
        other,
        without_other: embedding + layers,
    }
}
