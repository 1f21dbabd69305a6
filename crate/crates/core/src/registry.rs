//! Partition of a model's adaptable weight matrices into convolution, MLP and
//! attention subspaces.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubspaceKind {
    Conv,
    Mlp,
    Attention,
}

impl SubspaceKind {
    pub const ALL: [SubspaceKind; 3] = [SubspaceKind::Conv, SubspaceKind::Mlp, SubspaceKind::Attention];

    pub fn as_str(self) -> &'static str {
        match self {
            SubspaceKind::Conv => "conv",
            SubspaceKind::Mlp => "mlp",
            SubspaceKind::Attention => "attention",
        }
    }
}

impl fmt::Display for SubspaceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SubspaceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "conv" => Ok(SubspaceKind::Conv),
            "mlp" => Ok(SubspaceKind::Mlp),
            "attention" | "attn" => Ok(SubspaceKind::Attention),
            other => Err(Error::Config(format!("unknown subspace `{other}`"))),
        }
    }
}

/// Parses a comma-separated subspace list such as `mlp,conv`.
pub fn parse_subspaces(list: &str) -> Result<BTreeSet<SubspaceKind>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(SubspaceKind::from_str)
        .collect()
}

/// One adaptable weight as a model reports it, before classification.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeightInfo {
    pub layer_id: String,
    /// Module type tag, e.g. `conv2d`, `linear`, `attention.qkv`.
    pub module: String,
    pub rows: usize,
    pub cols: usize,
    /// Position of the layer in the model's forward order.
    pub handle: usize,
}

/// Models whose weight matrices can be adapted.
pub trait AdaptableModel {
    /// Every adaptable weight in forward order, conv kernels viewed as `O × (C·kh·kw)`.
    fn adaptable_weights(&self) -> Vec<WeightInfo>;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDescriptor {
    pub layer_id: String,
    pub kind: SubspaceKind,
    #[serde(rename = "m")]
    pub rows: usize,
    #[serde(rename = "n")]
    pub cols: usize,
    #[serde(skip)]
    pub handle: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubspaceRegistry {
    pub conv_layers: Vec<LayerDescriptor>,
    pub mlp_layers: Vec<LayerDescriptor>,
    pub attention_layers: Vec<LayerDescriptor>,
}

fn kind_of(module: &str) -> Option<SubspaceKind> {
    match module {
        "conv2d" => Some(SubspaceKind::Conv),
        "linear" => Some(SubspaceKind::Mlp),
        m if m.starts_with("attention.") => Some(SubspaceKind::Attention),
        _ => None,
    }
}

/// Classifies every adaptable weight of `model` into exactly one subspace.
pub fn classify_layers(model: &impl AdaptableModel) -> Result<SubspaceRegistry> {
    let mut reg = SubspaceRegistry::default();
    let mut seen = BTreeSet::new();
    for w in model.adaptable_weights() {
        let kind = kind_of(&w.module).ok_or_else(|| Error::Classification {
            layer: w.layer_id.clone(),
            tag: w.module.clone(),
        })?;
        if !seen.insert(w.layer_id.clone()) {
            return Err(Error::Contract(format!("duplicate layer id `{}`", w.layer_id)));
        }
        let desc = LayerDescriptor {
            layer_id: w.layer_id,
            kind,
            rows: w.rows,
            cols: w.cols,
            handle: w.handle,
        };
        match kind {
            SubspaceKind::Conv => reg.conv_layers.push(desc),
            SubspaceKind::Mlp => reg.mlp_layers.push(desc),
            SubspaceKind::Attention => reg.attention_layers.push(desc),
        }
    }
    Ok(reg)
}

impl SubspaceRegistry {
    /// `(n1, n2, n3)`: conv, mlp and attention layer counts.
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.conv_layers.len(), self.mlp_layers.len(), self.attention_layers.len())
    }

    pub fn len(&self) -> usize {
        let (a, b, c) = self.counts();
        a + b + c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subspace(&self, kind: SubspaceKind) -> &[LayerDescriptor] {
        match kind {
            SubspaceKind::Conv => &self.conv_layers,
            SubspaceKind::Mlp => &self.mlp_layers,
            SubspaceKind::Attention => &self.attention_layers,
        }
    }

    /// All layers across subspaces, in the model's forward order.
    pub fn layers(&self) -> Vec<&LayerDescriptor> {
        let mut all: Vec<_> = self
            .conv_layers
            .iter()
            .chain(&self.mlp_layers)
            .chain(&self.attention_layers)
            .collect();
        all.sort_by_key(|d| d.handle);
        all
    }

    pub fn get(&self, layer_id: &str) -> Option<&LayerDescriptor> {
        self.layers().into_iter().find(|d| d.layer_id == layer_id)
    }

    pub fn kinds(&self) -> BTreeSet<SubspaceKind> {
        SubspaceKind::ALL
            .into_iter()
            .filter(|&k| !self.subspace(k).is_empty())
            .collect()
    }

    /// Restricts the registry to the enabled subspaces.
    pub fn select_subspaces(&self, enabled: &BTreeSet<SubspaceKind>) -> Result<Self> {
        if enabled.is_empty() {
            return Err(Error::Config("at least one subspace must be enabled".into()));
        }
        let keep = |k: SubspaceKind, v: &Vec<LayerDescriptor>| {
            if enabled.contains(&k) {
                v.clone()
            } else {
                Vec::new()
            }
        };
        Ok(Self {
            conv_layers: keep(SubspaceKind::Conv, &self.conv_layers),
            mlp_layers: keep(SubspaceKind::Mlp, &self.mlp_layers),
            attention_layers: keep(SubspaceKind::Attention, &self.attention_layers),
        })
    }

    /// JSON dump of `(layer_id, kind, m, n)` per layer, grouped by subspace.
    pub fn to_json(&self) -> serde_json::Value {
        let (n1, n2, n3) = self.counts();
        serde_json::json!({
            "counts": { "conv": n1, "mlp": n2, "attention": n3 },
            "conv": self.conv_layers,
            "mlp": self.mlp_layers,
            "attention": self.attention_layers,
        })
    }
}
