use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPEC_SCHEMA_VERSION: u32 = 1;

/// Reserved source name for the network input.
pub const INPUT: &str = "input";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        out_channels: usize,
        in_channels: usize,
        kernel: [usize; 2],
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
    },
    Relu,
    #[serde(rename = "maxpool")]
    MaxPool,
    FrozenAffine {
        channels: usize,
    },
    Linear {
        out_features: usize,
        in_features: usize,
    },
    Flatten,
    Add,
}

fn one() -> usize {
    1
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool => "maxpool",
            LayerKind::FrozenAffine { .. } => "frozen_affine",
            LayerKind::Linear { .. } => "linear",
            LayerKind::Flatten => "flatten",
            LayerKind::Add => "add",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            LayerKind::Add => 2,
            _ => 1,
        }
    }

    /// Nodes whose output channel `c` depends only on input channel `c`.
    pub fn is_channelwise(&self) -> bool {
        matches!(
            self,
            LayerKind::Relu | LayerKind::MaxPool | LayerKind::FrozenAffine { .. }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    /// Producing nodes; empty means "the previous layer" (or the network
    /// input for the first layer).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub prunable: bool,
}

fn is_false(b: &bool) -> bool {
    !*b
}

impl LayerSpec {
    pub fn new(id: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            id: id.into(),
            kind,
            inputs: Vec::new(),
            prunable: false,
        }
    }

    pub fn from(mut self, inputs: &[&str]) -> Self {
        self.inputs = inputs.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn prunable(mut self) -> Self {
        self.prunable = true;
        self
    }
}

/// Layer graph description. Serialized as TOML with a schema version.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub schema_version: u32,
    pub name: String,
    /// Per-sample input shape `[C, H, W]`.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(name: impl Into<String>, input_shape: [usize; 3], classes: usize) -> Self {
        NetworkSpec {
            schema_version: SPEC_SCHEMA_VERSION,
            name: name.into(),
            input_shape: input_shape.to_vec(),
            classes,
            layers: Vec::new(),
        }
    }

    pub fn push(&mut self, layer: LayerSpec) -> &mut Self {
        self.layers.push(layer);
        self
    }

    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format("network spec", e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: NetworkSpec =
            toml::from_str(text).map_err(|e| Error::format("network spec", e.to_string()))?;
        if spec.schema_version != SPEC_SCHEMA_VERSION {
            return Err(Error::format(
                "network spec",
                format!(
                    "schema_version {} (expected {SPEC_SCHEMA_VERSION})",
                    spec.schema_version
                ),
            ));
        }
        Ok(spec)
    }

    /// Explicit producer list for layer `i`, resolving the implicit chain.
    pub(crate) fn sources(&self, i: usize) -> Vec<String> {
        let l = &self.layers[i];
        if !l.inputs.is_empty() {
            l.inputs.clone()
        } else if i == 0 {
            vec![INPUT.to_string()]
        } else {
            vec![self.layers[i - 1].id.clone()]
        }
    }
}
