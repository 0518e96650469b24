//! FLOPs accounting. One multiply-accumulate counts as 2 FLOPs; activations,
//! pooling and affine nodes count as 0.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::graph::{Network, Source};
use super::spec::{LayerKind, NetworkSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub id: String,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsComparison {
    pub original_total: u64,
    pub pruned_total: u64,
    /// `1 − pruned/original`, as a fraction.
    pub pruned_fraction: f64,
    /// `original/pruned`.
    pub speedup: f64,
}

impl FlopsComparison {
    pub fn pruned_pct(&self) -> f64 {
        100.0 * self.pruned_fraction
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub per_layer: Vec<LayerFlops>,
    pub total: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<FlopsComparison>,
}

/// `2 · C_out · H_out · W_out · C_in · M · K` for conv `i`.
pub fn flops_of_conv(net: &Network, i: usize) -> Result<u64> {
    match net.kind(i) {
        LayerKind::Conv {
            out_channels,
            in_channels,
            kernel,
            ..
        } => {
            let s = net.shape(i);
            Ok(2 * (*out_channels * s[1] * s[2] * *in_channels * kernel[0] * kernel[1]) as u64)
        }
        k => Err(Error::Config(format!(
            "`{}` is a {} layer, not conv",
            net.id(i),
            k.name()
        ))),
    }
}

pub fn flops_total(net: &Network) -> FlopsReport {
    report_from(net, &HashMap::new())
}

/// Validates `spec` and counts its FLOPs.
pub fn flops_of_spec(spec: &NetworkSpec) -> Result<FlopsReport> {
    Ok(flops_total(&spec.validate()?))
}

/// FLOPs of `net` if each conv in `kept` had only that many filters.
/// Matches `flops_total` of the structurally pruned network.
pub fn flops_with_kept(net: &Network, kept: &HashMap<usize, usize>) -> u64 {
    report_from(net, kept).total
}

fn report_from(net: &Network, kept: &HashMap<usize, usize>) -> FlopsReport {
    let mut channels = vec![0usize; net.len()];
    let mut per_layer = Vec::new();
    let src_channels = |chs: &[usize], s: Source| match s {
        Source::Input => net.input_shape()[0],
        Source::Node(j) => chs[j],
    };
    for &i in net.order() {
        let shape = net.shape(i);
        let cin = src_channels(&channels, net.sources(i)[0]);
        let (c, f) = match net.kind(i) {
            LayerKind::Conv {
                out_channels,
                kernel,
                ..
            } => {
                let cout = kept.get(&i).copied().unwrap_or(*out_channels);
                (cout, 2 * (cout * shape[1] * shape[2] * cin * kernel[0] * kernel[1]) as u64)
            }
            LayerKind::Linear { out_features, .. } => {
                (*out_features, 2 * (*out_features * cin) as u64)
            }
            LayerKind::Flatten => {
                let s = net.source_shape(net.sources(i)[0]);
                (cin * s[1..].iter().product::<usize>(), 0)
            }
            _ => (cin, 0),
        };
        channels[i] = c;
        if matches!(net.kind(i), LayerKind::Conv { .. } | LayerKind::Linear { .. }) {
            per_layer.push(LayerFlops {
                id: net.id(i).to_string(),
                flops: f,
            });
        }
    }
    FlopsReport {
        total: per_layer.iter().map(|l| l.flops).sum(),
        per_layer,
        comparison: None,
    }
}

/// Report for `pruned` annotated with the comparison against `original`.
pub fn compare(original: &FlopsReport, pruned: &FlopsReport) -> Result<FlopsReport> {
    if original.total == 0 || pruned.total == 0 {
        return Err(Error::Config("cannot compare zero-FLOP networks".into()));
    }
    let ratio = pruned.total as f64 / original.total as f64;
    let mut out = pruned.clone();
    out.comparison = Some(FlopsComparison {
        original_total: original.total,
        pruned_total: pruned.total,
        pruned_fraction: 1.0 - ratio,
        speedup: original.total as f64 / pruned.total as f64,
    });
    Ok(out)
}
