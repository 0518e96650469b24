use std::collections::{BTreeSet, HashMap, HashSet};

use crate::error::{Error, Result};
use crate::tensor::ops::conv_out_extent;

use super::spec::{LayerKind, LayerSpec, NetworkSpec, INPUT};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Input,
    Node(usize),
}

/// A validated, shape-annotated network graph. Immutable once built.
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    order: Vec<usize>,
    depth: Vec<usize>,
    sources: Vec<Vec<Source>>,
    consumers: Vec<Vec<usize>>,
    shapes: Vec<Vec<usize>>,
    output: usize,
    index: HashMap<String, usize>,
}

/// A node whose post-activation output carries a learned importance vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScoredUnit {
    /// Conv id, or the junction activation id for residual junctions.
    pub layer: String,
    /// Activation node the importance vector scales.
    pub activation: String,
    pub channels: usize,
    /// Set when the unit is a conv layer.
    pub conv: Option<String>,
}

impl NetworkSpec {
    /// Checks the graph and annotates every node with its per-sample output
    /// shape. All violations found are reported together.
    pub fn validate(&self) -> Result<Network> {
        Network::build(self.clone())
    }
}

impl Network {
    fn build(spec: NetworkSpec) -> Result<Self> {
        let mut errs = Vec::new();
        let n = spec.layers.len();
        if n == 0 {
            return Err(Error::InvalidSpec(vec!["network has no layers".into()]));
        }
        if spec.input_shape.len() != 3 || spec.input_shape.contains(&0) {
            errs.push(format!(
                "input shape {:?} must be [C, H, W] with positive extents",
                spec.input_shape
            ));
        }
        if spec.classes == 0 {
            errs.push("class count must be positive".into());
        }

        let mut index = HashMap::new();
        for (i, l) in spec.layers.iter().enumerate() {
            if l.id == INPUT {
                errs.push(format!("layer id `{INPUT}` is reserved"));
            }
            if index.insert(l.id.clone(), i).is_some() {
                errs.push(format!("duplicate layer id `{}`", l.id));
            }
        }

        let mut sources = vec![Vec::new(); n];
        let mut consumers = vec![Vec::new(); n];
        #[allow(clippy::needless_range_loop)]
        for i in 0..n {
            let l = &spec.layers[i];
            let srcs = spec.sources(i);
            if srcs.len() != l.kind.arity() {
                errs.push(format!(
                    "`{}` ({}) takes {} input(s), got {}",
                    l.id,
                    l.kind.name(),
                    l.kind.arity(),
                    srcs.len()
                ));
            }
            for s in srcs {
                if s == INPUT {
                    sources[i].push(Source::Input);
                } else if let Some(&j) = index.get(&s) {
                    sources[i].push(Source::Node(j));
                    consumers[j].push(i);
                } else {
                    errs.push(format!("`{}` reads from unknown node `{s}`", l.id));
                }
            }
        }
        if !errs.is_empty() {
            return Err(Error::InvalidSpec(errs));
        }

        // Kahn's algorithm; ready nodes are taken in declaration order.
        let mut indeg: Vec<usize> = sources
            .iter()
            .map(|s| s.iter().filter(|s| matches!(s, Source::Node(_))).count())
            .collect();
        let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &c in &consumers[i] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if order.len() != n {
            let stuck: Vec<&str> = (0..n)
                .filter(|&i| indeg[i] > 0)
                .map(|i| spec.layers[i].id.as_str())
                .collect();
            errs.push(format!("cycle through {}", stuck.join(", ")));
            return Err(Error::InvalidSpec(errs));
        }
        let mut depth = vec![0; n];
        for (d, &i) in order.iter().enumerate() {
            depth[i] = d;
        }

        let mut shapes: Vec<Option<Vec<usize>>> = vec![None; n];
        for &i in &order {
            let l = &spec.layers[i];
            let ins: Option<Vec<Vec<usize>>> = sources[i]
                .iter()
                .map(|s| match s {
                    Source::Input => Some(spec.input_shape.clone()),
                    Source::Node(j) => shapes[*j].clone(),
                })
                .collect();
            let Some(ins) = ins else { continue };
            match infer_shape(l, &ins) {
                Ok(s) => shapes[i] = Some(s),
                Err(e) => errs.push(format!("`{}`: {e}", l.id)),
            }
        }

        let sinks: Vec<usize> = (0..n).filter(|&i| consumers[i].is_empty()).collect();
        let output = match sinks.as_slice() {
            [one] => *one,
            _ => {
                let ids: Vec<&str> = sinks.iter().map(|&i| spec.layers[i].id.as_str()).collect();
                errs.push(format!("expected a single output node, found [{}]", ids.join(", ")));
                0
            }
        };
        if let Some(s) = &shapes[output] {
            if errs.is_empty() && s != &[spec.classes] {
                errs.push(format!(
                    "output `{}` has shape {s:?}, expected [{}]",
                    spec.layers[output].id, spec.classes
                ));
            }
        }
        if !errs.is_empty() {
            return Err(Error::InvalidSpec(errs));
        }

        let net = Network {
            shapes: shapes.into_iter().map(|s| s.expect("all shapes inferred")).collect(),
            spec,
            order,
            depth,
            sources,
            consumers,
            output,
            index,
        };
        for (i, l) in net.spec.layers.iter().enumerate() {
            if !l.prunable {
                continue;
            }
            if !matches!(l.kind, LayerKind::Conv { .. }) {
                errs.push(format!("`{}`: only conv layers can be prunable", l.id));
            } else if net.is_junction_feeding(i) {
                errs.push(format!(
                    "`{}`: conv feeding a residual junction cannot be prunable",
                    l.id
                ));
            }
        }
        if !errs.is_empty() {
            return Err(Error::InvalidSpec(errs));
        }
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.spec.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spec.layers.is_empty()
    }

    /// Layer indices in execution order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Position of layer `i` in execution order.
    pub fn depth(&self, i: usize) -> usize {
        self.depth[i]
    }

    pub fn layer(&self, i: usize) -> &LayerSpec {
        &self.spec.layers[i]
    }

    pub fn kind(&self, i: usize) -> &LayerKind {
        &self.spec.layers[i].kind
    }

    pub fn id(&self, i: usize) -> &str {
        &self.spec.layers[i].id
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    /// Per-sample output shape of layer `i`.
    pub fn shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.spec.input_shape
    }

    pub fn source_shape(&self, s: Source) -> &[usize] {
        match s {
            Source::Input => &self.spec.input_shape,
            Source::Node(j) => &self.shapes[j],
        }
    }

    pub fn sources(&self, i: usize) -> &[Source] {
        &self.sources[i]
    }

    pub fn consumers(&self, i: usize) -> &[usize] {
        &self.consumers[i]
    }

    pub fn output(&self) -> usize {
        self.output
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn is_relu(&self, i: usize) -> bool {
        matches!(self.kind(i), LayerKind::Relu)
    }

    pub fn is_conv(&self, i: usize) -> bool {
        matches!(self.kind(i), LayerKind::Conv { .. })
    }

    /// Conv layer indices in execution order.
    pub fn convs(&self) -> Vec<usize> {
        self.order.iter().copied().filter(|&i| self.is_conv(i)).collect()
    }

    /// Last conv layer in execution order; never pruned.
    pub fn final_conv(&self) -> Option<usize> {
        self.convs().last().copied()
    }

    /// Last activation with a spatial (C, H, W) output: the final
    /// convolutional stage's post-activation node.
    pub fn final_activation(&self) -> Option<usize> {
        self.order
            .iter()
            .rev()
            .copied()
            .find(|&i| self.is_relu(i) && self.shapes[i].len() == 3)
    }

    /// Relu directly fed by an add node.
    pub fn is_junction_activation(&self, i: usize) -> bool {
        self.is_relu(i)
            && matches!(self.sources[i].as_slice(), [Source::Node(j)] if matches!(self.kind(*j), LayerKind::Add))
    }

    /// True when conv `i`'s channels reach an add node through channel-wise ops only.
    pub fn is_junction_feeding(&self, i: usize) -> bool {
        let mut stack = self.consumers[i].clone();
        let mut seen = HashSet::new();
        while let Some(c) = stack.pop() {
            if !seen.insert(c) {
                continue;
            }
            match self.kind(c) {
                LayerKind::Add => return true,
                k if k.is_channelwise() => stack.extend_from_slice(&self.consumers[c]),
                _ => {}
            }
        }
        false
    }

    /// Activation reached from conv `i` through an optional chain of
    /// frozen-affine nodes, each with a single consumer.
    pub fn activation_of(&self, i: usize) -> Option<usize> {
        let mut cur = i;
        loop {
            let [next] = self.consumers[cur].as_slice() else {
                return None;
            };
            match self.kind(*next) {
                LayerKind::Relu => return Some(*next),
                LayerKind::FrozenAffine { .. } => cur = *next,
                _ => return None,
            }
        }
    }

    /// Conv producing the activation at `i` (through frozen-affine nodes), if any.
    pub fn producer_conv(&self, i: usize) -> Option<usize> {
        let mut cur = i;
        loop {
            let [Source::Node(prev)] = self.sources[cur].as_slice() else {
                return None;
            };
            match self.kind(*prev) {
                LayerKind::Conv { .. } => return Some(*prev),
                LayerKind::FrozenAffine { .. } => cur = *prev,
                _ => return None,
            }
        }
    }

    /// Units that receive an importance vector, ordered by activation depth.
    pub fn scored_units(&self) -> Vec<ScoredUnit> {
        let mut units = Vec::new();
        for &i in &self.order {
            if self.is_conv(i) && !self.is_junction_feeding(i) {
                if let Some(a) = self.activation_of(i) {
                    units.push((self.depth[a], ScoredUnit {
                        layer: self.id(i).to_string(),
                        activation: self.id(a).to_string(),
                        channels: self.shapes[i][0],
                        conv: Some(self.id(i).to_string()),
                    }));
                }
            } else if self.is_junction_activation(i) {
                units.push((self.depth[i], ScoredUnit {
                    layer: self.id(i).to_string(),
                    activation: self.id(i).to_string(),
                    channels: self.shapes[i][0],
                    conv: None,
                }));
            }
        }
        units.sort_by_key(|(d, _)| *d);
        units.into_iter().map(|(_, u)| u).collect()
    }

    /// Prunable conv layers in execution order.
    pub fn prunable_convs(&self) -> Vec<usize> {
        self.convs()
            .into_iter()
            .filter(|&i| self.layer(i).prunable)
            .collect()
    }
}

fn infer_shape(l: &LayerSpec, ins: &[Vec<usize>]) -> std::result::Result<Vec<usize>, String> {
    let x = &ins[0];
    match &l.kind {
        LayerKind::Conv {
            out_channels,
            in_channels,
            kernel,
            stride,
            pad,
        } => {
            let [c, h, w] = x.as_slice() else {
                return Err(format!("conv needs a [C, H, W] input, got {x:?}"));
            };
            if c != in_channels {
                return Err(format!(
                    "channel mismatch: declares {in_channels} input channels, producer has {c}"
                ));
            }
            if *out_channels == 0 || kernel.contains(&0) {
                return Err("zero-sized filter bank".into());
            }
            let ho = conv_out_extent(*h, kernel[0], *stride, *pad).map_err(|e| e.to_string())?;
            let wo = conv_out_extent(*w, kernel[1], *stride, *pad).map_err(|e| e.to_string())?;
            Ok(vec![*out_channels, ho, wo])
        }
        LayerKind::Relu => Ok(x.clone()),
        LayerKind::MaxPool => match x.as_slice() {
            [c, h, w] if h % 2 == 0 && w % 2 == 0 => Ok(vec![*c, h / 2, w / 2]),
            [_, h, w] => Err(format!("non-integral pooled extent for {h}x{w}")),
            _ => Err(format!("maxpool needs a [C, H, W] input, got {x:?}")),
        },
        LayerKind::FrozenAffine { channels } => {
            if x.first() != Some(channels) {
                return Err(format!(
                    "channel mismatch: affine over {channels} channels, producer has {x:?}"
                ));
            }
            Ok(x.clone())
        }
        LayerKind::Linear {
            out_features,
            in_features,
        } => match x.as_slice() {
            [d] if d == in_features && *out_features > 0 => Ok(vec![*out_features]),
            [d] => Err(format!(
                "feature mismatch: declares {in_features} inputs, producer has {d}"
            )),
            _ => Err(format!("linear needs a flat input, got {x:?}")),
        },
        LayerKind::Flatten => Ok(vec![x.iter().product()]),
        LayerKind::Add => {
            if ins.len() == 2 && ins[0] != ins[1] {
                return Err(format!("add of mismatched shapes {:?} and {:?}", ins[0], ins[1]));
            }
            Ok(x.clone())
        }
    }
}
