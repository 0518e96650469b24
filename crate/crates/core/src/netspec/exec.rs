//! Graph execution: batched forward passes with observation taps, and the
//! matching reverse pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::init::{fan_in_uniform, rng};
use crate::tensor::ops;
use crate::tensor::{Param, Params, Tensor};

use super::graph::{Network, Source};
use super::spec::LayerKind;

pub fn weight_name(id: &str) -> String {
    format!("{id}.weight")
}

pub fn scale_name(id: &str) -> String {
    format!("{id}.scale")
}

pub fn shift_name(id: &str) -> String {
    format!("{id}.shift")
}

/// Fresh parameters for every parameterized node: fan-in-scaled uniform
/// weights from `seed`, identity frozen-affine.
pub fn init_params<T: Scalar>(net: &Network, seed: u64) -> Params<T> {
    let mut r = rng(seed);
    let mut params = Params::new();
    for &i in net.order() {
        let id = net.id(i);
        match net.kind(i) {
            LayerKind::Conv {
                out_channels,
                in_channels,
                kernel,
                ..
            } => {
                let shape = [*out_channels, *in_channels, kernel[0], kernel[1]];
                params.insert(weight_name(id), Param::new(fan_in_uniform(&shape, &mut r), true));
            }
            LayerKind::Linear {
                out_features,
                in_features,
            } => {
                let shape = [*out_features, *in_features];
                params.insert(weight_name(id), Param::new(fan_in_uniform(&shape, &mut r), true));
            }
            LayerKind::FrozenAffine { channels } => {
                params.insert(scale_name(id), Param::new(Tensor::full(&[*channels], T::one()), false));
                params.insert(shift_name(id), Param::new(Tensor::zeros(&[*channels]), false));
            }
            _ => {}
        }
    }
    params
}

/// Ordered set of activation nodes whose outputs are captured during a forward pass.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapSet {
    pub nodes: Vec<String>,
}

impl TapSet {
    pub fn new<S: AsRef<str>>(ids: &[S]) -> Self {
        TapSet {
            nodes: ids.iter().map(|s| s.as_ref().to_string()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.nodes.iter().any(|n| n == id)
    }

    /// Node indices for the taps; every tap must name an activation.
    pub fn resolve(&self, net: &Network) -> Result<Vec<usize>> {
        self.nodes
            .iter()
            .map(|id| {
                let i = net.index_of(id).map_err(|_| Error::InvalidTap {
                    id: id.clone(),
                    reason: "no such node".into(),
                })?;
                if !net.is_relu(i) {
                    return Err(Error::InvalidTap {
                        id: id.clone(),
                        reason: format!("taps must be activations, node is {}", net.kind(i).name()),
                    });
                }
                Ok(i)
            })
            .collect()
    }
}

/// Per-node channel multipliers applied to a node's output as `|s_c|·x_c`.
#[derive(Clone, Debug)]
pub struct ChannelScaling<T> {
    per_node: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> ChannelScaling<T> {
    pub fn new(net: &Network) -> Self {
        ChannelScaling {
            per_node: vec![None; net.len()],
        }
    }

    pub fn set(&mut self, net: &Network, node: usize, factors: Vec<T>) -> Result<()> {
        let c = net.shape(node)[0];
        if factors.len() != c {
            return Err(Error::shape(
                "channel scaling",
                format!("`{}` has {c} channels, got {} factors", net.id(node), factors.len()),
            ));
        }
        self.per_node[node] = Some(factors);
        Ok(())
    }

    pub fn get(&self, node: usize) -> Option<&[T]> {
        self.per_node[node].as_deref()
    }
}

/// Every intermediate produced by a forward pass.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    pub input: Tensor<T>,
    outputs: Vec<Option<Tensor<T>>>,
    unscaled: Vec<Option<Tensor<T>>>,
    argmax: Vec<Option<Vec<usize>>>,
    output: usize,
}

impl<T: Scalar> Trace<T> {
    /// Output of node `i` (after any channel scaling).
    pub fn get(&self, i: usize) -> &Tensor<T> {
        self.outputs[i].as_ref().expect("node evaluated")
    }

    /// Output of node `i` before channel scaling.
    pub fn unscaled(&self, i: usize) -> &Tensor<T> {
        self.unscaled[i].as_ref().unwrap_or_else(|| self.get(i))
    }

    pub fn logits(&self) -> &Tensor<T> {
        self.get(self.output)
    }

    fn source(&self, s: Source) -> &Tensor<T> {
        match s {
            Source::Input => &self.input,
            Source::Node(j) => self.get(j),
        }
    }
}

fn scale_channels<T: Scalar>(x: &Tensor<T>, factors: &[T]) -> Tensor<T> {
    let c = factors.len();
    let per: usize = x.shape()[2..].iter().product();
    let mut out = x.clone();
    for (k, chunk) in out.data_mut().chunks_mut(per).enumerate() {
        let f = factors[k % c].abs();
        chunk.iter_mut().for_each(|v| *v *= f);
    }
    out
}

fn check_input<T: Scalar>(net: &Network, input: &Tensor<T>) -> Result<()> {
    if input.rank() != 4 || input.shape()[1..] != *net.input_shape() {
        return Err(Error::shape(
            "forward",
            format!(
                "input {:?}, network expects [B, {:?}]",
                input.shape(),
                net.input_shape()
            ),
        ));
    }
    Ok(())
}

/// Full forward pass retaining every node output.
pub fn forward_trace<T: Scalar>(
    net: &Network,
    params: &Params<T>,
    input: &Tensor<T>,
    scaling: Option<&ChannelScaling<T>>,
) -> Result<Trace<T>> {
    check_input(net, input)?;
    let n = net.len();
    let mut trace = Trace {
        input: input.clone(),
        outputs: vec![None; n],
        unscaled: vec![None; n],
        argmax: vec![None; n],
        output: net.output(),
    };
    for &i in net.order() {
        let srcs = net.sources(i);
        let x = trace.source(srcs[0]);
        let id = net.id(i);
        let out = match net.kind(i) {
            LayerKind::Conv { stride, pad, .. } => {
                ops::conv2d_forward(x, &params.get(&weight_name(id))?.value, *stride, *pad)?
            }
            LayerKind::Relu => ops::relu(x),
            LayerKind::MaxPool => {
                let (y, idx) = ops::maxpool2x2(x)?;
                trace.argmax[i] = Some(idx);
                y
            }
            LayerKind::FrozenAffine { .. } => ops::frozen_affine(
                x,
                params.get(&scale_name(id))?.value.data(),
                params.get(&shift_name(id))?.value.data(),
            )?,
            LayerKind::Linear { .. } => {
                ops::linear_forward(x, &params.get(&weight_name(id))?.value)?
            }
            LayerKind::Flatten => {
                let b = x.shape()[0];
                x.clone().reshape(&[b, x.len() / b])?
            }
            LayerKind::Add => x.add(trace.source(srcs[1]))?,
        };
        match scaling.and_then(|s| s.get(i)) {
            Some(f) => {
                trace.outputs[i] = Some(scale_channels(&out, f));
                trace.unscaled[i] = Some(out);
            }
            None => trace.outputs[i] = Some(out),
        }
    }
    Ok(trace)
}

pub fn forward<T: Scalar>(net: &Network, params: &Params<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(forward_trace(net, params, input, None)?.logits().clone())
}

/// Forward pass returning logits and the post-activation outputs at `taps`,
/// in tap order. Taps only observe; logits are identical to [`forward`].
pub fn forward_with_taps<T: Scalar>(
    net: &Network,
    params: &Params<T>,
    input: &Tensor<T>,
    taps: &TapSet,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let idx = taps.resolve(net)?;
    let trace = forward_trace(net, params, input, None)?;
    let tapped = idx.iter().map(|&i| trace.get(i).clone()).collect();
    Ok((trace.logits().clone(), tapped))
}

/// Reverse pass. `seeds` are gradients of the objective with respect to node
/// outputs (e.g. the logits, or tapped activations). Gradients accumulate into
/// `params[..].grad` for trainable params; when `scale_grads` is set, the
/// gradient with respect to each scaling vector is returned (subgradient of
/// `|s|` at 0 is 0).
pub fn backward<T: Scalar>(
    net: &Network,
    params: &mut Params<T>,
    trace: &Trace<T>,
    seeds: Vec<(usize, Tensor<T>)>,
    scaling: Option<&ChannelScaling<T>>,
    scale_grads: bool,
) -> Result<Vec<Option<Vec<T>>>> {
    let n = net.len();
    let trainable_flags: Vec<bool> = (0..n)
        .map(|i| match net.kind(i) {
            LayerKind::Conv { .. } | LayerKind::Linear { .. } => params
                .get(&weight_name(net.id(i)))
                .map(|p| p.trainable)
                .unwrap_or(false),
            _ => false,
        })
        .collect();
    let trainable = |i: usize| trainable_flags[i];
    let scaled = |i: usize| scaling.and_then(|s| s.get(i)).is_some();

    let mut needs = vec![false; n];
    for &i in net.order() {
        needs[i] = trainable(i)
            || (scale_grads && scaled(i))
            || net.sources(i).iter().any(|s| matches!(s, Source::Node(j) if needs[*j]));
    }

    let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
    for (i, g) in seeds {
        if g.shape() != trace.get(i).shape() {
            return Err(Error::shape(
                "backward seed",
                format!("`{}`: {:?} vs {:?}", net.id(i), g.shape(), trace.get(i).shape()),
            ));
        }
        accumulate(&mut grads[i], g)?;
    }
    let mut scale_out: Vec<Option<Vec<T>>> = vec![None; n];

    for &i in net.order().iter().rev() {
        let Some(mut g) = grads[i].take() else { continue };
        if !needs[i] {
            continue;
        }
        if let Some(f) = scaling.and_then(|s| s.get(i)) {
            if scale_grads {
                let raw = trace.unscaled(i);
                let c = f.len();
                let per: usize = raw.shape()[2..].iter().product();
                let mut gs = vec![T::zero(); c];
                for (k, (gc, xc)) in g.data().chunks(per).zip(raw.data().chunks(per)).enumerate() {
                    let dot = gc.iter().zip(xc).fold(T::zero(), |a, (&u, &v)| a + u * v);
                    gs[k % c] += dot;
                }
                for (gsc, &fc) in gs.iter_mut().zip(f) {
                    *gsc *= sign0(fc);
                }
                scale_out[i] = Some(gs);
            }
            g = scale_channels(&g, f);
        }

        let srcs = net.sources(i);
        let want = |s: Source| matches!(s, Source::Node(j) if needs[j]);
        let id = net.id(i);
        let mut to_sources: Vec<(Source, Tensor<T>)> = Vec::new();
        match net.kind(i) {
            LayerKind::Conv { stride, pad, .. } => {
                let name = weight_name(id);
                let want_w = trainable(i);
                let want_x = want(srcs[0]);
                if want_w || want_x {
                    let p = params.get_mut(&name)?;
                    let (gx, gw) = ops::conv2d_backward_parts(
                        &g,
                        trace.source(srcs[0]),
                        &p.value,
                        *stride,
                        *pad,
                        want_x,
                        want_w,
                    )?;
                    if let Some(gw) = gw {
                        p.grad.add_assign(&gw)?;
                    }
                    if let Some(gx) = gx {
                        to_sources.push((srcs[0], gx));
                    }
                }
            }
            LayerKind::Linear { .. } => {
                let p = params.get_mut(&weight_name(id))?;
                let (gx, gw) = ops::linear_backward(&g, trace.source(srcs[0]), &p.value)?;
                if p.trainable {
                    p.grad.add_assign(&gw)?;
                }
                to_sources.push((srcs[0], gx));
            }
            LayerKind::Relu => {
                to_sources.push((srcs[0], ops::relu_backward(&g, trace.source(srcs[0]))?));
            }
            LayerKind::MaxPool => {
                let idx = trace.argmax[i].as_ref().expect("pool indices");
                let shape = trace.source(srcs[0]).shape().to_vec();
                to_sources.push((srcs[0], ops::maxpool2x2_backward(&g, idx, &shape)?));
            }
            LayerKind::FrozenAffine { .. } => {
                let scale = params.get(&scale_name(id))?.value.data();
                to_sources.push((srcs[0], ops::frozen_affine_backward(&g, scale)?));
            }
            LayerKind::Flatten => {
                let shape = trace.source(srcs[0]).shape().to_vec();
                to_sources.push((srcs[0], g.reshape(&shape)?));
            }
            LayerKind::Add => {
                to_sources.push((srcs[1], g.clone()));
                to_sources.push((srcs[0], g));
            }
        }
        for (s, gs) in to_sources {
            if let Source::Node(j) = s {
                if needs[j] {
                    accumulate(&mut grads[j], gs)?;
                }
            }
        }
    }
    Ok(scale_out)
}

fn sign0<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
