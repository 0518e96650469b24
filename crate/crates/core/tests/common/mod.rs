#![allow(dead_code)]

use prunekit::netspec::{init_params, LayerKind, LayerSpec, Network, NetworkSpec};
use prunekit::pruning::{KeepMask, PruningPlan};
use prunekit::tensor::init::{rng, uniform};
use prunekit::tensor::{Params, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    uniform(shape, -1.0, 1.0, &mut rng(seed))
}

pub fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
}

pub fn conv(id: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> LayerSpec {
    LayerSpec::new(
        id,
        LayerKind::Conv {
            out_channels: cout,
            in_channels: cin,
            kernel: [k, k],
            stride,
            pad,
        },
    )
}

pub fn linear(id: &str, d: usize, o: usize) -> LayerSpec {
    LayerSpec::new(
        id,
        LayerKind::Linear {
            out_features: o,
            in_features: d,
        },
    )
}

/// Where a prunable conv's channels are consumed by weights.
#[derive(Clone, Debug)]
pub struct Link {
    pub conv: String,
    pub consumer: String,
    /// 0 for a conv consumer; spatial extent per channel for a linear one.
    pub spatial: usize,
}

pub struct RandomNet {
    pub spec: NetworkSpec,
    pub links: Vec<Link>,
}

/// A random small network: plain conv stages with optional affine and
/// pooling, optional identity residual blocks, then one or two linear layers.
pub fn random_net(seed: u64) -> RandomNet {
    let mut r = rng(seed);
    let c0 = r.gen_range(1..=3);
    let h0 = [4usize, 6, 8][r.gen_range(0..3)];
    let mut layers: Vec<LayerSpec> = Vec::new();
    let mut links = Vec::new();
    // prunable conv awaiting its weighted consumer
    let mut pending: Option<usize> = None;
    let mut cin = c0;
    let mut h = h0;
    let mut prev = "input".to_string();
    let stages = r.gen_range(1..=3);
    for s in 0..stages {
        let residual = s > 0 && r.gen_bool(0.4);
        if residual {
            // the block input also feeds the junction, so its producer cannot be pruned
            if let Some(p) = pending.take() {
                layers[p].prunable = false;
            }
            let mid = r.gen_range(1..=5);
            let a = format!("b{s}a");
            layers.push(conv(&a, cin, mid, 3, 1, 1).from(&[&prev]).prunable());
            layers.push(LayerSpec::new(format!("{a}_bn"), LayerKind::FrozenAffine { channels: mid }));
            layers.push(LayerSpec::new(format!("{a}_relu"), LayerKind::Relu));
            let kb = if r.gen_bool(0.5) { 1 } else { 3 };
            let b = format!("b{s}b");
            layers.push(conv(&b, mid, cin, kb, 1, kb / 2));
            layers.push(LayerSpec::new(format!("b{s}_add"), LayerKind::Add).from(&[&b, &prev]));
            layers.push(LayerSpec::new(format!("b{s}_relu"), LayerKind::Relu));
            links.push(Link {
                conv: a,
                consumer: b,
                spatial: 0,
            });
            prev = format!("b{s}_relu");
        } else {
            let cout = r.gen_range(1..=6);
            let k = if r.gen_bool(0.5) { 1 } else { 3 };
            let id = format!("c{s}");
            if let Some(p) = pending.take() {
                links.push(Link {
                    conv: layers[p].id.clone(),
                    consumer: id.clone(),
                    spatial: 0,
                });
            }
            layers.push(conv(&id, cin, cout, k, 1, k / 2).from(&[&prev]).prunable());
            pending = Some(layers.len() - 1);
            if r.gen_bool(0.6) {
                layers.push(LayerSpec::new(format!("{id}_bn"), LayerKind::FrozenAffine { channels: cout }));
            }
            let relu = format!("{id}_relu");
            layers.push(LayerSpec::new(&relu, LayerKind::Relu));
            prev = relu;
            if h >= 4 && h.is_multiple_of(2) && r.gen_bool(0.5) {
                let p = format!("{id}_pool");
                layers.push(LayerSpec::new(&p, LayerKind::MaxPool));
                prev = p;
                h /= 2;
            }
            cin = cout;
        }
    }
    layers.push(LayerSpec::new("flatten", LayerKind::Flatten));
    let d = cin * h * h;
    let classes = r.gen_range(2..=4);
    if r.gen_bool(0.5) {
        let hidden = r.gen_range(2..=6);
        layers.push(linear("fc1", d, hidden));
        layers.push(LayerSpec::new("fc1_relu", LayerKind::Relu));
        layers.push(linear("fc2", hidden, classes));
        if let Some(p) = pending {
            links.push(Link {
                conv: layers[p].id.clone(),
                consumer: "fc1".into(),
                spatial: h * h,
            });
        }
    } else {
        layers.push(linear("fc", d, classes));
        if let Some(p) = pending {
            links.push(Link {
                conv: layers[p].id.clone(),
                consumer: "fc".into(),
                spatial: h * h,
            });
        }
    }
    let mut spec = NetworkSpec::new(format!("random{seed}"), [c0, h0, h0], classes);
    spec.layers = layers;
    RandomNet { spec, links }
}

/// Parameters with random frozen-affine scales and shifts as well.
pub fn random_params(net: &Network, seed: u64) -> Params<f64> {
    let mut p = init_params::<f64>(net, seed);
    let mut r = rng(seed ^ 0xabcd);
    for (name, param) in p.iter_mut() {
        if name.ends_with(".scale") {
            param.value.data_mut().iter_mut().for_each(|v| *v = r.gen_range(0.5..1.5));
        } else if name.ends_with(".shift") {
            param.value.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.5..0.5));
        }
    }
    p
}

/// A random plan over every prunable conv except the final one, keeping at
/// least one filter each.
pub fn random_plan(net: &Network, r: &mut ChaCha8Rng) -> PruningPlan {
    let mut plan = PruningPlan::identity(net);
    let last = net.final_conv().map(|i| net.id(i).to_string());
    for (id, m) in plan.masks.iter_mut() {
        if Some(id) == last.as_ref() {
            continue;
        }
        let n = m.len();
        let mut bits: Vec<bool> = (0..n).map(|_| r.gen_bool(0.5)).collect();
        if !bits.iter().any(|&b| b) {
            bits[r.gen_range(0..n)] = true;
        }
        *m = KeepMask(bits);
    }
    plan
}

/// The original parameters with every removed filter's weights and its
/// consumers' matching input weights set to zero.
pub fn zero_masked(params: &Params<f64>, plan: &PruningPlan, links: &[Link]) -> Params<f64> {
    let mut out = params.clone();
    for (id, mask) in &plan.masks {
        let w = &mut out.get_mut(&format!("{id}.weight")).unwrap().value;
        let per = w.len() / mask.len();
        for (j, keep) in mask.0.iter().enumerate() {
            if !keep {
                w.data_mut()[j * per..(j + 1) * per].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let link = links.iter().find(|l| &l.conv == id).expect("prunable conv has a consumer");
        let cw = &mut out.get_mut(&format!("{}.weight", link.consumer)).unwrap().value;
        let shape = cw.shape().to_vec();
        let (rows, cols) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let width = if link.spatial == 0 { inner } else { link.spatial };
        for (j, keep) in mask.0.iter().enumerate() {
            if *keep {
                continue;
            }
            for row in 0..rows {
                let base = if link.spatial == 0 {
                    row * cols * inner + j * inner
                } else {
                    row * cols + j * width
                };
                cw.data_mut()[base..base + width].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    out
}
