mod common;

use common::{conv, linear, rand_tensor, random_net, random_params, t64};
use prunekit::netspec::flops::{compare, flops_of_conv, flops_total};
use prunekit::netspec::{
    forward, forward_trace, forward_with_taps, init_params, zoo, LayerKind, LayerSpec, NetworkSpec, TapSet,
};
use prunekit::tensor::ops::{conv2d_forward, relu};
use prunekit::tensor::{Param, Params};
use prunekit::Error;

fn relu_layer(id: &str) -> LayerSpec {
    LayerSpec::new(id, LayerKind::Relu)
}

#[test]
fn toy_vgg_validates_with_shapes() {
    let net = zoo::vgg8_with([3, 8, 8], [4, 4, 8, 8, 16, 16], 10, 5).validate().unwrap();
    assert_eq!(net.shape(net.index_of("conv6").unwrap()), &[16, 2, 2]);
    assert_eq!(net.shape(net.output()), &[5]);
    assert_eq!(net.final_activation().map(|i| net.id(i)), Some("relu6"));
}

#[test]
fn channel_mismatch_is_rejected() {
    let mut spec = NetworkSpec::new("bad", [4, 4, 4], 2);
    spec.push(conv("c1", 3, 2, 3, 1, 1))
        .push(LayerSpec::new("flat", LayerKind::Flatten))
        .push(linear("fc", 32, 2));
    match spec.validate() {
        Err(Error::InvalidSpec(problems)) => assert!(problems.iter().any(|p| p.contains("c1")), "{problems:?}"),
        other => panic!("expected InvalidSpec, got {other:?}"),
    }
}

#[test]
fn residual_shape_mismatch_is_rejected() {
    let mut spec = NetworkSpec::new("bad", [2, 4, 4], 2);
    spec.push(conv("c1", 2, 3, 3, 1, 1))
        .push(LayerSpec::new("add", LayerKind::Add).from(&["c1", "input"]))
        .push(LayerSpec::new("flat", LayerKind::Flatten))
        .push(linear("fc", 48, 2));
    assert!(matches!(spec.validate(), Err(Error::InvalidSpec(_))));
}

#[test]
fn cycles_and_unknown_inputs_are_rejected() {
    let mut spec = NetworkSpec::new("bad", [1, 2, 2], 2);
    spec.push(conv("a", 1, 1, 1, 1, 0).from(&["b"]))
        .push(conv("b", 1, 1, 1, 1, 0).from(&["a"]))
        .push(LayerSpec::new("flat", LayerKind::Flatten))
        .push(linear("fc", 4, 2));
    assert!(spec.validate().is_err());

    let mut spec = NetworkSpec::new("bad", [1, 2, 2], 2);
    spec.push(conv("a", 1, 1, 1, 1, 0).from(&["nowhere"]));
    assert!(spec.validate().is_err());
}

#[test]
fn spec_toml_roundtrip() {
    for spec in [zoo::vgg8(10), zoo::resnet3(10), random_net(3).spec] {
        let text = spec.to_toml().unwrap();
        assert_eq!(NetworkSpec::from_toml(&text).unwrap(), spec);
    }
}

#[test]
fn single_conv_tap_is_relu_of_conv() {
    let mut spec = NetworkSpec::new("one", [2, 3, 3], 2);
    spec.push(conv("c", 2, 3, 3, 1, 1))
        .push(relu_layer("r"))
        .push(LayerSpec::new("flat", LayerKind::Flatten))
        .push(linear("fc", 27, 2));
    let net = spec.validate().unwrap();
    let params = init_params::<f64>(&net, 1);
    let x = rand_tensor(&[2, 2, 3, 3], 2);
    let (_, taps) = forward_with_taps(&net, &params, &x, &TapSet::new(&["r"])).unwrap();
    let expect = relu(&conv2d_forward(&x, &params.get("c.weight").unwrap().value, 1, 1).unwrap());
    assert_eq!(taps[0], expect);
}

#[test]
fn taps_never_change_logits() {
    for seed in 0..10 {
        let net = random_net(seed).spec.validate().unwrap();
        let params = random_params(&net, seed);
        let s = net.input_shape();
        let x = rand_tensor(&[3, s[0], s[1], s[2]], seed);
        let plain = forward(&net, &params, &x).unwrap();
        let relus: Vec<&str> = net.order().iter().filter(|&&i| net.is_relu(i)).map(|&i| net.id(i)).collect();
        let (logits, taps) = forward_with_taps(&net, &params, &x, &TapSet::new(&relus)).unwrap();
        assert_eq!(logits, plain);
        assert_eq!(taps.len(), relus.len());
        let (empty, _) = forward_with_taps(&net, &params, &x, &TapSet::default()).unwrap();
        assert_eq!(empty, plain);
    }
    let net = zoo::resnet3(10).validate().unwrap();
    assert!(forward_with_taps(
        &net,
        &init_params::<f64>(&net, 0),
        &rand_tensor(&[1, 3, 8, 8], 0),
        &TapSet::new(&["no_such_node"])
    )
    .is_err());
}

#[test]
fn residual_junction_by_hand() {
    // out = relu(2·x + x), one channel, two pixels
    let mut spec = NetworkSpec::new("block", [1, 1, 2], 2);
    spec.push(conv("a", 1, 1, 1, 1, 0))
        .push(LayerSpec::new("add", LayerKind::Add).from(&["a", "input"]))
        .push(relu_layer("out"))
        .push(LayerSpec::new("flat", LayerKind::Flatten))
        .push(linear("fc", 2, 2));
    let net = spec.validate().unwrap();
    let mut params = Params::new();
    params.insert("a.weight", Param::new(t64(&[1, 1, 1, 1], &[2.0]), true));
    params.insert("fc.weight", Param::new(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), true));
    let x = t64(&[1, 1, 1, 2], &[1.0, -3.0]);
    let (logits, taps) = forward_with_taps(&net, &params, &x, &TapSet::new(&["out"])).unwrap();
    assert_eq!(taps[0].data(), &[3.0, 0.0]);
    assert_eq!(logits.data(), &[3.0, 0.0]);
    assert!(net.is_junction_activation(net.index_of("out").unwrap()));
}

#[test]
fn conv_flops_by_hand() {
    let mut spec = NetworkSpec::new("f", [3, 32, 32], 2);
    spec.push(conv("c", 3, 8, 3, 1, 1))
        .push(LayerSpec::new("flat", LayerKind::Flatten))
        .push(linear("fc", 8 * 32 * 32, 2));
    let net = spec.validate().unwrap();
    assert_eq!(flops_of_conv(&net, net.index_of("c").unwrap()).unwrap(), 442_368);
    assert_eq!(flops_total(&net).total, 442_368 + 2 * 2 * 8192);

    let mut half = NetworkSpec::new("f", [3, 32, 32], 2);
    half.push(conv("c", 3, 4, 3, 1, 1))
        .push(LayerSpec::new("flat", LayerKind::Flatten))
        .push(linear("fc", 4 * 32 * 32, 2));
    let half = half.validate().unwrap();
    assert_eq!(flops_of_conv(&half, half.index_of("c").unwrap()).unwrap(), 442_368 / 2);
    assert!(flops_of_conv(&net, net.index_of("fc").unwrap()).is_err());
}

#[test]
fn flops_are_additive_over_layers() {
    for seed in 0..10 {
        let net = random_net(seed).spec.validate().unwrap();
        let r = flops_total(&net);
        assert_eq!(r.per_layer.iter().map(|l| l.flops).sum::<u64>(), r.total);
    }
}

#[test]
fn compare_at_speedup_four_point_four() {
    // totals chosen with ratio exactly 4.4
    let mk = |cout: usize| {
        let mut s = NetworkSpec::new("f", [1, 1, 1], 1);
        s.push(conv("c", 1, cout, 1, 1, 0))
            .push(LayerSpec::new("flat", LayerKind::Flatten))
            .push(linear("fc", cout, 1));
        flops_total(&s.validate().unwrap())
    };
    let r = compare(&mk(44), &mk(10)).unwrap();
    let c = r.comparison.unwrap();
    assert!((c.speedup - 4.4).abs() < 1e-12);
    assert!((c.pruned_pct() - 77.28).abs() < 0.1, "{}", c.pruned_pct());
}

#[test]
fn bundled_flops_match_hand_counts() {
    // vgg8: pooling after every second conv, 8×8 input
    let w = zoo::VGG8_WIDTHS;
    let mut expect = 0u64;
    let (mut cin, mut hw) = (3usize, 64usize);
    for (i, &c) in w.iter().enumerate() {
        expect += 2 * (c * hw * cin * 9) as u64;
        cin = c;
        if i % 2 == 1 {
            hw /= 4;
        }
    }
    let net = zoo::vgg8(10).validate().unwrap();
    let convs: u64 = flops_total(&net)
        .per_layer
        .iter()
        .filter(|l| l.id.starts_with("conv"))
        .map(|l| l.flops)
        .sum();
    assert_eq!(convs, expect);
}

#[test]
fn trace_matches_plain_forward() {
    let net = zoo::resnet3(10).validate().unwrap();
    let params = init_params::<f64>(&net, 4);
    let x = rand_tensor(&[2, 3, 8, 8], 9);
    let t = forward_trace(&net, &params, &x, None).unwrap();
    assert_eq!(t.logits(), &forward(&net, &params, &x).unwrap());
}
