//! Bundled reference architectures.

use super::spec::{LayerKind, LayerSpec, NetworkSpec};

fn conv(id: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> LayerSpec {
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

fn affine(id: &str, c: usize) -> LayerSpec {
    LayerSpec::new(id, LayerKind::FrozenAffine { channels: c })
}

fn relu(id: &str) -> LayerSpec {
    LayerSpec::new(id, LayerKind::Relu)
}

/// Eight weight layers: six 3×3 convs in three pooled stages, then a
/// two-layer classifier. Each conv is followed by a frozen affine and a relu.
pub fn vgg8_with(input: [usize; 3], widths: [usize; 6], hidden: usize, classes: usize) -> NetworkSpec {
    let mut s = NetworkSpec::new("vgg8", input, classes);
    let mut cin = input[0];
    let (mut h, mut w) = (input[1], input[2]);
    for (k, &c) in widths.iter().enumerate() {
        let n = k + 1;
        s.push(conv(&format!("conv{n}"), cin, c, 3, 1, 1).prunable());
        s.push(affine(&format!("bn{n}"), c));
        s.push(relu(&format!("relu{n}")));
        if n % 2 == 0 {
            s.push(LayerSpec::new(format!("pool{}", n / 2), LayerKind::MaxPool));
            h /= 2;
            w /= 2;
        }
        cin = c;
    }
    s.push(LayerSpec::new("flatten", LayerKind::Flatten));
    s.push(LayerSpec::new(
        "fc1",
        LayerKind::Linear {
            out_features: hidden,
            in_features: cin * h * w,
        },
    ));
    s.push(relu("fc1_relu"));
    s.push(LayerSpec::new(
        "fc2",
        LayerKind::Linear {
            out_features: classes,
            in_features: hidden,
        },
    ));
    s
}

pub const VGG8_INPUT: [usize; 3] = [3, 8, 8];
pub const VGG8_WIDTHS: [usize; 6] = [64, 64, 128, 128, 256, 256];

/// The default desk-scale plain network.
pub fn vgg8(classes: usize) -> NetworkSpec {
    vgg8_with(VGG8_INPUT, VGG8_WIDTHS, 64, classes)
}

/// Stem plus three residual blocks. Each block's first conv is prunable;
/// the second conv and any projection shortcut feed the junction and are not.
pub fn resnet3_with(input: [usize; 3], width: usize, classes: usize) -> NetworkSpec {
    let mut s = NetworkSpec::new("resnet3", input, classes);
    s.push(conv("stem", input[0], width, 3, 1, 1));
    s.push(affine("stem_bn", width));
    s.push(relu("stem_relu"));
    let mut prev = "stem_relu".to_string();
    let mut cin = width;
    let (mut h, mut w) = (input[1], input[2]);
    for b in 1..=3usize {
        let (cout, stride) = if b == 1 { (width, 1) } else { (cin * 2, 2) };
        let p = format!("res{b}");
        // even extents only divide exactly under stride 2 with an even kernel
        let k = if stride == 1 { 3 } else { 4 };
        s.push(conv(&format!("{p}a"), cin, cout, k, stride, 1).from(&[&prev]).prunable());
        s.push(affine(&format!("{p}a_bn"), cout));
        s.push(relu(&format!("{p}a_relu")));
        s.push(conv(&format!("{p}b"), cout, cout, 3, 1, 1));
        s.push(affine(&format!("{p}b_bn"), cout));
        let shortcut = if stride == 1 && cin == cout {
            prev.clone()
        } else {
            s.push(conv(&format!("{p}_proj"), cin, cout, stride, stride, 0).from(&[&prev]));
            format!("{p}_proj")
        };
        s.push(LayerSpec::new(format!("{p}_add"), LayerKind::Add).from(&[&format!("{p}b_bn"), &shortcut]));
        s.push(relu(&format!("{p}_relu")));
        prev = format!("{p}_relu");
        cin = cout;
        h /= stride;
        w /= stride;
    }
    s.push(LayerSpec::new("flatten", LayerKind::Flatten));
    s.push(LayerSpec::new(
        "fc",
        LayerKind::Linear {
            out_features: classes,
            in_features: cin * h * w,
        },
    ));
    s
}

/// The default desk-scale residual network.
pub fn resnet3(classes: usize) -> NetworkSpec {
    resnet3_with(VGG8_INPUT, 16, classes)
}

pub const BUNDLED: [&str; 2] = ["vgg8", "resnet3"];

/// Looks up a bundled spec by name.
pub fn bundled(name: &str, classes: usize) -> Option<NetworkSpec> {
    bundled_for(name, VGG8_INPUT, classes)
}

/// A bundled architecture sized for `input` (`[C, H, W]`).
pub fn bundled_for(name: &str, input: [usize; 3], classes: usize) -> Option<NetworkSpec> {
    match name {
        "vgg8" => Some(vgg8_with(input, VGG8_WIDTHS, 64, classes)),
        "resnet3" => Some(resnet3_with(input, 16, classes)),
        _ => None,
    }
}
