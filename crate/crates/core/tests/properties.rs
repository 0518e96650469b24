//! Randomized invariants of the tensor kernels and the mimic losses.

mod common;

use common::rand_tensor;
use proptest::prelude::*;
use prunekit::recovery::{channel_distribution, mimic_js, mimic_kl};
use prunekit::tensor::init::rng;
use prunekit::tensor::ops::{conv2d_forward, softmax_channel};
use prunekit::tensor::Tensor;
use rand::Rng;

const TRIALS: usize = 10_000;
const LN2: f64 = std::f64::consts::LN_2;

fn site(v: &[f64]) -> Tensor<f64> {
    Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
}

fn random_site(r: &mut impl Rng, c: usize) -> Vec<f64> {
    let scale = [0.1, 1.0, 10.0, 100.0][r.gen_range(0..4)];
    (0..c).map(|_| r.gen_range(-1.0..1.0) * scale).collect()
}

/// Σ p·ln(p/q) from plain exponentials.
fn kl_direct(a: &[f64], b: &[f64]) -> f64 {
    let soft = |x: &[f64]| {
        let m = x.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect::<Vec<_>>()
    };
    let (p, q) = (soft(a), soft(b));
    p.iter().zip(&q).filter(|(p, _)| **p > 0.0).map(|(p, q)| p * (p / q).ln()).sum()
}

#[test]
fn divergence_properties() {
    let mut r = rng(2024);
    for _ in 0..TRIALS {
        let c = r.gen_range(2..=12);
        let a = random_site(&mut r, c);
        let b = random_site(&mut r, c);

        let p = channel_distribution(&a);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);

        let (ta, tb) = (site(&a), site(&b));
        let kl = mimic_kl(&ta, &tb).unwrap();
        assert!(kl >= 0.0, "{kl}");
        assert_eq!(mimic_kl(&ta, &ta).unwrap(), 0.0);
        // the loss floors probabilities at 1e-12 before the log; compare away from it
        let direct = kl_direct(&a, &b);
        let floor_free = channel_distribution(&b).iter().chain(&p).all(|&v| v > 1e-10);
        if floor_free {
            assert!((kl - direct).abs() <= 1e-9 * (1.0 + direct), "{kl} vs {direct}");
        }

        let js = mimic_js(&ta, &tb).unwrap();
        assert_eq!(js, mimic_js(&tb, &ta).unwrap());
        assert!((0.0..=LN2 + 1e-12).contains(&js), "{js}");
    }
}

#[test]
fn dead_and_hot_sites() {
    let p = channel_distribution(&[0.0f64; 5]);
    assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    let p = channel_distribution(&[1000.0f64, 0.0, 0.0]);
    assert!((p[0] - 1.0).abs() < 1e-12 && p[1] < 1e-300);
    let js = mimic_js(&site(&[1000.0, 0.0]), &site(&[0.0, 1000.0])).unwrap();
    assert!((js - LN2).abs() < 1e-9);
}

#[test]
fn runs_are_bit_identical() {
    let x = rand_tensor(&[2, 3, 6, 6], 1);
    let w = rand_tensor(&[4, 3, 3, 3], 2);
    let a = conv2d_forward(&x.cast::<f32>(), &w.cast::<f32>(), 1, 1).unwrap();
    let b = conv2d_forward(&x.cast::<f32>(), &w.cast::<f32>(), 1, 1).unwrap();
    assert_eq!(a, b);
    assert_eq!(rand_tensor(&[5], 9), rand_tensor(&[5], 9));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0, stride in 1usize..=2) {
        let x = rand_tensor(&[2, 3, 5, 5], seed);
        let y = rand_tensor(&[2, 3, 5, 5], seed.wrapping_add(1));
        let w = rand_tensor(&[4, 3, 3, 3], seed.wrapping_add(2));
        let mix = x.scale(a).add(&y.scale(b)).unwrap();
        let lhs = conv2d_forward(&mix, &w, stride, 1).unwrap();
        let rhs = conv2d_forward(&x, &w, stride, 1).unwrap().scale(a)
            .add(&conv2d_forward(&y, &w, stride, 1).unwrap().scale(b)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-10);
    }

    #[test]
    fn conv_sums_over_input_channels(seed in any::<u64>(), cin in 1usize..=5, k in prop::sample::select(vec![1usize, 3])) {
        let x = rand_tensor(&[2, cin, 4, 4], seed);
        let w = rand_tensor(&[3, cin, k, k], seed.wrapping_add(1));
        let whole = conv2d_forward(&x, &w, 1, k / 2).unwrap();
        let mut acc: Option<Tensor<f64>> = None;
        for c in 0..cin {
            let xc = x.index_select(1, &[c]).unwrap();
            let wc = w.index_select(1, &[c]).unwrap();
            let part = conv2d_forward(&xc, &wc, 1, k / 2).unwrap();
            acc = Some(match acc {
                None => part,
                Some(s) => s.add(&part).unwrap(),
            });
        }
        prop_assert!(whole.max_abs_diff(&acc.unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn softmax_ignores_a_shift(v in prop::collection::vec(-50.0f64..50.0, 1..16), shift in -1e3f64..1e3) {
        let p = softmax_channel(&v);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&x| x > 0.0 || v.len() > 1));
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        let q = softmax_channel(&shifted);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
