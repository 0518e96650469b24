mod common;

use common::rand_tensor;
use prunekit::data::{synth, Dataset, Split, SynthConfig};
use prunekit::netspec::{forward_with_taps, init_params, zoo, Network, TapSet};
use prunekit::pruning::{apply_plan, KeepMask, PruneTarget, PruningPlan, SelectionStrategy};
use prunekit::recovery::{
    iterative_recover_baseline, mimic_loss, mimic_mse, IterativeConfig, MimicConfig, MimicFunction,
    RecoverySession,
};
use prunekit::tensor::Params;

fn net() -> Network {
    zoo::vgg8_with([3, 8, 8], [6, 6, 8, 8, 10, 10], 12, 4).validate().unwrap()
}

fn data(n: usize) -> Dataset<f64> {
    let cfg = SynthConfig {
        classes: 4,
        train: n,
        test: 16,
        ..SynthConfig::default()
    };
    synth(&cfg, Split::Train).unwrap()
}

/// Keeps every other filter of the unfixed layers.
fn half_plan(net: &Network, crucial: &TapSet) -> PruningPlan {
    let mut plan = PruningPlan::identity(net);
    plan.crucial = crucial.clone();
    plan.strategy = SelectionStrategy::FirstK;
    plan.target = PruneTarget::FilterFraction(0.5);
    for id in ["conv1", "conv3", "conv4", "conv5"] {
        if crucial.contains(&id.replace("conv", "relu")) {
            continue;
        }
        let n = plan.masks[id].len();
        plan.masks.insert(id.into(), KeepMask((0..n).map(|j| j % 2 == 0).collect()));
    }
    plan
}

fn cfg(f: MimicFunction, taps: &[&str], epochs: usize, lr: f64) -> MimicConfig {
    MimicConfig {
        function: f,
        taps: TapSet::new(taps),
        epochs,
        batch_size: 16,
        lr,
        lr_step: 0,
        ..MimicConfig::default()
    }
}

fn session(plan: &PruningPlan, c: MimicConfig) -> (Params<f64>, RecoverySession<f64>) {
    let net = net();
    let teacher = init_params::<f64>(&net, 1);
    let (snet, student) = apply_plan(&net, &teacher, plan).unwrap();
    let s = RecoverySession::new(net, teacher.clone(), snet, student, c).unwrap();
    (teacher, s)
}

#[test]
fn unpruned_copy_is_a_fixed_point() {
    let net = net();
    for f in MimicFunction::ALL {
        let (_, mut s) = session(&PruningPlan::identity(&net), cfg(f, &["relu2", "relu6"], 2, 1e-2));
        let before = s.student.fingerprint();
        let x = rand_tensor(&[4, 3, 8, 8], 0);
        assert!(s.reconstruction_loss(&x).unwrap().total.abs() < 1e-12, "{f:?}");
        s.recover(&data(32), None).unwrap();
        assert!(s.history.iter().all(|h| h.loss.abs() < 1e-12), "{f:?}");
        // Adam with a zero gradient does not move
        assert_eq!(s.student.fingerprint(), before);
    }
}

#[test]
fn teacher_is_never_touched() {
    let net = net();
    let crucial = TapSet::new(&["relu2", "relu6"]);
    let (teacher, mut s) = session(&half_plan(&net, &crucial), cfg(MimicFunction::Kl, &["relu2", "relu6"], 2, 1e-2));
    s.recover(&data(32), None).unwrap();
    assert_eq!(s.teacher().fingerprint(), teacher.fingerprint());
    assert!(s.steps > 0);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let net = net();
    let crucial = TapSet::new(&["relu2", "relu6"]);
    let (_, mut s) = session(&half_plan(&net, &crucial), cfg(MimicFunction::Mse, &["relu2", "relu6"], 1, 0.0));
    let before = s.student.fingerprint();
    s.recover(&data(32), None).unwrap();
    assert_eq!(s.student.fingerprint(), before);
}

#[test]
fn total_is_the_mean_over_taps() {
    let net = net();
    let crucial = TapSet::new(&["relu2", "relu4", "relu6"]);
    let plan = half_plan(&net, &crucial);
    let x = rand_tensor(&[4, 3, 8, 8], 3);
    for f in MimicFunction::ALL {
        let (teacher, s) = session(&plan, cfg(f, &["relu2", "relu4", "relu6"], 1, 1e-3));
        let l = s.reconstruction_loss(&x).unwrap();
        let mean = l.per_tap.iter().sum::<f64>() / 3.0;
        assert!((l.total - mean).abs() < 1e-15);

        // independent recomputation of each tap's loss
        let (_, t) = forward_with_taps(&s.teacher_net, &teacher, &x, &crucial).unwrap();
        let (_, st) = forward_with_taps(&s.student_net, &s.student, &x, &crucial).unwrap();
        for k in 0..3 {
            assert!((mimic_loss(f, &t[k], &st[k]).unwrap() - l.per_tap[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn single_tap_mse_is_plain_mse() {
    let net = net();
    let crucial = TapSet::new(&["relu6"]);
    let (teacher, s) = session(&half_plan(&net, &crucial), cfg(MimicFunction::Mse, &["relu6"], 1, 1e-3));
    let x = rand_tensor(&[4, 3, 8, 8], 5);
    let (_, t) = forward_with_taps(&s.teacher_net, &teacher, &x, &crucial).unwrap();
    let (_, st) = forward_with_taps(&s.student_net, &s.student, &x, &crucial).unwrap();
    assert_eq!(s.reconstruction_loss(&x).unwrap().total, mimic_mse(&t[0], &st[0]).unwrap());
}

#[test]
fn divergences_need_two_taps_including_the_last() {
    // every bundled network, every single tap and every pair without the final activation
    for name in zoo::BUNDLED {
        let net = zoo::bundled(name, 10).unwrap().validate().unwrap();
        let fin = net.id(net.final_activation().unwrap()).to_string();
        let acts: Vec<String> = net.scored_units().into_iter().map(|u| u.activation).collect();
        for f in MimicFunction::ALL {
            for a in &acts {
                let single = cfg(f, &[a.as_str()], 1, 1e-3).validate(&net);
                assert_eq!(single.is_err(), f.is_divergence(), "{name} {f:?} {{{a}}}");
                for b in &acts {
                    if a == b {
                        continue;
                    }
                    let r = cfg(f, &[a.as_str(), b.as_str()], 1, 1e-3).validate(&net);
                    let ok = !f.is_divergence() || *a == fin || *b == fin;
                    assert_eq!(r.is_ok(), ok, "{name} {f:?} {{{a}, {b}}}");
                }
            }
        }
    }
}

#[test]
fn recovery_lowers_the_reconstruction_loss() {
    let net = net();
    let crucial = TapSet::new(&["relu2", "relu6"]);
    for f in MimicFunction::ALL {
        let (_, mut s) = session(&half_plan(&net, &crucial), cfg(f, &["relu2", "relu6"], 4, 3e-3));
        s.recover(&data(64), None).unwrap();
        let mean: Vec<f64> = s.history.iter().filter(|h| h.tap == "mean").map(|h| h.loss).collect();
        assert_eq!(mean.len(), 4);
        assert!(mean[3] < mean[0], "{f:?}: {mean:?}");
        assert_eq!(s.steps, 4 * 4);
    }
}

#[test]
fn iterative_baseline_on_trivial_plans() {
    let net = net();
    let teacher = init_params::<f64>(&net, 1);
    let d = data(32);
    let icfg = IterativeConfig {
        epochs_per_layer: 2,
        batch_size: 16,
        lr: 1e-3,
        seed: 0,
    };
    let (_, p, r) = iterative_recover_baseline(&net, &teacher, &PruningPlan::identity(&net), &d, &icfg).unwrap();
    assert_eq!(r.steps, 0);
    assert!(r.cycles.is_empty());
    assert_eq!(p.fingerprint(), teacher.fingerprint());

    let mut one = PruningPlan::identity(&net);
    one.masks.insert("conv3".into(), KeepMask((0..8).map(|j| j < 5).collect()));
    let (pnet, _, r) = iterative_recover_baseline(&net, &teacher, &one, &d, &icfg).unwrap();
    assert_eq!(r.cycles.len(), 1);
    assert_eq!(r.cycles[0].consumers, ["conv4"]);
    assert_eq!(r.steps, 2 * 2);
    assert_eq!(pnet.shape(pnet.index_of("conv3").unwrap())[0], 5);
}

#[test]
fn iterative_steps_grow_with_pruned_layers() {
    let net = net();
    let teacher = init_params::<f64>(&net, 1);
    let d = data(32);
    let icfg = IterativeConfig {
        epochs_per_layer: 1,
        batch_size: 16,
        lr: 1e-3,
        seed: 0,
    };
    for k in 1..=4 {
        let mut plan = PruningPlan::identity(&net);
        for id in ["conv1", "conv2", "conv3", "conv4"].iter().take(k) {
            let n = plan.masks[*id].len();
            plan.masks.insert(id.to_string(), KeepMask((0..n).map(|j| j != 0).collect()));
        }
        let (_, _, r) = iterative_recover_baseline(&net, &teacher, &plan, &d, &icfg).unwrap();
        assert_eq!(r.steps, 2 * k as u64);
    }
}
