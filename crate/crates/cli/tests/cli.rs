use std::path::Path;
use std::process::{Command, Output};

use prunekit::pipeline::Ckpt;
use prunekit::runlog::read_log;

const TINY: &[&str] = &[
    "--set",
    "data.synth.train=128",
    "--set",
    "data.synth.test=64",
    "--set",
    "train.epochs=1",
    "--set",
    "train.batch_size=32",
    "--set",
    "importance.epochs=1",
    "--set",
    "recover.epochs=1",
    "--set",
    "finetune.epochs=1",
];

fn prunekit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prunekit"))
        .current_dir(dir)
        .env("RUST_BACKTRACE", "0")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = prunekit(dir, args);
    assert!(
        out.status.success(),
        "prunekit {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(TINY);
    v
}

#[test]
fn stage_commands_chain_through_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let m = ["--set", "model.name=resnet3"];
    let run = |args: &[&str]| {
        let mut v = with_tiny(args);
        v.extend_from_slice(&m);
        ok(d, &v)
    };
    run(&["train", "-o", "t.ckpt"]);
    run(&["learn-importance", "-i", "t.ckpt", "-o", "b.ckpt"]);
    run(&["plan", "-i", "b.ckpt", "-o", "plan.toml", "--set", "plan.crucial=2"]);
    run(&["prune", "-i", "b.ckpt", "--plan", "plan.toml", "-o", "p.ckpt"]);
    run(&["recover", "--teacher", "b.ckpt", "--student", "p.ckpt", "-o", "r.ckpt"]);
    run(&["finetune", "-i", "r.ckpt", "-o", "f.ckpt"]);
    run(&["eval", "-i", "f.ckpt"]);

    let events: Vec<String> = read_log(&d.join("run.jsonl"), None)
        .unwrap()
        .iter()
        .map(|r| r["event"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(
        events,
        ["train", "importance", "plan", "prune", "recover_epoch", "recover", "finetune", "eval"]
    );

    let pruned = Ckpt::load(&d.join("p.ckpt")).unwrap();
    let recovered = Ckpt::load(&d.join("r.ckpt")).unwrap();
    assert_eq!(pruned.stage, "prune");
    assert!(pruned.plan.is_some());
    assert!(!recovered.history.is_empty());
    for ck in [&pruned, &recovered] {
        assert_eq!(ck.toolkit_version, env!("CARGO_PKG_VERSION"));
        assert_eq!(ck.config["model"]["name"], "resnet3");
    }
    let plan_text = std::fs::read_to_string(d.join("plan.toml")).unwrap();
    assert!(plan_text.contains("toolkit_version") && plan_text.contains("[config"));

    let report = ok(
        d,
        &["report", "--log-file", "run.jsonl", "--checkpoint", "r.ckpt", "-o", "rep"],
    );
    assert!(report.contains("| prune |"));
    let loss = std::fs::read_to_string(d.join("rep/loss_vs_epoch.csv")).unwrap();
    assert!(loss.starts_with("source,epoch,tap,loss,accuracy"));
    assert!(loss.contains("res3_relu"));
}

#[test]
fn eval_twice_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &with_tiny(&["train", "-o", "t.ckpt", "--set", "model.name=resnet3"]));
    let a = ok(d, &with_tiny(&["eval", "-i", "t.ckpt"]));
    let b = ok(d, &with_tiny(&["eval", "-i", "t.ckpt"]));
    assert_eq!(a, b);
    assert!(a.contains("\"accuracy\""));
}

#[test]
fn pipeline_at_rate_zero_keeps_baseline_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &with_tiny(&[
            "pipeline",
            "-o",
            "out",
            "--set",
            "model.name=resnet3",
            "--set",
            "plan.target={kind=\"filter_fraction\",value=0.0}",
        ]),
    );
    let recs = read_log(&d.join("out/run.jsonl"), Some("pipeline")).unwrap();
    let r = &recs[0];
    assert_eq!(r["pruned_accuracy"], r["baseline_accuracy"]);
    assert_eq!(r["recovered_accuracy"], r["baseline_accuracy"]);
    assert_eq!(r["pruned_flops"], r["original_flops"]);
    for f in ["baseline.ckpt", "pruned.ckpt", "recovered.ckpt", "finetuned.ckpt", "plan.toml"] {
        assert!(d.join("out").join(f).exists(), "{f} missing");
    }
    assert!(d.join("out/report/report.md").exists());
}

#[test]
fn speedup_plan_on_the_bundled_vgg_reports_pruned_flops() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let small = ["--set", "data.synth.train=64", "--set", "data.synth.test=32"];
    let mut a = with_tiny(&["train", "-o", "t.ckpt"]);
    a.extend_from_slice(&small);
    ok(d, &a);
    let mut a = with_tiny(&["learn-importance", "-i", "t.ckpt", "-o", "b.ckpt"]);
    a.extend_from_slice(&small);
    ok(d, &a);
    let line = ok(
        d,
        &[
            "plan",
            "-i",
            "b.ckpt",
            "-o",
            "plan.toml",
            "--set",
            "plan.crucial=1",
            "--set",
            "plan.target={kind=\"speedup\",value=4.4}",
        ],
    );
    let rec: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    let pct = rec["pruned_pct"].as_f64().unwrap();
    assert!((pct - 77.3).abs() <= 0.5, "pruned {pct}%");
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = prunekit(d, &["eval", "-i", "missing.ckpt"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ckpt"));

    let out = prunekit(d, &["train", "-o", "t.ckpt", "--set", "train.epohcs=3"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid configuration"));

    std::fs::write(d.join("junk.ckpt"), b"not a checkpoint at all").unwrap();
    let out = prunekit(d, &["eval", "-i", "junk.ckpt"]);
    assert!(!out.status.success());

    let out = prunekit(d, &["report", "-o", "rep"]);
    assert!(!out.status.success());
}
