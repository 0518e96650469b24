//! Stage drivers shared by the command line and the end-to-end pipeline.
//!
//! Every stage takes checkpoints in, returns a checkpoint out, and writes one
//! or more records to the run log.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{Checkpoint, TOOLKIT_VERSION};
use crate::config::{DataConfig, DataSource, RunConfig};
use crate::data::{load_cifar10_dir, load_idx, synth, Dataset, Split};
use crate::error::{Error, Result};
use crate::importance::{layer_scores, learn_importance, ImportanceProfile, LayerScore};
use crate::netspec::flops::{compare, flops_total};
use crate::netspec::{init_params, zoo, Network, NetworkSpec, TapSet};
use crate::pruning::{apply_plan, build_plan, fold_beta, plan_stats, select_crucial, PlanStats, PruningPlan};
use crate::recovery::{finetune, iterative_recover_baseline, IterativeReport, MimicFunction, RecoverySession};
use crate::runlog::RunLog;
use crate::train::{evaluate, train_classifier};

/// Checkpoints produced by the pipeline hold 32-bit parameters.
pub type Ckpt = Checkpoint<f32>;

pub struct Datasets {
    pub train: Dataset<f32>,
    pub test: Dataset<f32>,
}

/// Loads both splits, applies the limits and mean-std normalizes them with
/// the training split's statistics.
pub fn load_data(cfg: &DataConfig) -> Result<Datasets> {
    let need_path = || {
        cfg.path
            .as_deref()
            .ok_or_else(|| Error::Config(format!("data source {:?} needs `data.path`", cfg.source)))
    };
    let (mut train, mut test) = match cfg.source {
        DataSource::Synth => (synth(&cfg.synth, Split::Train)?, synth(&cfg.synth, Split::Test)?),
        DataSource::Cifar10 => {
            let dir = need_path()?;
            (load_cifar10_dir(dir, Split::Train)?, load_cifar10_dir(dir, Split::Test)?)
        }
        DataSource::Idx => {
            let dir = need_path()?;
            (
                load_idx(
                    &dir.join("train-images-idx3-ubyte"),
                    &dir.join("train-labels-idx1-ubyte"),
                    Split::Train,
                )?,
                load_idx(
                    &dir.join("t10k-images-idx3-ubyte"),
                    &dir.join("t10k-labels-idx1-ubyte"),
                    Split::Test,
                )?,
            )
        }
    };
    if let Some(n) = cfg.train_limit {
        train = train.take(n)?;
    }
    if let Some(n) = cfg.test_limit {
        test = test.take(n)?;
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let stats = train.normalize();
    test.normalize_with(&stats)?;
    Ok(Datasets { train, test })
}

/// The configured network, sized for the data.
pub fn model_spec(cfg: &RunConfig, data: &Datasets) -> Result<NetworkSpec> {
    if let Some(p) = &cfg.model.spec {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        return NetworkSpec::from_toml(&text);
    }
    let s = data.train.sample_shape();
    let input = [s[0], s[1], s[2]];
    zoo::bundled_for(&cfg.model.name, input, data.train.classes())
        .ok_or_else(|| Error::Config(format!("unknown bundled model `{}`", cfg.model.name)))
}

fn open(ck: &Ckpt) -> Result<Network> {
    ck.spec.validate()
}

fn check_data(net: &Network, data: &Datasets) -> Result<()> {
    if data.train.sample_shape() != net.input_shape() || data.test.classes() != net.classes() {
        return Err(Error::Config(format!(
            "data samples {:?} with {} classes do not fit a network taking {:?} with {} classes",
            data.train.sample_shape(),
            data.test.classes(),
            net.input_shape(),
            net.classes()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub flops: u64,
}

pub fn evaluate_checkpoint(ck: &Ckpt, data: &Datasets, batch_size: usize) -> Result<EvalReport> {
    let net = open(ck)?;
    check_data(&net, data)?;
    Ok(EvalReport {
        accuracy: evaluate(&net, &ck.params, &data.test, batch_size)?,
        flops: flops_total(&net).total,
    })
}

fn stamp(ck: &mut Ckpt, cfg: &RunConfig, eval: &EvalReport) {
    ck.config = cfg.resolved();
    ck.seed = cfg.seed;
    ck.metrics.insert("accuracy".into(), eval.accuracy);
    ck.metrics.insert("flops".into(), eval.flops as f64);
}

pub fn train_stage(cfg: &RunConfig, data: &Datasets, log: &mut RunLog) -> Result<Ckpt> {
    let spec = model_spec(cfg, data)?;
    let net = spec.validate()?;
    check_data(&net, data)?;
    let mut params = init_params::<f32>(&net, cfg.seed);
    let report = train_classifier(&net, &mut params, &data.train, &cfg.train, false)?;
    let mut ck = Checkpoint::new("train", spec, params);
    ck.norm = data.train.norm.clone();
    let eval = evaluate_checkpoint(&ck, data, cfg.eval_batch_size)?;
    stamp(&mut ck, cfg, &eval);
    log.record(
        "train",
        json!({
            "steps": report.steps,
            "epoch_loss": report.epoch_loss,
            "accuracy": eval.accuracy,
            "flops": eval.flops,
        }),
    )?;
    Ok(ck)
}

fn scores_of(ck: &Ckpt, net: &Network, cfg: &RunConfig) -> Result<Vec<LayerScore>> {
    match &ck.importance {
        Some(p) => layer_scores(p, cfg.plan.reduction),
        None => layer_scores(&ImportanceProfile::<f32>::ones(net, 0.0), cfg.plan.reduction),
    }
}

pub fn importance_stage(ck: &Ckpt, cfg: &RunConfig, data: &Datasets, log: &mut RunLog) -> Result<Ckpt> {
    let net = open(ck)?;
    check_data(&net, data)?;
    let profile = learn_importance(&net, &ck.params, &data.train, &cfg.importance)?;
    let mut out = ck.clone();
    out.stage = "learn-importance".into();
    out.config = cfg.resolved();
    out.metrics.insert("mean_abs_beta".into(), profile.mean_abs());
    out.importance = Some(profile);
    let scores = scores_of(&out, &net, cfg)?;
    let p = out.importance.as_ref().expect("just set");
    log.record(
        "importance",
        json!({
            "lambda": p.lambda,
            "mean_abs_beta": p.mean_abs(),
            "steps": p.meta.as_ref().map(|m| m.steps),
            "scores": scores,
        }),
    )?;
    Ok(out)
}

pub fn plan_stage(ck: &Ckpt, cfg: &RunConfig, log: &mut RunLog) -> Result<(PruningPlan, PlanStats)> {
    let net = open(ck)?;
    let scores = scores_of(ck, &net, cfg)?;
    let crucial = select_crucial(&net, &scores, cfg.plan.crucial)?;
    let plan = build_plan(
        &net,
        &ck.params,
        ck.importance.as_ref(),
        &crucial,
        cfg.plan.target,
        cfg.plan.strategy,
        cfg.seed,
        cfg.plan.floor,
    )?;
    let stats = plan_stats(&plan, &net)?;
    let cmp = stats.flops.comparison.as_ref().expect("plan stats compare");
    log.record(
        "plan",
        json!({
            "target": plan.target,
            "strategy": plan.strategy,
            "crucial": plan.crucial.nodes,
            "pruned_pct": cmp.pruned_pct(),
            "speedup": cmp.speedup,
            "layers": stats.layers,
        }),
    )?;
    Ok((plan, stats))
}

pub fn prune_stage(ck: &Ckpt, plan: &PruningPlan, cfg: &RunConfig, data: &Datasets, log: &mut RunLog) -> Result<Ckpt> {
    let net = open(ck)?;
    let mut params = ck.params.clone();
    if cfg.plan.fold_beta {
        let profile = ck
            .importance
            .as_ref()
            .ok_or_else(|| Error::Config("fold_beta needs an importance profile".into()))?;
        fold_beta(&net, &mut params, profile)?;
    }
    let (pnet, pparams) = apply_plan(&net, &params, plan)?;
    let mut out = Checkpoint::new("prune", pnet.spec().clone(), pparams);
    out.importance = ck.importance.clone();
    out.plan = Some(plan.clone());
    out.norm = ck.norm.clone();
    let eval = evaluate_checkpoint(&out, data, cfg.eval_batch_size)?;
    stamp(&mut out, cfg, &eval);
    let cmp = compare(&flops_total(&net), &flops_total(&pnet))?;
    let c = cmp.comparison.as_ref().expect("comparison");
    out.metrics.insert("pruned_pct".into(), c.pruned_pct());
    log.record(
        "prune",
        json!({
            "accuracy": eval.accuracy,
            "flops": eval.flops,
            "original_flops": c.original_total,
            "pruned_pct": c.pruned_pct(),
        }),
    )?;
    Ok(out)
}

/// Recovery taps: configured ones, else the plan's crucial set.
fn recovery_taps(student: &Ckpt, cfg: &RunConfig) -> Result<TapSet> {
    if !cfg.recover.taps.is_empty() {
        return Ok(cfg.recover.taps.clone());
    }
    student
        .plan
        .as_ref()
        .map(|p| p.crucial.clone())
        .ok_or_else(|| Error::Config("no recovery taps configured and the student carries no plan".into()))
}

pub fn recover_stage(
    teacher: &Ckpt,
    student: &Ckpt,
    cfg: &RunConfig,
    data: &Datasets,
    log: &mut RunLog,
) -> Result<Ckpt> {
    let mut mimic = cfg.recover.clone();
    mimic.taps = recovery_taps(student, cfg)?;
    let tnet = open(teacher)?;
    let snet = open(student)?;
    check_data(&snet, data)?;
    let mut session = RecoverySession::new(tnet, teacher.params.clone(), snet, student.params.clone(), mimic.clone())?;
    session.recover(&data.train, Some(&data.test))?;
    for row in session.history.iter().filter(|r| r.tap == "mean") {
        log.record(
            "recover_epoch",
            json!({"epoch": row.epoch, "loss": row.loss, "accuracy": row.accuracy}),
        )?;
    }
    let history = std::mem::take(&mut session.history);
    let steps = session.steps;
    let (snet, sparams) = session.into_student();
    let mut out = Checkpoint::new("recover", snet.spec().clone(), sparams);
    out.importance = student.importance.clone();
    out.plan = student.plan.clone();
    out.norm = student.norm.clone();
    out.history = history;
    let eval = evaluate_checkpoint(&out, data, cfg.eval_batch_size)?;
    stamp(&mut out, cfg, &eval);
    let final_loss = out.history.iter().rev().find(|r| r.tap == "mean").map(|r| r.loss);
    out.metrics.insert("steps".into(), steps as f64);
    if let Some(l) = final_loss {
        out.metrics.insert("final_loss".into(), l);
    }
    log.record(
        "recover",
        json!({
            "function": mimic.function,
            "taps": mimic.taps.nodes,
            "epochs": mimic.epochs,
            "steps": steps,
            "final_loss": final_loss,
            "accuracy": eval.accuracy,
            "flops": eval.flops,
        }),
    )?;
    Ok(out)
}

pub fn finetune_stage(ck: &Ckpt, cfg: &RunConfig, data: &Datasets, log: &mut RunLog) -> Result<Ckpt> {
    let net = open(ck)?;
    check_data(&net, data)?;
    let mut out = ck.clone();
    out.stage = "finetune".into();
    let report = finetune(&net, &mut out.params, &data.train, &cfg.finetune)?;
    let eval = evaluate_checkpoint(&out, data, cfg.eval_batch_size)?;
    stamp(&mut out, cfg, &eval);
    log.record(
        "finetune",
        json!({
            "steps": report.steps,
            "epoch_loss": report.epoch_loss,
            "train_accuracy": report.epoch_accuracy,
            "accuracy": eval.accuracy,
            "flops": eval.flops,
        }),
    )?;
    Ok(out)
}

pub fn eval_stage(ck: &Ckpt, cfg: &RunConfig, data: &Datasets, log: &mut RunLog) -> Result<EvalReport> {
    let r = evaluate_checkpoint(ck, data, cfg.eval_batch_size)?;
    log.record(
        "eval",
        json!({"stage": ck.stage, "accuracy": r.accuracy, "flops": r.flops}),
    )?;
    Ok(r)
}

pub fn iterative_stage(
    teacher: &Ckpt,
    plan: &PruningPlan,
    cfg: &RunConfig,
    data: &Datasets,
    log: &mut RunLog,
) -> Result<(Ckpt, IterativeReport)> {
    let net = open(teacher)?;
    check_data(&net, data)?;
    let (pnet, params, report) = iterative_recover_baseline(&net, &teacher.params, plan, &data.train, &cfg.iterative)?;
    let mut out = Checkpoint::new("iterative", pnet.spec().clone(), params);
    out.plan = Some(plan.clone());
    out.norm = teacher.norm.clone();
    let eval = evaluate_checkpoint(&out, data, cfg.eval_batch_size)?;
    stamp(&mut out, cfg, &eval);
    out.metrics.insert("steps".into(), report.steps as f64);
    log.record(
        "iterative",
        json!({
            "layers": report.cycles.len(),
            "steps": report.steps,
            "cycles": report.cycles,
            "accuracy": eval.accuracy,
        }),
    )?;
    Ok((out, report))
}

/// A plan on disk, stamped with the configuration that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanArtifact {
    pub toolkit_version: String,
    pub plan: PruningPlan,
    pub config: RunConfig,
}

impl PlanArtifact {
    pub fn new(plan: &PruningPlan, cfg: &RunConfig) -> Self {
        PlanArtifact {
            toolkit_version: TOOLKIT_VERSION.to_string(),
            plan: plan.clone(),
            config: cfg.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::format("plan file", e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Reads a stamped plan file, or a bare plan.
    pub fn load(path: &Path) -> Result<PruningPlan> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        match toml::from_str::<PlanArtifact>(&text) {
            Ok(a) => Ok(a.plan),
            Err(_) => PruningPlan::from_toml(&text),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub baseline_accuracy: f64,
    pub pruned_accuracy: f64,
    pub recovered_accuracy: f64,
    pub finetuned_accuracy: f64,
    pub original_flops: u64,
    pub pruned_flops: u64,
    pub pruned_pct: f64,
    pub crucial: Vec<String>,
    pub recovery_steps: u64,
}

/// All stage outputs of one pipeline run.
pub struct PipelineRun {
    pub baseline: Ckpt,
    pub plan: PruningPlan,
    pub pruned: Ckpt,
    pub recovered: Ckpt,
    pub finetuned: Ckpt,
    pub report: PipelineReport,
}

/// train → learn-importance → plan → prune → recover → finetune, with an
/// evaluation after each weight-changing stage. Checkpoints go to `out_dir`
/// when given.
pub fn run_pipeline(cfg: &RunConfig, data: &Datasets, out_dir: Option<&Path>, log: &mut RunLog) -> Result<PipelineRun> {
    log.record("config", cfg.resolved())?;
    let trained = train_stage(cfg, data, log)?;
    let baseline = importance_stage(&trained, cfg, data, log)?;
    let (plan, _) = plan_stage(&baseline, cfg, log)?;
    let pruned = prune_stage(&baseline, &plan, cfg, data, log)?;
    let recovered = recover_stage(&baseline, &pruned, cfg, data, log)?;
    let finetuned = finetune_stage(&recovered, cfg, data, log)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        baseline.save(&dir.join("baseline.ckpt"))?;
        pruned.save(&dir.join("pruned.ckpt"))?;
        recovered.save(&dir.join("recovered.ckpt"))?;
        finetuned.save(&dir.join("finetuned.ckpt"))?;
        PlanArtifact::new(&plan, cfg).save(&dir.join("plan.toml"))?;
    }
    let report = PipelineReport {
        baseline_accuracy: baseline.metrics["accuracy"],
        pruned_accuracy: pruned.metrics["accuracy"],
        recovered_accuracy: recovered.metrics["accuracy"],
        finetuned_accuracy: finetuned.metrics["accuracy"],
        original_flops: baseline.metrics["flops"] as u64,
        pruned_flops: pruned.metrics["flops"] as u64,
        pruned_pct: pruned.metrics["pruned_pct"],
        crucial: plan.crucial.nodes.clone(),
        recovery_steps: recovered.metrics["steps"] as u64,
    };
    log.record("pipeline", serde_json::to_value(&report).expect("report serializes"))?;
    Ok(PipelineRun {
        baseline,
        plan,
        pruned,
        recovered,
        finetuned,
        report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub function: MimicFunction,
    pub taps: usize,
    pub tap_ids: Vec<String>,
    pub accuracy: f64,
    pub final_loss: f64,
    pub steps: u64,
}

/// Recovers the same pruned student under several (function, tap count)
/// variants. The `n` taps are the `n` best-scoring crucial nodes, always
/// including the final activation; they must lie within the plan's crucial set.
pub fn ablate(
    teacher: &Ckpt,
    pruned: &Ckpt,
    cfg: &RunConfig,
    data: &Datasets,
    variants: &[(MimicFunction, usize)],
    log: &mut RunLog,
) -> Result<Vec<AblationRow>> {
    let net = open(teacher)?;
    let scores = scores_of(teacher, &net, cfg)?;
    let crucial = &pruned
        .plan
        .as_ref()
        .ok_or_else(|| Error::Config("ablation needs a pruned checkpoint with a plan".into()))?
        .crucial;
    let mut rows = Vec::with_capacity(variants.len());
    for &(function, n) in variants {
        let taps = select_crucial(&net, &scores, n)?;
        if let Some(bad) = taps.nodes.iter().find(|t| !crucial.contains(t)) {
            return Err(Error::Config(format!(
                "tap `{bad}` for {n}-tap ablation lies outside the plan's crucial set"
            )));
        }
        let mut c = cfg.clone();
        c.recover.function = function;
        c.recover.taps = taps.clone();
        let mut quiet = RunLog::memory();
        let rec = recover_stage(teacher, pruned, &c, data, &mut quiet)?;
        let row = AblationRow {
            function,
            taps: n,
            tap_ids: taps.nodes,
            accuracy: rec.metrics["accuracy"],
            final_loss: rec.metrics.get("final_loss").copied().unwrap_or(f64::NAN),
            steps: rec.metrics["steps"] as u64,
        };
        log.record("ablation", serde_json::to_value(&row).expect("row serializes"))?;
        rows.push(row);
    }
    Ok(rows)
}
