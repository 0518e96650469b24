//! Recovery of a pruned student from its unpruned teacher.
//!
//! The student is trained to reproduce the teacher's post-activation outputs
//! at a set of tapped nodes, all at once, under one mimicking function. The
//! layer-by-layer reconstruction baseline lives here as well.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::netspec::exec::weight_name;
use crate::netspec::{backward, forward_trace, LayerKind, Network, TapSet, Trace};
use crate::pruning::{apply_plan, KeepMask, PruningPlan};
use crate::scalar::Scalar;
use crate::tensor::ops::softmax_channel;
use crate::tensor::{Adam, AdamConfig, Params, Tensor};
use crate::train::{evaluate, train_classifier, TrainConfig, TrainReport};

/// Floor applied inside logarithms of probabilities.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MimicFunction {
    Mse,
    Lasso,
    #[default]
    Kl,
    Js,
}

impl MimicFunction {
    pub const ALL: [MimicFunction; 4] = [Self::Mse, Self::Lasso, Self::Kl, Self::Js];

    pub fn name(self) -> &'static str {
        match self {
            Self::Mse => "mse",
            Self::Lasso => "lasso",
            Self::Kl => "kl",
            Self::Js => "js",
        }
    }

    /// Divergences between channel distributions only make sense with
    /// several taps including the last spatial activation.
    pub fn is_divergence(self) -> bool {
        matches!(self, Self::Kl | Self::Js)
    }
}

impl std::str::FromStr for MimicFunction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mimic function `{s}`")))
    }
}

/// How MSE and LASSO distances are reduced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Divide by the element count.
    #[default]
    Mean,
    /// Sum per sample, mean over the batch.
    Sum,
}

fn check_pair<T: Scalar>(teacher: &Tensor<T>, student: &Tensor<T>, op: &'static str) -> Result<()> {
    if teacher.shape() != student.shape() {
        return Err(Error::shape(
            op,
            format!("teacher {:?}, student {:?}", teacher.shape(), student.shape()),
        ));
    }
    if teacher.rank() < 2 {
        return Err(Error::shape(op, format!("tap of rank {} has no channel axis", teacher.rank())));
    }
    Ok(())
}

fn elementwise<T: Scalar>(
    teacher: &Tensor<T>,
    student: &Tensor<T>,
    norm: Normalization,
    op: &'static str,
    f: impl Fn(T) -> (T, T),
) -> Result<(T, Tensor<T>)> {
    check_pair(teacher, student, op)?;
    let denom = T::of(match norm {
        Normalization::Mean => teacher.len(),
        Normalization::Sum => teacher.shape()[0],
    } as f64);
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(student.len());
    for (&t, &s) in teacher.data().iter().zip(student.data()) {
        let (v, d) = f(s - t);
        total += v;
        grad.push(d / denom);
    }
    Ok((total / denom, Tensor::new(student.shape().to_vec(), grad)?))
}

/// Channel vectors at every (sample, spatial site), gathered from `[B, C, ...]`.
fn sites<T: Scalar>(x: &Tensor<T>) -> (usize, usize, Vec<Vec<T>>) {
    let c = x.shape()[1];
    let per: usize = x.shape()[2..].iter().product();
    let mut out = Vec::with_capacity(x.shape()[0] * per);
    for sample in x.data().chunks(c * per) {
        for s in 0..per {
            out.push((0..c).map(|k| sample[k * per + s]).collect());
        }
    }
    (c, per, out)
}

/// Inverse of [`sites`] for a gradient laid out per site.
fn unsites<T: Scalar>(shape: &[usize], c: usize, per: usize, g: &[Vec<T>]) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); shape.iter().product()];
    for (n, site) in g.iter().enumerate() {
        let (b, s) = (n / per, n % per);
        for (k, &v) in site.iter().enumerate() {
            data[b * c * per + k * per + s] = v;
        }
    }
    Tensor::new(shape.to_vec(), data)
}

/// Softmax over the channel axis at one spatial site.
pub fn channel_distribution<T: Scalar>(site: &[T]) -> Vec<T> {
    softmax_channel(site)
}

fn floored_ln<T: Scalar>(v: T, eps: T) -> T {
    v.max(eps).ln()
}

/// Backpropagates `∂L/∂q` through `q = softmax(z)`.
fn softmax_vjp<T: Scalar>(q: &[T], gq: &[T]) -> Vec<T> {
    let dot = q.iter().zip(gq).fold(T::zero(), |a, (&qi, &gi)| a + qi * gi);
    q.iter().zip(gq).map(|(&qi, &gi)| qi * (gi - dot)).collect()
}

/// `KL(p‖q)` with logs floored at `eps`. Clamped at 0 against rounding
/// when the two distributions nearly agree.
fn kl_site<T: Scalar>(p: &[T], q: &[T], eps: T) -> T {
    p.iter()
        .zip(q)
        .fold(T::zero(), |a, (&pi, &qi)| a + pi * (floored_ln(pi, eps) - floored_ln(qi, eps)))
        .max(T::zero())
}

fn divergence<T: Scalar>(
    teacher: &Tensor<T>,
    student: &Tensor<T>,
    eps: f64,
    op: &'static str,
    // returns the site loss and its gradient with respect to the student's channel values
    site_fn: impl Fn(&[T], &[T], T) -> (T, Vec<T>),
) -> Result<(T, Tensor<T>)> {
    check_pair(teacher, student, op)?;
    let eps = T::of(eps);
    let (c, per, ts) = sites(teacher);
    let (_, _, ss) = sites(student);
    let n = T::of(ts.len() as f64);
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(ss.len());
    for (t, s) in ts.iter().zip(&ss) {
        let p = channel_distribution(t);
        let q = channel_distribution(s);
        let (v, gq) = site_fn(&p, &q, eps);
        total += v;
        grads.push(gq.into_iter().map(|g| g / n).collect::<Vec<_>>());
    }
    Ok((total / n, unsites(student.shape(), c, per, &grads)?))
}

/// Mimic loss between a teacher tap and a student tap, with its gradient
/// with respect to the student tap.
pub fn mimic_loss_and_grad<T: Scalar>(
    f: MimicFunction,
    teacher: &Tensor<T>,
    student: &Tensor<T>,
    norm: Normalization,
    eps: f64,
) -> Result<(T, Tensor<T>)> {
    match f {
        MimicFunction::Mse => elementwise(teacher, student, norm, "mimic_mse", |d| (d * d, T::two() * d)),
        MimicFunction::Lasso => elementwise(teacher, student, norm, "mimic_lasso", |d| {
            let s = if d > T::zero() {
                T::one()
            } else if d < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            (d.abs(), s)
        }),
        MimicFunction::Kl => divergence(teacher, student, eps, "mimic_kl", |p, q, eps| {
            let g = if q.iter().all(|&qi| qi > eps) {
                // closed form; exactly zero when the distributions agree
                q.iter().zip(p).map(|(&qi, &pi)| qi - pi).collect()
            } else {
                let gq: Vec<T> = p
                    .iter()
                    .zip(q)
                    .map(|(&pi, &qi)| if qi > eps { -pi / qi } else { T::zero() })
                    .collect();
                softmax_vjp(q, &gq)
            };
            (kl_site(p, q, eps), g)
        }),
        MimicFunction::Js => divergence(teacher, student, eps, "mimic_js", |p, q, eps| {
            let m: Vec<T> = p.iter().zip(q).map(|(&a, &b)| (a + b) * T::half()).collect();
            // bounded by ln 2; the clamp only absorbs rounding
            let v = (T::half() * (kl_site(p, &m, eps) + kl_site(q, &m, eps))).min(T::of(std::f64::consts::LN_2));
            let gq = q
                .iter()
                .zip(&m)
                .map(|(&qi, &mi)| T::half() * (floored_ln(qi, eps) - floored_ln(mi, eps)))
                .collect::<Vec<_>>();
            (v, softmax_vjp(q, &gq))
        }),
    }
}

pub fn mimic_loss<T: Scalar>(f: MimicFunction, teacher: &Tensor<T>, student: &Tensor<T>) -> Result<T> {
    Ok(mimic_loss_and_grad(f, teacher, student, Normalization::Mean, LOG_FLOOR)?.0)
}

/// Mean squared difference (element-count normalized).
pub fn mimic_mse<T: Scalar>(teacher: &Tensor<T>, student: &Tensor<T>) -> Result<T> {
    mimic_loss(MimicFunction::Mse, teacher, student)
}

/// Mean absolute difference.
pub fn mimic_lasso<T: Scalar>(teacher: &Tensor<T>, student: &Tensor<T>) -> Result<T> {
    mimic_loss(MimicFunction::Lasso, teacher, student)
}

/// Mean over samples and sites of `KL(teacher ‖ student)` between channel distributions.
pub fn mimic_kl<T: Scalar>(teacher: &Tensor<T>, student: &Tensor<T>) -> Result<T> {
    mimic_loss(MimicFunction::Kl, teacher, student)
}

/// Mean over samples and sites of the Jensen-Shannon divergence between channel distributions.
pub fn mimic_js<T: Scalar>(teacher: &Tensor<T>, student: &Tensor<T>) -> Result<T> {
    mimic_loss(MimicFunction::Js, teacher, student)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MimicConfig {
    pub function: MimicFunction,
    pub taps: TapSet,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// The learning rate is multiplied by `lr_decay` every `lr_step` epochs.
    pub lr_step: usize,
    pub lr_decay: f64,
    pub seed: u64,
    pub eps: f64,
    pub normalization: Normalization,
}

impl Default for MimicConfig {
    fn default() -> Self {
        MimicConfig {
            function: MimicFunction::Kl,
            taps: TapSet::default(),
            epochs: 15,
            batch_size: 128,
            lr: 1e-3,
            lr_step: 5,
            lr_decay: 0.1,
            seed: 0,
            eps: LOG_FLOOR,
            normalization: Normalization::Mean,
        }
    }
}

impl MimicConfig {
    pub fn validate(&self, net: &Network) -> Result<Vec<usize>> {
        let idx = self.taps.resolve(net)?;
        if idx.is_empty() {
            return Err(Error::Config("recovery needs at least one tap".into()));
        }
        if self.function.is_divergence() {
            if idx.len() < 2 {
                return Err(Error::Config(format!(
                    "{} recovery needs at least 2 taps; the last activation alone does not constrain the student",
                    self.function.name()
                )));
            }
            let fin = net
                .final_activation()
                .ok_or_else(|| Error::Config("network has no spatial activation".into()))?;
            if !idx.contains(&fin) {
                return Err(Error::Config(format!(
                    "{} recovery requires the final activation `{}` among its taps",
                    self.function.name(),
                    net.id(fin)
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.eps.is_nan() || self.eps <= 0.0 || self.lr.is_nan() || self.lr < 0.0 {
            return Err(Error::Config("eps must be positive and lr non-negative".into()));
        }
        Ok(idx)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_step {
            0 => self.lr,
            s => self.lr * self.lr_decay.powi((epoch / s) as i32),
        }
    }
}

/// One line of recovery history; `tap` is `"mean"` for the averaged loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub tap: String,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

pub fn write_history(rows: &[HistoryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format("history", e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::format("history", e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format("history", e.to_string()))?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format("history", e.to_string()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconLoss<T> {
    pub total: T,
    pub per_tap: Vec<T>,
}

/// Linear layers form the classifier head.
pub fn is_head(net: &Network, param: &str) -> bool {
    net.order()
        .iter()
        .any(|&i| matches!(net.kind(i), LayerKind::Linear { .. }) && param == weight_name(net.id(i)))
}

/// Gradient seeds injected at tapped nodes.
type Seeds<T> = Vec<(usize, Tensor<T>)>;

pub struct RecoverySession<T> {
    pub teacher_net: Network,
    teacher: Params<T>,
    pub student_net: Network,
    pub student: Params<T>,
    pub config: MimicConfig,
    teacher_taps: Vec<usize>,
    student_taps: Vec<usize>,
    pub history: Vec<HistoryRow>,
    pub steps: u64,
}

impl<T: Scalar> RecoverySession<T> {
    /// The student's classifier head is overwritten with the teacher's and frozen.
    pub fn new(
        teacher_net: Network,
        teacher: Params<T>,
        student_net: Network,
        mut student: Params<T>,
        config: MimicConfig,
    ) -> Result<Self> {
        let teacher_taps = config.validate(&teacher_net)?;
        let student_taps = config.validate(&student_net)?;
        for (&a, &b) in teacher_taps.iter().zip(&student_taps) {
            if teacher_net.shape(a) != student_net.shape(b) {
                return Err(Error::InvalidTap {
                    id: teacher_net.id(a).to_string(),
                    reason: format!(
                        "teacher shape {:?} differs from student shape {:?}",
                        teacher_net.shape(a),
                        student_net.shape(b)
                    ),
                });
            }
        }
        for &i in teacher_net.order() {
            if !matches!(teacher_net.kind(i), LayerKind::Linear { .. }) {
                continue;
            }
            let name = weight_name(teacher_net.id(i));
            let w = teacher.get(&name)?.value.clone();
            let p = student.get_mut(&name)?;
            if p.value.shape() != w.shape() {
                return Err(Error::shape(
                    "recovery head",
                    format!("`{name}`: teacher {:?}, student {:?}", w.shape(), p.value.shape()),
                ));
            }
            p.value = w;
        }
        let mut teacher = teacher;
        teacher.set_trainable(|_| false);
        student.set_trainable(|n| n.ends_with(".weight") && !is_head(&student_net, n));
        Ok(RecoverySession {
            teacher_net,
            teacher,
            student_net,
            student,
            config,
            teacher_taps,
            student_taps,
            history: Vec::new(),
            steps: 0,
        })
    }

    pub fn teacher(&self) -> &Params<T> {
        &self.teacher
    }

    pub fn into_student(self) -> (Network, Params<T>) {
        (self.student_net, self.student)
    }

    fn teacher_taps(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let trace = forward_trace(&self.teacher_net, &self.teacher, x, None)?;
        Ok(self.teacher_taps.iter().map(|&i| trace.get(i).clone()).collect())
    }

    /// Mean of the per-tap mimic losses on one batch, plus the breakdown.
    pub fn reconstruction_loss(&self, x: &Tensor<T>) -> Result<ReconLoss<T>> {
        Ok(self.loss_and_seeds(x)?.0)
    }

    fn loss_and_seeds(&self, x: &Tensor<T>) -> Result<(ReconLoss<T>, Trace<T>, Seeds<T>)> {
        let targets = self.teacher_taps(x)?;
        let trace = forward_trace(&self.student_net, &self.student, x, None)?;
        let n = T::of(targets.len() as f64);
        let mut per_tap = Vec::with_capacity(targets.len());
        let mut seeds = Vec::with_capacity(targets.len());
        for (t, &si) in targets.iter().zip(&self.student_taps) {
            let (v, g) = mimic_loss_and_grad(
                self.config.function,
                t,
                trace.get(si),
                self.config.normalization,
                self.config.eps,
            )?;
            per_tap.push(v);
            seeds.push((si, g.scale(T::one() / n)));
        }
        let total = per_tap.iter().fold(T::zero(), |a, &b| a + b) / n;
        Ok((ReconLoss { total, per_tap }, trace, seeds))
    }

    /// Gradients of the reconstruction loss accumulated into the student's params.
    pub fn accumulate_grad(&mut self, x: &Tensor<T>) -> Result<ReconLoss<T>> {
        let (loss, trace, seeds) = self.loss_and_seeds(x)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite("reconstruction loss"));
        }
        self.student.zero_grad();
        backward(&self.student_net, &mut self.student, &trace, seeds, None, false)?;
        Ok(loss)
    }

    /// Trains the student on the reconstruction loss. With `eval`, accuracy
    /// on that set is recorded after every epoch.
    pub fn recover(&mut self, data: &Dataset<T>, eval: Option<&Dataset<T>>) -> Result<()> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let cfg = self.config.clone();
        let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
        let tap_ids = cfg.taps.nodes.clone();
        for epoch in 0..cfg.epochs {
            opt.set_lr(cfg.lr_at(epoch));
            let batches = data.epoch_batches(cfg.batch_size, cfg.seed, epoch as u64);
            let mut sums = vec![0.0; tap_ids.len() + 1];
            for idx in &batches {
                let (x, _) = data.batch(idx)?;
                let loss = self.accumulate_grad(&x)?;
                opt.step(&mut self.student)?;
                sums[0] += loss.total.as_f64();
                for (s, v) in sums[1..].iter_mut().zip(&loss.per_tap) {
                    *s += v.as_f64();
                }
            }
            let accuracy = match eval {
                Some(d) => Some(evaluate(&self.student_net, &self.student, d, 256)?),
                None => None,
            };
            let nb = batches.len() as f64;
            self.history.push(HistoryRow {
                epoch,
                tap: "mean".into(),
                loss: sums[0] / nb,
                accuracy,
            });
            for (id, s) in tap_ids.iter().zip(&sums[1..]) {
                self.history.push(HistoryRow {
                    epoch,
                    tap: id.clone(),
                    loss: s / nb,
                    accuracy,
                });
            }
        }
        self.steps += opt.steps();
        Ok(())
    }
}

/// Cross-entropy training of every weight, classifier included.
pub fn finetune<T: Scalar>(
    net: &Network,
    params: &mut Params<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    params.set_trainable(|n| n.ends_with(".weight"));
    train_classifier(net, params, data, cfg, true)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IterativeConfig {
    pub epochs_per_layer: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for IterativeConfig {
    fn default() -> Self {
        IterativeConfig {
            epochs_per_layer: 2,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCycle {
    pub layer: String,
    pub consumers: Vec<String>,
    pub first_loss: f64,
    pub last_loss: f64,
    pub steps: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterativeReport {
    pub cycles: Vec<LayerCycle>,
    pub steps: u64,
}

/// Layers whose weights read the output of `conv`: the next convs, or the
/// linear layer behind a flatten.
fn weighted_consumers(net: &Network, conv: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut stack = net.consumers(conv).to_vec();
    let mut seen = HashSet::new();
    while let Some(c) = stack.pop() {
        if !seen.insert(c) {
            continue;
        }
        match net.kind(c) {
            LayerKind::Conv { .. } | LayerKind::Linear { .. } => out.push(c),
            _ => stack.extend_from_slice(net.consumers(c)),
        }
    }
    out.sort_by_key(|&i| net.depth(i));
    out
}

/// Prunes one layer at a time in depth order; after each, retrains the
/// layers consuming it to reproduce the teacher's outputs at those layers
/// (before any activation), updating only their weights.
pub fn iterative_recover_baseline<T: Scalar>(
    teacher_net: &Network,
    teacher: &Params<T>,
    plan: &PruningPlan,
    data: &Dataset<T>,
    cfg: &IterativeConfig,
) -> Result<(Network, Params<T>, IterativeReport)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    apply_plan(teacher_net, teacher, plan)?;
    let mut net = teacher_net.clone();
    let mut params = teacher.clone();
    let mut report = IterativeReport::default();
    for layer in plan.pruned_layers(teacher_net) {
        let mut step = PruningPlan::identity(&net);
        step.masks.insert(layer.clone(), plan.masks[&layer].clone());
        for (id, m) in step.masks.iter_mut() {
            if *id != layer {
                *m = KeepMask::all(m.len());
            }
        }
        let (pnet, mut pparams) = apply_plan(&net, &params, &step)?;
        let li = pnet.index_of(&layer)?;
        let consumers = weighted_consumers(&pnet, li);
        let names: Vec<String> = consumers.iter().map(|&c| weight_name(pnet.id(c))).collect();
        pparams.set_trainable(|n| names.iter().any(|m| m == n));
        let teacher_idx: Vec<usize> = consumers
            .iter()
            .map(|&c| teacher_net.index_of(pnet.id(c)))
            .collect::<Result<_>>()?;

        let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
        let (mut first, mut last) = (f64::NAN, f64::NAN);
        for epoch in 0..cfg.epochs_per_layer {
            let batches = data.epoch_batches(cfg.batch_size, cfg.seed, epoch as u64);
            let mut sum = 0.0;
            for idx in &batches {
                let (x, _) = data.batch(idx)?;
                let t = forward_trace(teacher_net, teacher, &x, None)?;
                let s = forward_trace(&pnet, &pparams, &x, None)?;
                let n = T::of(consumers.len() as f64);
                let mut total = T::zero();
                let mut seeds = Vec::new();
                for (&sc, &tc) in consumers.iter().zip(&teacher_idx) {
                    let (v, g) = mimic_loss_and_grad(
                        MimicFunction::Mse,
                        t.get(tc),
                        s.get(sc),
                        Normalization::Mean,
                        LOG_FLOOR,
                    )?;
                    total += v / n;
                    seeds.push((sc, g.scale(T::one() / n)));
                }
                pparams.zero_grad();
                backward(&pnet, &mut pparams, &s, seeds, None, false)?;
                opt.step(&mut pparams)?;
                sum += total.as_f64();
            }
            let mean = sum / batches.len() as f64;
            if epoch == 0 {
                first = mean;
            }
            last = mean;
        }
        report.steps += opt.steps();
        report.cycles.push(LayerCycle {
            layer,
            consumers: consumers.iter().map(|&c| pnet.id(c).to_string()).collect(),
            first_loss: first,
            last_loss: last,
            steps: opt.steps(),
        });
        net = pnet;
        params = pparams;
    }
    params.set_trainable(|n| n.ends_with(".weight"));
    Ok((net, params, report))
}
