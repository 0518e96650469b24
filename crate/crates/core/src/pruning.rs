//! One-step global filter pruning.
//!
//! A plan holds one keep-mask per prunable conv. Crucial layers (the
//! producers of the recovery taps) and the final conv always keep every
//! filter; the rest compete in a single global pool ordered by `|β|`.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::importance::{ImportanceProfile, LayerScore};
use crate::netspec::exec::{scale_name, shift_name, weight_name};
use crate::netspec::flops::{compare, flops_total, flops_with_kept, FlopsReport};
use crate::netspec::{LayerKind, Network, TapSet};
use crate::scalar::Scalar;
use crate::tensor::init::rng;
use crate::tensor::Params;

/// Per-filter keep flags; serialized as a bitstring such as `"1101"`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeepMask(pub Vec<bool>);

impl KeepMask {
    pub fn all(n: usize) -> Self {
        KeepMask(vec![true; n])
    }

    pub fn kept(&self) -> usize {
        self.0.iter().filter(|&&k| k).count()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.0.iter().all(|&k| k)
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &k)| k)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn to_bits(&self) -> String {
        self.0.iter().map(|&k| if k { '1' } else { '0' }).collect()
    }

    pub fn from_bits(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                _ => Err(Error::format("keep mask", format!("unexpected `{c}`"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(KeepMask)
    }
}

impl Serialize for KeepMask {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_bits())
    }
}

impl<'de> Deserialize<'de> for KeepMask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        KeepMask::from_bits(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionStrategy {
    #[default]
    Beta,
    Random,
    FirstK,
    MaxResponse,
}

impl std::str::FromStr for SelectionStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(Self::Beta),
            "random" => Ok(Self::Random),
            "first-k" => Ok(Self::FirstK),
            "max-response" => Ok(Self::MaxResponse),
            _ => Err(Error::Config(format!("unknown selection strategy `{s}`"))),
        }
    }
}

/// Global pruning target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum PruneTarget {
    /// Fraction of the candidate filter pool to remove, in [0, 1).
    FilterFraction(f64),
    /// Fraction of total FLOPs to remove, in [0, 1).
    FlopsFraction(f64),
    /// Required FLOPs speed-up `original/pruned`, at least 1.
    Speedup(f64),
}

impl PruneTarget {
    /// FLOPs fraction to remove, for FLOPs-based targets.
    pub fn flops_fraction(&self) -> Option<f64> {
        match *self {
            PruneTarget::FilterFraction(_) => None,
            PruneTarget::FlopsFraction(f) => Some(f),
            PruneTarget::Speedup(s) => Some(1.0 - 1.0 / s),
        }
    }

    fn check(&self) -> Result<()> {
        let ok = match *self {
            PruneTarget::FilterFraction(r) | PruneTarget::FlopsFraction(r) => (0.0..1.0).contains(&r),
            PruneTarget::Speedup(s) => s.is_finite() && s >= 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("target {self:?} out of range")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub strategy: SelectionStrategy,
    pub target: PruneTarget,
    pub seed: u64,
    /// Minimum filters any layer keeps.
    pub floor: usize,
    /// Activations reconstructed during recovery; their producers stay full width.
    pub crucial: TapSet,
    /// Keep-mask per prunable conv id.
    pub masks: BTreeMap<String, KeepMask>,
}

impl PruningPlan {
    /// Plan that keeps every filter.
    pub fn identity(net: &Network) -> Self {
        PruningPlan {
            strategy: SelectionStrategy::Beta,
            target: PruneTarget::FilterFraction(0.0),
            seed: 0,
            floor: 1,
            crucial: TapSet::default(),
            masks: net
                .prunable_convs()
                .into_iter()
                .map(|i| (net.id(i).to_string(), KeepMask::all(net.shape(i)[0])))
                .collect(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.masks.values().all(KeepMask::is_full)
    }

    /// Conv ids with at least one removed filter, in execution order.
    pub fn pruned_layers(&self, net: &Network) -> Vec<String> {
        net.convs()
            .into_iter()
            .map(|i| net.id(i).to_string())
            .filter(|id| self.masks.get(id).is_some_and(|m| !m.is_full()))
            .collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format("pruning plan", e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format("pruning plan", e.to_string()))
    }
}

/// Picks the `n` highest-scoring units' activations. The final convolutional
/// stage's activation is always a member: if the top `n` miss it, it takes
/// the place of the lowest-ranked pick. Returned in depth order.
pub fn select_crucial(net: &Network, scores: &[LayerScore], n: usize) -> Result<TapSet> {
    if n == 0 {
        return Err(Error::Config("crucial set needs at least one node".into()));
    }
    if n > scores.len() {
        return Err(Error::Config(format!(
            "asked for {n} crucial nodes, only {} are eligible",
            scores.len()
        )));
    }
    let mut ranked: Vec<&LayerScore> = scores.iter().collect();
    ranked.sort_by_key(|s| s.rank);
    let mut picks: Vec<usize> = ranked[..n]
        .iter()
        .map(|s| net.index_of(&s.activation))
        .collect::<Result<_>>()?;
    let fin = net
        .final_activation()
        .ok_or_else(|| Error::Config("network has no spatial activation".into()))?;
    if !picks.contains(&fin) {
        *picks.last_mut().expect("n >= 1") = fin;
    }
    picks.sort_by_key(|&i| net.depth(i));
    let ids: Vec<&str> = picks.iter().map(|&i| net.id(i)).collect();
    Ok(TapSet::new(&ids))
}

/// Conv layers that must keep every filter: producers of crucial taps and the final conv.
pub fn fixed_layers(net: &Network, crucial: &TapSet) -> Result<HashSet<usize>> {
    let mut fixed = HashSet::new();
    for t in crucial.resolve(net)? {
        if let Some(c) = net.producer_conv(t) {
            fixed.insert(c);
        }
    }
    if let Some(f) = net.final_conv() {
        fixed.insert(f);
    }
    Ok(fixed)
}

/// `⌈x⌉`, tolerant of representation error just above an integer.
fn ceil_count(x: f64) -> usize {
    (x - 1e-9).ceil().max(0.0) as usize
}

/// Builds a global pruning plan.
///
/// `beta` strategy pools every filter of the non-fixed prunable layers,
/// orders them by `|β|` ascending (ties: shallower layer, then lower channel)
/// and removes from the front: `⌈r·pool⌉` filters for a filter-fraction
/// target, or until the FLOPs target is met. Baseline strategies prune every
/// candidate layer at one uniform rate.
#[allow(clippy::too_many_arguments)]
pub fn build_plan<T: Scalar>(
    net: &Network,
    params: &Params<T>,
    profile: Option<&ImportanceProfile<T>>,
    crucial: &TapSet,
    target: PruneTarget,
    strategy: SelectionStrategy,
    seed: u64,
    floor: usize,
) -> Result<PruningPlan> {
    target.check()?;
    if floor == 0 {
        return Err(Error::Config("per-layer floor must be at least 1".into()));
    }
    let fixed = fixed_layers(net, crucial)?;
    let candidates: Vec<usize> = net
        .prunable_convs()
        .into_iter()
        .filter(|i| !fixed.contains(i))
        .collect();
    for &c in &candidates {
        if net.shape(c)[0] < floor {
            return Err(Error::Infeasible(format!(
                "`{}` has {} filters, below the floor of {floor}",
                net.id(c),
                net.shape(c)[0]
            )));
        }
    }
    let mut plan = PruningPlan::identity(net);
    plan.strategy = strategy;
    plan.target = target;
    plan.seed = seed;
    plan.floor = floor;
    plan.crucial = crucial.clone();

    let removal = match strategy {
        SelectionStrategy::Beta => {
            let profile = profile
                .ok_or_else(|| Error::Config("beta strategy needs an importance profile".into()))?;
            beta_removals(net, profile, &candidates, target, floor, &fixed)?
        }
        _ => uniform_removals(net, params, &candidates, target, strategy, seed, floor, &fixed)?,
    };
    for (layer, drop) in removal {
        let m = plan.masks.get_mut(net.id(layer)).expect("prunable layer has a mask");
        for j in drop {
            m.0[j] = false;
        }
    }
    Ok(plan)
}

fn describe_fixed(net: &Network, fixed: &HashSet<usize>) -> String {
    let mut ids: Vec<&str> = fixed.iter().map(|&i| net.id(i)).collect();
    ids.sort();
    ids.join(", ")
}

fn beta_removals<T: Scalar>(
    net: &Network,
    profile: &ImportanceProfile<T>,
    candidates: &[usize],
    target: PruneTarget,
    floor: usize,
    fixed: &HashSet<usize>,
) -> Result<HashMap<usize, Vec<usize>>> {
    let mut pool: Vec<(T, usize, usize)> = Vec::new();
    for &c in candidates {
        let e = profile.entry(net.id(c)).ok_or_else(|| {
            Error::Config(format!("importance profile has no entry for `{}`", net.id(c)))
        })?;
        if e.beta.len() != net.shape(c)[0] {
            return Err(Error::shape(
                "build_plan",
                format!("`{}`: {} β entries for {} filters", net.id(c), e.beta.len(), net.shape(c)[0]),
            ));
        }
        pool.extend(e.beta.iter().enumerate().map(|(j, b)| (b.abs(), c, j)));
    }
    pool.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(net.depth(a.1).cmp(&net.depth(b.1)))
            .then(a.2.cmp(&b.2))
    });

    let mut kept: HashMap<usize, usize> = candidates.iter().map(|&c| (c, net.shape(c)[0])).collect();
    let mut removed: HashMap<usize, Vec<usize>> = HashMap::new();
    let original = flops_total(net).total as f64;
    let mut take = |layer: usize, ch: usize, kept: &mut HashMap<usize, usize>| -> bool {
        let k = kept.get_mut(&layer).expect("candidate");
        if *k <= floor {
            return false;
        }
        *k -= 1;
        removed.entry(layer).or_default().push(ch);
        true
    };
    match target {
        PruneTarget::FilterFraction(r) => {
            let goal = ceil_count(r * pool.len() as f64);
            let mut n = 0;
            for &(_, layer, ch) in &pool {
                if n == goal {
                    break;
                }
                if take(layer, ch, &mut kept) {
                    n += 1;
                }
            }
            if n < goal {
                return Err(Error::Infeasible(format!(
                    "removing {goal} of {} pooled filters violates the per-layer floor of {floor} (at most {n} removable)",
                    pool.len()
                )));
            }
        }
        _ => {
            let f = target.flops_fraction().expect("flops target");
            let reached = |kept: &HashMap<usize, usize>| {
                1.0 - flops_with_kept(net, kept) as f64 / original >= f
            };
            let mut met = reached(&kept);
            for &(_, layer, ch) in &pool {
                if met {
                    break;
                }
                if take(layer, ch, &mut kept) {
                    met = reached(&kept);
                }
            }
            if !met {
                let best = 1.0 - flops_with_kept(net, &kept) as f64 / original;
                return Err(Error::Infeasible(format!(
                    "FLOPs reduction of {:.2}% unreachable: full-width layers [{}] and a floor of {floor} filters per layer allow at most {:.2}%",
                    100.0 * f,
                    describe_fixed(net, fixed),
                    100.0 * best
                )));
            }
        }
    }
    Ok(removed)
}

/// Filters each candidate layer drops at uniform rate `r`.
fn uniform_counts(net: &Network, candidates: &[usize], r: f64, floor: usize) -> HashMap<usize, usize> {
    candidates
        .iter()
        .map(|&c| {
            let n = net.shape(c)[0];
            (c, ceil_count(r * n as f64).min(n - floor))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn uniform_removals<T: Scalar>(
    net: &Network,
    params: &Params<T>,
    candidates: &[usize],
    target: PruneTarget,
    strategy: SelectionStrategy,
    seed: u64,
    floor: usize,
    fixed: &HashSet<usize>,
) -> Result<HashMap<usize, Vec<usize>>> {
    let counts = match target {
        PruneTarget::FilterFraction(r) => uniform_counts(net, candidates, r, floor),
        _ => {
            let f = target.flops_fraction().expect("flops target");
            let original = flops_total(net).total as f64;
            let mut found = None;
            for step in 0..=1000 {
                let counts = uniform_counts(net, candidates, step as f64 / 1000.0, floor);
                let kept: HashMap<usize, usize> =
                    counts.iter().map(|(&c, &d)| (c, net.shape(c)[0] - d)).collect();
                if 1.0 - flops_with_kept(net, &kept) as f64 / original >= f {
                    found = Some(counts);
                    break;
                }
            }
            found.ok_or_else(|| {
                Error::Infeasible(format!(
                    "FLOPs reduction of {:.2}% unreachable at a uniform per-layer rate with full-width layers [{}] and floor {floor}",
                    100.0 * f,
                    describe_fixed(net, fixed)
                ))
            })?
        }
    };
    let mut out = HashMap::new();
    for &c in candidates {
        let n = net.shape(c)[0];
        let drop = counts[&c];
        if drop == 0 {
            continue;
        }
        let keep_n = n - drop;
        let keep: Vec<usize> = match strategy {
            SelectionStrategy::Random => {
                let mut idx: Vec<usize> = (0..n).collect();
                let mut r = rng(seed ^ (net.depth(c) as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
                idx.shuffle(&mut r);
                idx.truncate(keep_n);
                idx
            }
            SelectionStrategy::FirstK => (0..keep_n).collect(),
            SelectionStrategy::MaxResponse => {
                let w = &params.get(&weight_name(net.id(c)))?.value;
                let per = w.len() / n;
                let sums: Vec<T> = w.data().chunks(per).map(|f| f.iter().fold(T::zero(), |a, &v| a + v.abs())).collect();
                let mut idx: Vec<usize> = (0..n).collect();
                idx.sort_by(|&a, &b| {
                    sums[b]
                        .partial_cmp(&sums[a])
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(a.cmp(&b))
                });
                idx.truncate(keep_n);
                idx
            }
            SelectionStrategy::Beta => unreachable!("handled by beta_removals"),
        };
        let keep: HashSet<usize> = keep.into_iter().collect();
        out.insert(c, (0..n).filter(|j| !keep.contains(j)).collect());
    }
    Ok(out)
}

fn check_plan(net: &Network, plan: &PruningPlan) -> Result<()> {
    let fixed = fixed_layers(net, &plan.crucial)?;
    for (id, mask) in &plan.masks {
        let i = net.index_of(id)?;
        if fixed.contains(&i) && !mask.is_full() {
            return Err(Error::Config(format!(
                "`{id}` feeds a crucial tap or is the final conv and must keep every filter"
            )));
        }
        match net.kind(i) {
            LayerKind::Conv { out_channels, .. } if net.layer(i).prunable => {
                if mask.len() != *out_channels {
                    return Err(Error::shape(
                        "apply_plan",
                        format!("`{id}`: mask of {} for {out_channels} filters", mask.len()),
                    ));
                }
                if mask.kept() == 0 {
                    return Err(Error::Config(format!("`{id}`: mask removes every filter")));
                }
            }
            _ if mask.is_full() => {}
            _ => {
                return Err(Error::Config(format!(
                    "mask applied to non-prunable layer `{id}`"
                )))
            }
        }
    }
    Ok(())
}

/// Structurally removes masked filters: the conv's weight rows, and the
/// matching input slices of every downstream consumer (frozen affines, convs,
/// and linear layers behind a flatten). Kept filters copy their weights.
pub fn apply_plan<T: Scalar>(
    net: &Network,
    params: &Params<T>,
    plan: &PruningPlan,
) -> Result<(Network, Params<T>)> {
    check_plan(net, plan)?;
    let mut spec = net.spec().clone();
    let mut out = params.clone();
    for (id, mask) in &plan.masks {
        if mask.is_full() {
            continue;
        }
        let i = net.index_of(id)?;
        let keep = mask.kept_indices();
        let w = &out.get(&weight_name(id))?.value;
        let w = w.index_select(0, &keep)?;
        let p = out.get_mut(&weight_name(id))?;
        *p = crate::tensor::Param::new(w, p.trainable);
        if let LayerKind::Conv { out_channels, .. } = &mut spec.layers[i].kind {
            *out_channels = keep.len();
        }
        slice_consumers(net, &mut spec.layers, &mut out, i, &keep)?;
    }
    let pruned = spec.validate()?;
    Ok((pruned, out))
}

fn reslice<T: Scalar>(params: &mut Params<T>, name: &str, axis: usize, keep: &[usize]) -> Result<()> {
    let p = params.get_mut(name)?;
    let v = p.value.index_select(axis, keep)?;
    *p = crate::tensor::Param::new(v, p.trainable);
    Ok(())
}

fn slice_consumers<T: Scalar>(
    net: &Network,
    layers: &mut [crate::netspec::LayerSpec],
    params: &mut Params<T>,
    from: usize,
    keep: &[usize],
) -> Result<()> {
    let mut stack: Vec<usize> = net.consumers(from).to_vec();
    let mut seen = HashSet::new();
    while let Some(c) = stack.pop() {
        if !seen.insert(c) {
            continue;
        }
        let id = net.id(c).to_string();
        match &mut layers[c].kind {
            LayerKind::FrozenAffine { channels } => {
                *channels = keep.len();
                reslice(params, &scale_name(&id), 0, keep)?;
                reslice(params, &shift_name(&id), 0, keep)?;
                stack.extend_from_slice(net.consumers(c));
            }
            LayerKind::Relu | LayerKind::MaxPool => stack.extend_from_slice(net.consumers(c)),
            LayerKind::Conv { in_channels, .. } => {
                *in_channels = keep.len();
                reslice(params, &weight_name(&id), 1, keep)?;
            }
            LayerKind::Flatten => {
                let spatial: usize = net.shape(c)[0] / net.source_shape(net.sources(c)[0])[0];
                let cols: Vec<usize> = keep
                    .iter()
                    .flat_map(|&k| (k * spatial..(k + 1) * spatial).collect::<Vec<_>>())
                    .collect();
                for &l in net.consumers(c) {
                    let lid = net.id(l).to_string();
                    match &mut layers[l].kind {
                        LayerKind::Linear { in_features, .. } => {
                            *in_features = cols.len();
                            reslice(params, &weight_name(&lid), 1, &cols)?;
                        }
                        k => {
                            return Err(Error::Config(format!(
                                "cannot propagate pruning through flatten into {} `{lid}`",
                                k.name()
                            )))
                        }
                    }
                }
            }
            LayerKind::Add => {
                return Err(Error::Config(format!(
                    "inconsistent junction masks: pruned channels reach residual junction `{id}`"
                )))
            }
            LayerKind::Linear { .. } => {
                return Err(Error::Config(format!("unexpected linear consumer `{id}`")))
            }
        }
    }
    Ok(())
}

/// Multiplies each kept filter's output path by its learned `|β|` (into the
/// frozen affine when present, otherwise into the conv weights), for the
/// conv units covered by `profile`. Apply before [`apply_plan`].
pub fn fold_beta<T: Scalar>(net: &Network, params: &mut Params<T>, profile: &ImportanceProfile<T>) -> Result<()> {
    for e in &profile.entries {
        let i = net.index_of(&e.layer)?;
        if !net.is_conv(i) {
            continue;
        }
        let act = net.index_of(&e.activation)?;
        let affine = match net.sources(act) {
            [crate::netspec::Source::Node(j)] if matches!(net.kind(*j), LayerKind::FrozenAffine { .. }) => Some(*j),
            _ => None,
        };
        match affine {
            Some(a) => {
                for name in [scale_name(net.id(a)), shift_name(net.id(a))] {
                    let p = params.get_mut(&name)?;
                    for (v, b) in p.value.data_mut().iter_mut().zip(&e.beta) {
                        *v *= b.abs();
                    }
                }
            }
            None => {
                let p = params.get_mut(&weight_name(&e.layer))?;
                let per = p.value.len() / e.beta.len();
                for (row, b) in p.value.data_mut().chunks_mut(per).zip(&e.beta) {
                    row.iter_mut().for_each(|v| *v *= b.abs());
                }
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerKeep {
    pub layer: String,
    pub kept: usize,
    pub total: usize,
    pub rate: f64,
    pub fixed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanStats {
    pub layers: Vec<LayerKeep>,
    pub flops: FlopsReport,
}

/// Per-layer keep counts and rates, plus the FLOPs comparison the plan implies.
pub fn plan_stats(plan: &PruningPlan, net: &Network) -> Result<PlanStats> {
    check_plan(net, plan)?;
    let fixed = fixed_layers(net, &plan.crucial)?;
    let mut layers = Vec::new();
    for i in net.prunable_convs() {
        let id = net.id(i);
        let total = net.shape(i)[0];
        let k = plan.masks.get(id).map_or(total, KeepMask::kept);
        layers.push(LayerKeep {
            layer: id.to_string(),
            kept: k,
            total,
            rate: k as f64 / total as f64,
            fixed: fixed.contains(&i),
        });
    }
    let (pnet, _) = apply_plan(net, &crate::netspec::init_params::<f32>(net, 0), plan)?;
    Ok(PlanStats {
        layers,
        flops: compare(&flops_total(net), &flops_total(&pnet))?,
    })
}
