//! Channel importance learning.
//!
//! Every scored unit's post-activation output is multiplied channel-wise by
//! `|β|`, and `β` (initialized to ones) is trained against
//! `cross_entropy + λ·Σ|β|` with the network weights held fixed. The mean
//! `|β|` per unit becomes its layer score.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::netspec::{backward, forward_trace, ChannelScaling, Network};
use crate::scalar::Scalar;
use crate::tensor::ops::cross_entropy_with_grad;
use crate::tensor::{Adam, AdamConfig, Param, Params, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct BetaEntry<T> {
    /// Scored unit (conv id, or junction activation id).
    pub layer: String,
    /// Activation node the vector scales.
    pub activation: String,
    pub beta: Vec<T>,
}

impl<T: Scalar> BetaEntry<T> {
    pub fn mean_abs(&self) -> f64 {
        self.beta.iter().map(|b| b.abs().as_f64()).sum::<f64>() / self.beta.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMeta {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub steps: u64,
}

/// Learned importance vectors for every scored unit of a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ImportanceProfile<T> {
    pub lambda: f64,
    pub entries: Vec<BetaEntry<T>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<ImportanceMeta>,
}

impl<T: Scalar> ImportanceProfile<T> {
    /// All-ones vectors over every scored unit of `net`.
    pub fn ones(net: &Network, lambda: f64) -> Self {
        ImportanceProfile {
            lambda,
            entries: net
                .scored_units()
                .into_iter()
                .map(|u| BetaEntry {
                    layer: u.layer,
                    activation: u.activation,
                    beta: vec![T::one(); u.channels],
                })
                .collect(),
            meta: None,
        }
    }

    pub fn entry(&self, layer: &str) -> Option<&BetaEntry<T>> {
        self.entries.iter().find(|e| e.layer == layer)
    }

    pub fn entry_mut(&mut self, layer: &str) -> Option<&mut BetaEntry<T>> {
        self.entries.iter_mut().find(|e| e.layer == layer)
    }

    /// Mean `|β|` over every channel of every unit.
    pub fn mean_abs(&self) -> f64 {
        let (s, n) = self.entries.iter().fold((0.0, 0usize), |(s, n), e| {
            (s + e.beta.iter().map(|b| b.abs().as_f64()).sum::<f64>(), n + e.beta.len())
        });
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }

    /// `Σ |β|` over all units and channels.
    pub fn l1(&self) -> T {
        self.entries
            .iter()
            .flat_map(|e| e.beta.iter())
            .fold(T::zero(), |a, &b| a + b.abs())
    }

    /// Checks that the profile covers exactly the scored units of `net`.
    pub fn check(&self, net: &Network) -> Result<()> {
        for u in net.scored_units() {
            let e = self.entry(&u.layer).ok_or_else(|| {
                Error::Config(format!("importance profile lacks unit `{}`", u.layer))
            })?;
            if e.beta.len() != u.channels || e.activation != u.activation {
                return Err(Error::shape(
                    "importance profile",
                    format!(
                        "`{}`: {} factors at `{}`, network has {} channels at `{}`",
                        u.layer,
                        e.beta.len(),
                        e.activation,
                        u.channels,
                        u.activation
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Channel scaling for the forward pass.
    pub fn scaling(&self, net: &Network) -> Result<ChannelScaling<T>> {
        self.check(net)?;
        let mut s = ChannelScaling::new(net);
        for e in &self.entries {
            s.set(net, net.index_of(&e.activation)?, e.beta.clone())?;
        }
        Ok(s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format("importance profile", e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format("importance profile", e.to_string()))
    }

    pub fn cast<U: Scalar>(&self) -> ImportanceProfile<U> {
        ImportanceProfile {
            lambda: self.lambda,
            entries: self
                .entries
                .iter()
                .map(|e| BetaEntry {
                    layer: e.layer.clone(),
                    activation: e.activation.clone(),
                    beta: e.beta.iter().map(|&b| U::of(b.as_f64())).collect(),
                })
                .collect(),
            meta: self.meta.clone(),
        }
    }
}

/// Logits of the network with every scored activation scaled by `|β|`.
pub fn scaled_forward<T: Scalar>(
    net: &Network,
    params: &Params<T>,
    profile: &ImportanceProfile<T>,
    input: &Tensor<T>,
) -> Result<Tensor<T>> {
    let scaling = profile.scaling(net)?;
    Ok(forward_trace(net, params, input, Some(&scaling))?.logits().clone())
}

/// `cross_entropy(logits, labels) + λ·Σ|β|`.
pub fn importance_loss<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    profile: &ImportanceProfile<T>,
) -> Result<T> {
    let (ce, _) = cross_entropy_with_grad(logits, labels)?;
    Ok(ce + T::of(profile.lambda) * profile.l1())
}

/// Loss value and `∂loss/∂β` for one batch, weights fixed.
pub fn importance_loss_and_grad<T: Scalar>(
    net: &Network,
    params: &Params<T>,
    profile: &ImportanceProfile<T>,
    input: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Vec<Vec<T>>)> {
    let scaling = profile.scaling(net)?;
    let trace = forward_trace(net, params, input, Some(&scaling))?;
    let (ce, g) = cross_entropy_with_grad(trace.logits(), labels)?;
    let mut frozen = params.clone();
    frozen.set_trainable(|_| false);
    let sg = backward(net, &mut frozen, &trace, vec![(net.output(), g)], Some(&scaling), true)?;
    let lambda = T::of(profile.lambda);
    let mut grads = Vec::with_capacity(profile.entries.len());
    for e in &profile.entries {
        let i = net.index_of(&e.activation)?;
        let task = sg[i].clone().unwrap_or_else(|| vec![T::zero(); e.beta.len()]);
        grads.push(
            task.iter()
                .zip(&e.beta)
                .map(|(&gt, &b)| gt + lambda * sign0(b))
                .collect(),
        );
    }
    Ok((ce + lambda * profile.l1(), grads))
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

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImportanceConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        ImportanceConfig {
            lambda: 1.0,
            epochs: 2,
            lr: 1e-2,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Learns `β` for every scored unit with Adam over the whole training set.
/// Network weights are never modified.
pub fn learn_importance<T: Scalar>(
    net: &Network,
    params: &Params<T>,
    data: &Dataset<T>,
    cfg: &ImportanceConfig,
) -> Result<ImportanceProfile<T>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.epochs == 0 {
        return Err(Error::Config("importance learning needs at least one epoch".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if cfg.lambda < 0.0 {
        return Err(Error::Config("λ must be non-negative".into()));
    }
    let mut profile = ImportanceProfile::<T>::ones(net, cfg.lambda);
    let mut betas = Params::new();
    for e in &profile.entries {
        let t = Tensor::new(vec![e.beta.len()], e.beta.clone())?;
        betas.insert(e.layer.clone(), Param::new(t, true));
    }
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    for epoch in 0..cfg.epochs {
        for idx in data.epoch_batches(cfg.batch_size, cfg.seed, epoch as u64) {
            let (x, y) = data.batch(&idx)?;
            let (_, grads) = importance_loss_and_grad(net, params, &profile, &x, &y)?;
            for (e, g) in profile.entries.iter().zip(grads) {
                let p = betas.get_mut(&e.layer)?;
                p.grad = Tensor::new(vec![g.len()], g)?;
            }
            opt.step(&mut betas)?;
            for e in profile.entries.iter_mut() {
                e.beta = betas.get(&e.layer)?.value.data().to_vec();
            }
        }
    }
    profile.meta = Some(ImportanceMeta {
        epochs: cfg.epochs,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        steps: opt.steps(),
    });
    Ok(profile)
}

/// How a unit's `|β|` entries reduce to one score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreReduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer: String,
    pub activation: String,
    pub score: f64,
    /// 1 = highest score.
    pub rank: usize,
}

/// Scores every unit (mean `|β|` by default) and ranks them descending;
/// ties go to the shallower unit.
pub fn layer_scores<T: Scalar>(
    profile: &ImportanceProfile<T>,
    reduction: ScoreReduction,
) -> Result<Vec<LayerScore>> {
    if profile.entries.is_empty() {
        return Err(Error::Config("empty importance profile".into()));
    }
    let mut scores: Vec<LayerScore> = profile
        .entries
        .iter()
        .map(|e| {
            let sum: f64 = e.beta.iter().map(|b| b.abs().as_f64()).sum();
            let score = match reduction {
                ScoreReduction::Mean => sum / e.beta.len() as f64,
                ScoreReduction::Sum => sum,
            };
            LayerScore {
                layer: e.layer.clone(),
                activation: e.activation.clone(),
                score,
                rank: 0,
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // entries are stored shallow-to-deep, so a stable sort keeps depth order on ties
    order.sort_by(|&a, &b| scores[b].score.total_cmp(&scores[a].score));
    for (r, &i) in order.iter().enumerate() {
        scores[i].rank = r + 1;
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(betas: &[(&str, &[f64])]) -> ImportanceProfile<f64> {
        ImportanceProfile {
            lambda: 1.0,
            entries: betas
                .iter()
                .map(|(l, b)| BetaEntry {
                    layer: l.to_string(),
                    activation: format!("{l}_relu"),
                    beta: b.to_vec(),
                })
                .collect(),
            meta: None,
        }
    }

    #[test]
    fn mean_of_absolutes() {
        let s = layer_scores(&profile(&[("a", &[0.2, -0.4, 0.6])]), ScoreReduction::Mean).unwrap();
        assert!((s[0].score - 0.4).abs() < 1e-12);
        let s = layer_scores(&profile(&[("a", &[0.2, -0.4, 0.6])]), ScoreReduction::Sum).unwrap();
        assert!((s[0].score - 1.2).abs() < 1e-12);
    }

    #[test]
    fn all_ones_rank_by_depth() {
        let p = profile(&[("a", &[1.0; 3]), ("b", &[1.0; 5]), ("c", &[1.0; 2])]);
        let s = layer_scores(&p, ScoreReduction::Mean).unwrap();
        assert!(s.iter().all(|l| l.score == 1.0));
        assert_eq!(s.iter().map(|l| l.rank).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn ranks_descend_with_score() {
        let p = profile(&[("a", &[0.1]), ("b", &[0.9]), ("c", &[0.5])]);
        let s = layer_scores(&p, ScoreReduction::Mean).unwrap();
        assert_eq!(s.iter().map(|l| l.rank).collect::<Vec<_>>(), vec![3, 1, 2]);
    }

    #[test]
    fn empty_profile_errors() {
        assert!(layer_scores(&profile(&[]), ScoreReduction::Mean).is_err());
    }

    #[test]
    fn loss_adds_l1() {
        let logits = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let mut p = profile(&[("a", &[1.0; 4]), ("b", &[1.0; 6])]);
        let l = importance_loss(&logits, &[0], &p).unwrap();
        assert!((l - (std::f64::consts::LN_2 + 10.0)).abs() < 1e-12);
        p.lambda = 0.0;
        let l = importance_loss(&logits, &[0], &p).unwrap();
        assert_eq!(l, crate::tensor::ops::cross_entropy(&logits, &[0]).unwrap());
    }
}
