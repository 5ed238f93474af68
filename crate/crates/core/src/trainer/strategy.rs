//! Training variants behind one trait, selected by name at runtime.
//!
//! A strategy decides where consistency targets come from and what happens
//! around each step; the shared loop in the parent module does the rest.

use std::collections::BTreeMap;

use crate::data::{LabeledSet, Labels, UnlabeledSet};
use crate::error::{Error, Result};
use crate::model::{tap_values, Mode, Model, Params};
use crate::rng::{keyed, Stream};
use crate::tensor::Tensor;

use super::temporal::{te_target_update, TemporalStore};
use super::{ema_update, output_probs, predict, pseudo_label_select, TrainConfig, TrainerState};

/// Extra unsupervised term added next to the prediction consistency.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regularizer {
    None,
    /// Relation consistency on the row-normalized Gram matrix of features.
    Relation,
    /// Mean squared difference of the features themselves.
    Feature,
}

/// Teacher-side probabilities and tapped features for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub probs: Tensor,
    pub features: Tensor,
}

pub struct EpochContext<'a> {
    pub model: &'a Model,
    pub state: &'a TrainerState,
    pub labeled: &'a LabeledSet,
    pub unlabeled: &'a UnlabeledSet,
    pub cfg: &'a TrainConfig,
}

pub struct StepContext<'a> {
    pub model: &'a Model,
    pub state: &'a TrainerState,
    /// Second perturbed view, present when [`Strategy::needs_second_view`].
    pub second_view: Option<&'a Tensor>,
    pub ids: &'a [u64],
    pub step: u64,
    pub cfg: &'a TrainConfig,
    pub multi_label: bool,
}

pub trait Strategy: Send {
    fn name(&self) -> &'static str;

    fn regularizer(&self) -> Regularizer {
        Regularizer::None
    }

    /// Whether unlabeled inputs are gathered into the training batches.
    fn unlabeled_in_batches(&self) -> bool {
        true
    }

    fn needs_second_view(&self) -> bool {
        false
    }

    /// Whether the state must carry a per-sample prediction store.
    fn uses_temporal_store(&self) -> bool {
        false
    }

    /// Runs before the first step of an epoch. A returned set replaces the
    /// labeled pool for this epoch.
    fn begin_epoch(&mut self, _ctx: &EpochContext) -> Result<Option<LabeledSet>> {
        Ok(None)
    }

    /// Consistency targets for the current batch; `None` means the step is
    /// supervised only.
    fn targets(&mut self, ctx: &StepContext) -> Result<Option<Targets>>;

    /// Sees the student's (probabilities, features) for each step.
    fn observe(&mut self, _ids: &[u64], _probs: &Tensor, _features: &Tensor) -> Result<()> {
        Ok(())
    }

    fn end_step(&mut self, _state: &mut TrainerState, _cfg: &TrainConfig) -> Result<()> {
        Ok(())
    }

    fn end_epoch(&mut self, _state: &mut TrainerState) -> Result<()> {
        Ok(())
    }

    /// The parameters acting as the teacher, for evaluation and relation probes.
    fn teacher_params<'a>(&self, state: &'a TrainerState) -> &'a Params {
        &state.student
    }
}

type Factory = fn() -> Box<dyn Strategy>;

const REGISTRY: [(&str, Factory); 9] = [
    ("baseline", || Box::new(Supervised)),
    ("self_training", || Box::new(SelfTraining)),
    ("pi", || Box::new(PiModel::new("pi", Regularizer::None))),
    ("te", || Box::new(TemporalEnsemble::new("te", Regularizer::None))),
    ("mt", || Box::new(MeanTeacher::new("mt", Regularizer::None))),
    ("fc_mt", || Box::new(MeanTeacher::new("fc_mt", Regularizer::Feature))),
    ("src_pi", || Box::new(PiModel::new("src_pi", Regularizer::Relation))),
    ("src_te", || Box::new(TemporalEnsemble::new("src_te", Regularizer::Relation))),
    ("src_mt", || Box::new(MeanTeacher::new("src_mt", Regularizer::Relation))),
];

pub fn variant_names() -> Vec<&'static str> {
    REGISTRY.iter().map(|(n, _)| *n).collect()
}

pub fn create(name: &str) -> Result<Box<dyn Strategy>> {
    REGISTRY
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, f)| f())
        .ok_or_else(|| {
            Error::Config(format!(
                "unknown variant {name:?}; expected one of {}",
                variant_names().join(", ")
            ))
        })
}

/// Second stochastic forward pass without gradients.
fn forward_targets(ctx: &StepContext, params: &Params, x: &Tensor) -> Result<Targets> {
    let mode = if ctx.cfg.teacher_dropout { Mode::Train } else { Mode::Eval };
    let mut rng = keyed(ctx.cfg.seed, Stream::Dropout, &[ctx.step, 1]);
    let out = ctx.model.forward_values(params, x, mode, &mut rng)?;
    Ok(Targets {
        probs: output_probs(&out.logits, ctx.multi_label),
        features: tap_values(&out, ctx.cfg.tap)?,
    })
}

fn second_view<'a>(ctx: &StepContext<'a>) -> Result<&'a Tensor> {
    ctx.second_view
        .ok_or_else(|| Error::Contract("strategy needs a second view".into()))
}

struct Supervised;

impl Strategy for Supervised {
    fn name(&self) -> &'static str {
        "baseline"
    }

    fn unlabeled_in_batches(&self) -> bool {
        false
    }

    fn targets(&mut self, _ctx: &StepContext) -> Result<Option<Targets>> {
        Ok(None)
    }
}

/// Once per epoch, confident predictions of the previous-epoch model on the
/// unlabeled set become extra labeled samples.
struct SelfTraining;

impl Strategy for SelfTraining {
    fn name(&self) -> &'static str {
        "self_training"
    }

    fn unlabeled_in_batches(&self) -> bool {
        false
    }

    fn begin_epoch(&mut self, ctx: &EpochContext) -> Result<Option<LabeledSet>> {
        if ctx.state.epoch == 0 || ctx.unlabeled.is_empty() {
            return Ok(None);
        }
        let all: Vec<usize> = (0..ctx.unlabeled.len()).collect();
        let x = ctx.unlabeled.gather(&all)?;
        let multi = ctx.labeled.labels.is_multi();
        let probs = predict(ctx.model, &ctx.state.student, &x, multi)?;
        let thr = ctx.cfg.pseudo_label_threshold;
        let (idx, labels) = if multi {
            confident_multi_hot(&probs, thr)
        } else {
            let picked = pseudo_label_select(&probs, thr);
            let idx: Vec<usize> = picked.iter().map(|p| p.0).collect();
            (idx, Labels::Single(picked.iter().map(|p| p.1).collect()))
        };
        if idx.is_empty() {
            return Ok(None);
        }
        let pseudo = ctx.unlabeled.label_subset(&idx, labels);
        Ok(Some(ctx.labeled.concat(&pseudo)?))
    }

    fn targets(&mut self, _ctx: &StepContext) -> Result<Option<Targets>> {
        Ok(None)
    }
}

/// Multi-label analogue of pseudo-label selection: every class must be
/// confidently on (> thr) or off (< 1 - thr).
fn confident_multi_hot(probs: &Tensor, thr: f64) -> (Vec<usize>, Labels) {
    let k = probs.row_len();
    let mut idx = Vec::new();
    let mut hot = Vec::new();
    for i in 0..probs.rows() {
        let row = probs.row(i);
        if row.iter().all(|&p| p > thr || p < 1.0 - thr) {
            idx.push(i);
            hot.extend(row.iter().map(|&p| u8::from(p > thr)));
        }
    }
    (idx, Labels::Multi { classes: k, hot })
}

/// Targets from a second stochastic pass of the student itself.
struct PiModel {
    name: &'static str,
    reg: Regularizer,
}

impl PiModel {
    fn new(name: &'static str, reg: Regularizer) -> Self {
        Self { name, reg }
    }
}

impl Strategy for PiModel {
    fn name(&self) -> &'static str {
        self.name
    }

    fn regularizer(&self) -> Regularizer {
        self.reg
    }

    fn needs_second_view(&self) -> bool {
        true
    }

    fn targets(&mut self, ctx: &StepContext) -> Result<Option<Targets>> {
        forward_targets(ctx, &ctx.state.student, second_view(ctx)?).map(Some)
    }
}

/// Targets from per-sample running averages of past student outputs. Both
/// probabilities and tapped features are averaged so the relation variant has
/// an ensembled feature matrix to compare against.
struct TemporalEnsemble {
    name: &'static str,
    reg: Regularizer,
    pending: BTreeMap<u64, Vec<f64>>,
    widths: Option<(usize, usize)>,
}

impl TemporalEnsemble {
    fn new(name: &'static str, reg: Regularizer) -> Self {
        Self {
            name,
            reg,
            pending: BTreeMap::new(),
            widths: None,
        }
    }
}

impl Strategy for TemporalEnsemble {
    fn name(&self) -> &'static str {
        self.name
    }

    fn regularizer(&self) -> Regularizer {
        self.reg
    }

    fn uses_temporal_store(&self) -> bool {
        true
    }

    fn targets(&mut self, ctx: &StepContext) -> Result<Option<Targets>> {
        let (Some(store), Some((k, d))) = (&ctx.state.temporal, self.widths) else {
            return Ok(None);
        };
        let mut probs = Vec::with_capacity(ctx.ids.len() * k);
        let mut feats = Vec::with_capacity(ctx.ids.len() * d);
        for &id in ctx.ids {
            let Some(z) = store.target(id)? else {
                return Ok(None);
            };
            probs.extend_from_slice(&z[..k]);
            feats.extend_from_slice(&z[k..]);
        }
        let b = ctx.ids.len();
        Ok(Some(Targets {
            probs: Tensor::from_vec(&[b, k], probs),
            features: Tensor::from_vec(&[b, d], feats),
        }))
    }

    fn observe(&mut self, ids: &[u64], probs: &Tensor, features: &Tensor) -> Result<()> {
        let (k, d) = (probs.row_len(), features.row_len());
        match self.widths {
            None => self.widths = Some((k, d)),
            Some(w) if w != (k, d) => {
                return Err(Error::dim("temporal ensemble", &[w.0, w.1], &[k, d]));
            }
            Some(_) => {}
        }
        for (i, &id) in ids.iter().enumerate() {
            let mut z = probs.row(i).to_vec();
            z.extend_from_slice(features.row(i));
            self.pending.insert(id, z);
        }
        Ok(())
    }

    fn end_epoch(&mut self, state: &mut TrainerState) -> Result<()> {
        let Some(store) = state.temporal.as_mut() else {
            return Err(Error::Contract("temporal ensembling without a store".into()));
        };
        let z: Vec<(u64, Vec<f64>)> = std::mem::take(&mut self.pending).into_iter().collect();
        te_target_update(store, &z)?;
        Ok(())
    }
}

/// Targets from an exponential moving average of the student's weights.
struct MeanTeacher {
    name: &'static str,
    reg: Regularizer,
}

impl MeanTeacher {
    fn new(name: &'static str, reg: Regularizer) -> Self {
        Self { name, reg }
    }
}

impl Strategy for MeanTeacher {
    fn name(&self) -> &'static str {
        self.name
    }

    fn regularizer(&self) -> Regularizer {
        self.reg
    }

    fn needs_second_view(&self) -> bool {
        true
    }

    fn targets(&mut self, ctx: &StepContext) -> Result<Option<Targets>> {
        forward_targets(ctx, &ctx.state.teacher, second_view(ctx)?).map(Some)
    }

    fn end_step(&mut self, state: &mut TrainerState, cfg: &TrainConfig) -> Result<()> {
        ema_update(&mut state.teacher, &state.student, cfg.alpha)?;
        state.ema_updates += 1;
        Ok(())
    }

    fn teacher_params<'a>(&self, state: &'a TrainerState) -> &'a Params {
        &state.teacher
    }
}

/// Store used by the temporal variants, covering every training sample.
pub(super) fn temporal_store(labeled: &LabeledSet, unlabeled: &UnlabeledSet, rate: f64) -> TemporalStore {
    let ids = labeled.samples.ids().iter().chain(unlabeled.ids()).copied();
    TemporalStore::new(rate, ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_has_nine_distinct_variants() {
        let names = variant_names();
        assert_eq!(names.len(), 9);
        for n in &names {
            assert_eq!(create(n).unwrap().name(), *n);
        }
        let mut sorted = names.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 9);
    }

    #[test]
    fn unknown_variant_is_a_config_error() {
        assert!(matches!(create("srcmt"), Err(Error::Config(_))));
    }

    #[test]
    fn regularizers_follow_the_names() {
        for n in variant_names() {
            let want = if n.starts_with("src_") {
                Regularizer::Relation
            } else if n == "fc_mt" {
                Regularizer::Feature
            } else {
                Regularizer::None
            };
            assert_eq!(create(n).unwrap().regularizer(), want, "{n}");
        }
    }

    #[test]
    fn multi_hot_selection_needs_every_class_confident() {
        let p = Tensor::from_rows(&[&[0.95, 0.02], &[0.95, 0.5], &[0.05, 0.99]]);
        let (idx, labels) = confident_multi_hot(&p, 0.9);
        assert_eq!(idx, vec![0, 2]);
        assert_eq!(labels, Labels::Multi { classes: 2, hot: vec![1, 0, 0, 1] });
    }
}
