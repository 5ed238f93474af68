//! Student/teacher training loop shared by every variant.
//!
//! Each step perturbs the batch, runs the student with gradients, asks the
//! strategy for consistency targets and minimizes
//! `L_s + λ(t) (L_c + β L_reg)` with Adam. The supervised term only sees the
//! labeled rows; the unsupervised terms see the whole batch.

mod optim;
mod strategy;
mod temporal;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Tape};
use crate::data::{plan_epoch, sample_batch, BatchPlan, LabeledSet, Labels, Split, UnlabeledSet};
use crate::error::{Error, Result};
use crate::losses::{
    consistency_mse, distance_matrix, feature_consistency_loss, inverse_frequency_weights,
    relation_matrix, src_loss, src_loss_value, weighted_cross_entropy, LossBreakdown,
    RelationMatrix, RELATION_EPS,
};
use crate::metrics::{classification_report, top1_accuracy, MetricsReport};
use crate::model::{tap_features, ArchSpec, Mode, Model, Params, TapPoint};
use crate::perturb::{perturb_view, PerturbConfig, View};
use crate::rng::{keyed, Stream};
use crate::tensor::Tensor;

pub use optim::Adam;
pub use strategy::{create, variant_names, EpochContext, Regularizer, StepContext, Strategy, Targets};
pub use temporal::{te_target_update, TemporalStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    Uniform,
    InverseFrequency,
}

/// Which parameters are evaluated on validation and test data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalModel {
    Student,
    Teacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: String,
    /// EMA decay of the teacher weights.
    pub alpha: f64,
    /// Weight of the relation (or feature) term inside the unsupervised loss.
    pub beta: f64,
    /// Epochs of Gaussian ramp-up for the unsupervised weight.
    pub ramp_epochs: usize,
    pub total_epochs: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub learning_rate: f64,
    /// Exponent of the polynomial per-epoch learning-rate decay.
    pub lr_decay_power: f64,
    pub pseudo_label_threshold: f64,
    pub te_ensemble_rate: f64,
    pub seed: u64,
    pub tap: TapPoint,
    /// Run the teacher's forward pass with dropout active.
    pub teacher_dropout: bool,
    /// Measure the relation loss for logging even when it is not optimized.
    pub monitor_src: bool,
    pub class_weighting: ClassWeighting,
    pub eval_model: EvalModel,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: "src_mt".into(),
            alpha: 0.99,
            beta: 1.0,
            ramp_epochs: 10,
            total_epochs: 40,
            batch_labeled: 12,
            batch_unlabeled: 36,
            learning_rate: 1e-4,
            lr_decay_power: 0.9,
            pseudo_label_threshold: 0.9,
            te_ensemble_rate: 0.99,
            seed: 0,
            tap: TapPoint::PostPool,
            teacher_dropout: true,
            monitor_src: false,
            class_weighting: ClassWeighting::InverseFrequency,
            eval_model: EvalModel::Student,
        }
    }
}

fn range_err(key: &str, want: &str, got: impl std::fmt::Display) -> Error {
    Error::Config(format!("train.{key} must be {want}, got {got}"))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        create(&self.variant)?;
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(range_err("alpha", "in [0, 1)", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(range_err("beta", "finite and >= 0", self.beta));
        }
        if self.total_epochs == 0 {
            return Err(range_err("total_epochs", ">= 1", self.total_epochs));
        }
        if self.ramp_epochs == 0 || self.ramp_epochs > self.total_epochs {
            return Err(range_err("ramp_epochs", "in [1, total_epochs]", self.ramp_epochs));
        }
        if self.batch_labeled == 0 {
            return Err(range_err("batch_labeled", ">= 1", self.batch_labeled));
        }
        if self.batch_unlabeled == 0 {
            return Err(range_err("batch_unlabeled", ">= 1", self.batch_unlabeled));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(range_err("learning_rate", "finite and > 0", self.learning_rate));
        }
        if !(self.lr_decay_power >= 0.0 && self.lr_decay_power.is_finite()) {
            return Err(range_err("lr_decay_power", "finite and >= 0", self.lr_decay_power));
        }
        if !(0.0..=1.0).contains(&self.pseudo_label_threshold) {
            return Err(range_err("pseudo_label_threshold", "in [0, 1]", self.pseudo_label_threshold));
        }
        if !(0.0..1.0).contains(&self.te_ensemble_rate) {
            return Err(range_err("te_ensemble_rate", "in [0, 1)", self.te_ensemble_rate));
        }
        Ok(())
    }

    fn batch_plan(&self) -> BatchPlan {
        BatchPlan {
            n_labeled: self.batch_labeled,
            n_unlabeled: self.batch_unlabeled,
        }
    }
}

/// Gaussian ramp-up `exp(-5 (1 - t/T)^2)`, held at exactly 1 from `t = T` on.
pub fn lambda_rampup(t: f64, ramp: f64) -> f64 {
    if t >= ramp {
        return 1.0;
    }
    let r = 1.0 - t / ramp;
    (-5.0 * r * r).exp()
}

/// Learning rate used throughout epoch `epoch`: `lr0 (1 - e/E)^power`.
pub fn learning_rate(lr0: f64, power: f64, epoch: usize, total: usize) -> f64 {
    lr0 * (1.0 - epoch as f64 / total as f64).powf(power)
}

/// `θ' ← α θ' + (1 - α) θ`, elementwise over every tensor.
pub fn ema_update(teacher: &mut Params, student: &Params, alpha: f64) -> Result<()> {
    if !teacher.same_layout(student) {
        return Err(Error::Contract("teacher and student parameter layouts differ".into()));
    }
    for (t, (_, s)) in teacher.tensors_mut().zip(student.iter()) {
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = alpha * *a + (1.0 - alpha) * b;
        }
    }
    Ok(())
}

/// Loss components of one step; `relation` is `None` when it was not computed.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub supervised: f64,
    pub consistency: f64,
    pub relation: Option<f64>,
}

/// `L = L_s + λ (L_c + β L_reg)`. With `β = 0` the relation term is left out
/// altogether rather than multiplied by zero.
pub fn total_loss(parts: LossParts, lambda: f64, beta: f64) -> LossBreakdown {
    let relation = if beta == 0.0 { 0.0 } else { parts.relation.unwrap_or(0.0) };
    let unsup = if beta == 0.0 {
        parts.consistency
    } else {
        parts.consistency + beta * relation
    };
    LossBreakdown {
        supervised: parts.supervised,
        consistency: parts.consistency,
        relation,
        total: parts.supervised + lambda * unsup,
        lambda,
        beta,
    }
}

/// Rows whose largest probability strictly exceeds `threshold`, paired with
/// their argmax (lowest index on ties).
pub fn pseudo_label_select(probs: &Tensor, threshold: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..probs.rows() {
        let row = probs.row(i);
        let mut best = 0;
        for (k, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = k;
            }
        }
        if row[best] > threshold {
            out.push((i, best));
        }
    }
    out
}

/// Softmax rows, or elementwise sigmoids for multi-label outputs.
pub fn output_probs(logits: &Tensor, multi_label: bool) -> Tensor {
    if multi_label {
        logits.map(crate::autodiff::sigmoid)
    } else {
        softmax_rows(logits)
    }
}

const PREDICT_CHUNK: usize = 256;

/// Eval-mode class probabilities for every row of `x`.
pub fn predict(model: &Model, params: &Params, x: &Tensor, multi_label: bool) -> Result<Tensor> {
    // eval mode draws nothing from the generator
    let mut rng = keyed(0, Stream::Dropout, &[]);
    let mut parts = Vec::new();
    let n = x.rows();
    for lo in (0..n).step_by(PREDICT_CHUNK) {
        let idx: Vec<usize> = (lo..(lo + PREDICT_CHUNK).min(n)).collect();
        let out = model.forward_values(params, &x.select_rows(&idx)?, Mode::Eval, &mut rng)?;
        parts.push(output_probs(&out.logits, multi_label));
    }
    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub student: Params,
    pub teacher: Params,
    pub optimizer: Adam,
    /// Epochs completed.
    pub epoch: usize,
    /// Optimization steps completed.
    pub step: u64,
    pub ema_updates: u64,
    pub temporal: Option<TemporalStore>,
}

impl TrainerState {
    /// Fresh student from the init stream; the teacher starts as an exact copy.
    pub fn new(model: &Model, seed: u64) -> Self {
        let student = model.init_params(&mut keyed(seed, Stream::Init, &[]));
        Self {
            teacher: student.clone(),
            optimizer: Adam::new(&student),
            student,
            epoch: 0,
            step: 0,
            ema_updates: 0,
            temporal: None,
        }
    }
}

/// Epoch means of the loss components plus validation scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Zero-based epoch index; `lambda` and `lr` are the values used in it.
    pub epoch: usize,
    pub l_s: f64,
    pub l_c: f64,
    /// Relation (or feature) term; measured-only when it was not optimized.
    pub l_src: f64,
    pub lambda: f64,
    pub lr: f64,
    pub val_auc: Option<f64>,
    pub val_acc: Option<f64>,
}

/// Data seen by one epoch of training.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub labeled: &'a LabeledSet,
    pub unlabeled: &'a UnlabeledSet,
    pub validation: Option<&'a LabeledSet>,
}

fn class_weights(labels: &Labels, classes: usize, scheme: ClassWeighting) -> Tensor {
    match scheme {
        ClassWeighting::Uniform => Tensor::filled(&[classes], 1.0),
        ClassWeighting::InverseFrequency => inverse_frequency_weights(labels, classes),
    }
}

fn tapped(tape: &Tape, out: &crate::model::ForwardOutput, tap: TapPoint) -> Result<Tensor> {
    match tap {
        TapPoint::PostPool => Ok(tape.value(out.post_pool).clone()),
        TapPoint::PrePool => out
            .pre_pool
            .map(|v| tape.value(v).flatten_rows())
            .ok_or(Error::UnsupportedTap("pre_pool")),
    }
}

/// Top-1 accuracy for single-label data, micro one-vs-rest accuracy otherwise.
fn headline_accuracy(probs: &Tensor, labels: &Labels, report: &MetricsReport) -> f64 {
    match labels {
        Labels::Single(ys) => top1_accuracy(probs, ys),
        Labels::Multi { .. } => report.accuracy,
    }
}

/// One pass over the training data.
pub fn train_epoch(
    model: &Model,
    state: &mut TrainerState,
    strategy: &mut dyn Strategy,
    data: TrainData,
    cfg: &TrainConfig,
    perturb: &PerturbConfig,
) -> Result<CurvePoint> {
    let epoch = state.epoch;
    let lr = learning_rate(cfg.learning_rate, cfg.lr_decay_power, epoch, cfg.total_epochs);
    let lambda = lambda_rampup(epoch as f64, cfg.ramp_epochs as f64);
    let pool = strategy.begin_epoch(&EpochContext {
        model,
        state,
        labeled: data.labeled,
        unlabeled: data.unlabeled,
        cfg,
    })?;
    let labeled = pool.as_ref().unwrap_or(data.labeled);
    if labeled.is_empty() {
        return Err(Error::Config("labeled split is empty".into()));
    }
    let multi = labeled.labels.is_multi();
    let classes = model.spec().num_classes;
    let weights = class_weights(&labeled.labels, classes, cfg.class_weighting);
    let plan = plan_epoch(
        labeled.len(),
        data.unlabeled.len(),
        cfg.batch_plan(),
        cfg.seed,
        epoch as u64,
    )?;
    let reg = strategy.regularizer();
    let (mut sum_s, mut sum_c, mut sum_r) = (0.0, 0.0, 0.0);

    for idx in &plan {
        let batch = sample_batch(labeled, data.unlabeled, idx, strategy.unlabeled_in_batches())?;
        let ids = batch.ids();
        let step = state.step;
        let (view_s, _) = perturb_view(&batch.inputs, &ids, perturb, cfg.seed, step, View::Student)?;
        let view_t = if strategy.needs_second_view() {
            Some(perturb_view(&batch.inputs, &ids, perturb, cfg.seed, step, View::Teacher)?.0)
        } else {
            None
        };
        let targets = strategy.targets(&StepContext {
            model,
            state,
            second_view: view_t.as_ref(),
            ids: &ids,
            step,
            cfg,
            multi_label: multi,
        })?;

        let mut tape = Tape::new();
        let pv = state.student.attach(&mut tape, true);
        let x = tape.constant(view_s);
        let mut drng = keyed(cfg.seed, Stream::Dropout, &[step, 0]);
        let out = model.forward(&mut tape, &pv, x, Mode::Train, &mut drng)?;
        let n_l = batch.n_labeled();
        let logits_l = if n_l == batch.len() {
            out.logits
        } else {
            tape.slice_rows(out.logits, 0, n_l)?
        };
        let l_s = weighted_cross_entropy(&mut tape, logits_l, &batch.labels, &weights)?;
        let probs = if multi {
            tape.sigmoid(out.logits)?
        } else {
            tape.softmax(out.logits)?
        };

        let mut parts = LossParts {
            supervised: tape.value(l_s).item(),
            ..LossParts::default()
        };
        let mut monitored = None;
        let mut loss = l_s;
        if let Some(t) = &targets {
            let pt = tape.constant(t.probs.clone());
            let l_c = consistency_mse(&mut tape, probs, pt)?;
            parts.consistency = tape.value(l_c).item();
            let mut unsup = l_c;
            if reg != Regularizer::None && cfg.beta != 0.0 {
                let fs = tap_features(&mut tape, &out, cfg.tap)?;
                let ft = tape.constant(t.features.clone());
                let l_r = match reg {
                    Regularizer::Relation => src_loss(&mut tape, fs, ft)?,
                    _ => feature_consistency_loss(&mut tape, fs, ft)?,
                };
                parts.relation = Some(tape.value(l_r).item());
                let weighted = tape.scale(l_r, cfg.beta);
                unsup = tape.add(l_c, weighted)?;
            } else if cfg.monitor_src {
                monitored = Some(src_loss_value(&tapped(&tape, &out, cfg.tap)?, &t.features)?);
            }
            let scaled = tape.scale(unsup, lambda);
            loss = tape.add(l_s, scaled)?;
        }
        let breakdown = total_loss(parts, lambda, cfg.beta);
        if !breakdown.total.is_finite() {
            return Err(Error::Numeric("training loss is not finite"));
        }

        let grads = tape.backward(loss)?;
        let g: Vec<&Tensor> = pv.vars.iter().map(|&v| grads.wrt(v)).collect();
        strategy.observe(&ids, tape.value(probs), &tapped(&tape, &out, cfg.tap)?)?;
        state.optimizer.step(&mut state.student, &g, lr)?;
        strategy.end_step(state, cfg)?;
        state.step += 1;

        sum_s += breakdown.supervised;
        sum_c += breakdown.consistency;
        sum_r += monitored.unwrap_or(breakdown.relation);
    }
    strategy.end_epoch(state)?;
    state.epoch += 1;

    let (mut val_auc, mut val_acc) = (None, None);
    if let Some(val) = data.validation.filter(|v| !v.is_empty()) {
        let params = eval_params(state, strategy, cfg);
        let probs = predict(model, params, &val.samples.all()?, multi)?;
        let report = classification_report(&probs, &val.labels)?;
        val_acc = Some(headline_accuracy(&probs, &val.labels, &report));
        val_auc = Some(report.auc);
    }
    let steps = plan.len() as f64;
    Ok(CurvePoint {
        epoch,
        l_s: sum_s / steps,
        l_c: sum_c / steps,
        l_src: sum_r / steps,
        lambda,
        lr,
        val_auc,
        val_acc,
    })
}

fn eval_params<'a>(state: &'a TrainerState, strategy: &dyn Strategy, cfg: &TrainConfig) -> &'a Params {
    match cfg.eval_model {
        EvalModel::Student => &state.student,
        EvalModel::Teacher => strategy.teacher_params(state),
    }
}

/// Student and teacher relation matrices of a probe batch after some epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationDump {
    pub epoch: usize,
    pub student: RelationMatrix,
    pub teacher: RelationMatrix,
    /// `clip(3 |R_s - R_t|, 0, 1)`.
    pub distance: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    /// Epoch indices after which relation matrices are dumped.
    pub dump_epochs: Vec<usize>,
    pub probe_size: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            dump_epochs: Vec::new(),
            probe_size: 96,
        }
    }
}

/// Outcome of training one variant on one split.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub variant: String,
    pub curves: Vec<CurvePoint>,
    pub test: MetricsReport,
    /// Top-1 test accuracy; `None` for multi-label data.
    pub test_top1: Option<f64>,
    pub dumps: Vec<RelationDump>,
    pub state: TrainerState,
    pub unlabeled_reads: usize,
}

/// Class-balanced probe drawn from `set`, ordered by class so block structure
/// shows up in the relation matrices.
fn probe_indices(labels: &Labels, classes: usize, size: usize) -> Vec<usize> {
    let n = labels.len();
    let primary = |i: usize| match labels {
        Labels::Single(ys) => ys[i],
        Labels::Multi { classes: k, hot } => (0..*k).find(|&c| hot[i * k + c] == 1).unwrap_or(*k),
    };
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes + 1];
    for i in 0..n {
        by_class[primary(i)].push(i);
    }
    let mut picked = Vec::new();
    let mut round = 0;
    while picked.len() < size.min(n) {
        for members in &by_class {
            if let Some(&i) = members.get(round) {
                if picked.len() < size {
                    picked.push(i);
                }
            }
        }
        round += 1;
    }
    picked.sort_by_key(|&i| (primary(i), i));
    picked
}

fn relation_dump(
    model: &Model,
    state: &TrainerState,
    strategy: &dyn Strategy,
    probe: &LabeledSet,
    idx: &[usize],
    cfg: &TrainConfig,
    perturb: &PerturbConfig,
) -> Result<RelationDump> {
    let x = probe.samples.gather(idx)?;
    let ids: Vec<u64> = idx.iter().map(|&i| probe.samples.ids()[i]).collect();
    // a step key no training step can reach
    let key = u64::MAX - state.epoch as u64;
    let feats = |params: &Params, view: View| -> Result<Tensor> {
        let (v, _) = perturb_view(&x, &ids, perturb, cfg.seed, key, view)?;
        let out = model.forward_values(params, &v, Mode::Eval, &mut keyed(cfg.seed, Stream::Dropout, &[key]))?;
        crate::model::tap_values(&out, cfg.tap)
    };
    let student = relation_matrix(&feats(&state.student, View::Student)?, RELATION_EPS)?;
    let teacher = relation_matrix(&feats(strategy.teacher_params(state), View::Teacher)?, RELATION_EPS)?;
    let distance = distance_matrix(&student, &teacher, 3.0)?;
    Ok(RelationDump {
        epoch: state.epoch - 1,
        student,
        teacher,
        distance,
    })
}

/// Trains `cfg.variant` from scratch on `split` and scores it on the test part.
pub fn run_variant(
    cfg: &TrainConfig,
    arch: &ArchSpec,
    perturb: &PerturbConfig,
    split: &Split,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    cfg.validate()?;
    perturb.validate()?;
    let model = Model::new(arch.clone())?;
    let reads_before = split.unlabeled.reads();
    let mut strategy = create(&cfg.variant)?;
    let mut state = TrainerState::new(&model, cfg.seed);
    if strategy.uses_temporal_store() {
        state.temporal = Some(strategy::temporal_store(
            &split.labeled,
            &split.unlabeled,
            cfg.te_ensemble_rate,
        ));
    }
    let data = TrainData {
        labeled: &split.labeled,
        unlabeled: &split.unlabeled,
        validation: Some(&split.validation),
    };
    let probe_idx = probe_indices(&split.validation.labels, arch.num_classes, opts.probe_size);
    let mut curves = Vec::with_capacity(cfg.total_epochs);
    let mut dumps = Vec::new();
    for e in 0..cfg.total_epochs {
        curves.push(train_epoch(&model, &mut state, strategy.as_mut(), data, cfg, perturb)?);
        if opts.dump_epochs.contains(&e) && probe_idx.len() >= 2 {
            dumps.push(relation_dump(
                &model,
                &state,
                strategy.as_ref(),
                &split.validation,
                &probe_idx,
                cfg,
                perturb,
            )?);
        }
    }
    let multi = split.test.labels.is_multi();
    let probs = predict(&model, eval_params(&state, strategy.as_ref(), cfg), &split.test.samples.all()?, multi)?;
    let test = classification_report(&probs, &split.test.labels)?;
    let test_top1 = match &split.test.labels {
        Labels::Single(ys) => Some(top1_accuracy(&probs, ys)),
        Labels::Multi { .. } => None,
    };
    Ok(RunOutcome {
        variant: cfg.variant.clone(),
        curves,
        test,
        test_top1,
        dumps,
        unlabeled_reads: split.unlabeled.reads() - reads_before,
        state,
    })
}
