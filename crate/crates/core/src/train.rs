//! Optimization loop: Adam, cosine schedule with linear warm-up, global-norm
//! clipping, cross-entropy / L1 losses and the enantiomer ranking metric.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autonn::{self, NnError, Tape, Tensor};
use crate::chienn::{BatchPlan, ChiennError, GraphPlan, LayerStack};
use crate::datagen::{Label, Member, SyntheticSample};
use crate::ordering::ParallelPolicy;
use crate::seeding::substream;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_RANKING_THRESHOLD: f64 = 0.001;
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("epoch {epoch} outside 0..{epochs}")]
    EpochOutOfRange { epoch: usize, epochs: usize },
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("{0} tensors but {1} gradients")]
    GradientCount(usize, usize),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged { epoch: usize, batch: usize, detail: String },
    #[error("{0}")]
    Empty(&'static str),
    #[error("label {label:?} does not fit task {task:?}")]
    LabelMismatch { label: Label, task: Task },
    #[error(transparent)]
    Chienn(#[from] ChiennError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Classification,
    Regression,
    Ranking,
}

impl Task {
    /// Head width the task expects.
    pub fn outputs(self) -> usize {
        match self {
            Task::Classification => 2,
            Task::Regression | Task::Ranking => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub task: Task,
    pub ranking_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            warmup_epochs: 10,
            base_lr: 1e-3,
            clip_norm: 5.0,
            batch_size: 32,
            seed: 0,
            task: Task::Classification,
            ranking_threshold: DEFAULT_RANKING_THRESHOLD,
        }
    }
}

impl TrainConfig {
    /// `base_lr = 0` is accepted so a run can be checked to leave weights untouched.
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.warmup_epochs >= self.epochs {
            return bad("warmup_epochs must be smaller than epochs");
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return bad("base_lr must be finite and non-negative");
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.ranking_threshold >= 0.0) {
            return bad("ranking_threshold must be non-negative");
        }
        Ok(())
    }
}

/// Linear ramp from 0 over the warm-up epochs, then half-cosine decay.
pub fn cosine_warmup_lr(epoch: usize, cfg: &TrainConfig) -> Result<f64, TrainError> {
    if epoch >= cfg.epochs {
        return Err(TrainError::EpochOutOfRange {
            epoch,
            epochs: cfg.epochs,
        });
    }
    let w = cfg.warmup_epochs;
    if epoch < w {
        return Ok(cfg.base_lr * epoch as f64 / w as f64);
    }
    let progress = (epoch - w) as f64 / (cfg.epochs - w) as f64;
    Ok(cfg.base_lr * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0)
}

/// First and second moment estimates plus step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::GradientCount(params.len(), grads.len()));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(NnError::ShapeMismatch {
                op: "adam_step",
                detail: format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            }
            .into());
        }
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient);
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (pj, gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *pj -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Rescales `grads` to global L2 norm `max_norm` when above it; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64, TrainError> {
    if !(max_norm > 0.0) {
        return Err(TrainError::InvalidConfig("max_norm must be positive".into()));
    }
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale_in_place(factor));
    }
    Ok(norm)
}

/// Softmax cross-entropy of one logit vector.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64, TrainError> {
    if label >= logits.len() {
        return Err(NnError::LabelOutOfRange {
            label,
            classes: logits.len(),
        }
        .into());
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(NnError::NonFinite { op: "cross_entropy" }.into());
    }
    Ok(autonn::log_sum_exp(logits) - logits[label])
}

/// Mean absolute error.
pub fn l1_loss(pred: &[f64], target: &[f64]) -> Result<f64, TrainError> {
    if pred.len() != target.len() {
        return Err(NnError::ShapeMismatch {
            op: "l1_loss",
            detail: format!("{} predictions for {} targets", pred.len(), target.len()),
        }
        .into());
    }
    if pred.is_empty() {
        return Err(TrainError::Empty("l1_loss of an empty batch"));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Predictions for both members of an enantiomer pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankedPrediction {
    pub pred_a: f64,
    pub pred_b: f64,
    pub smaller: Member,
}

impl RankedPrediction {
    /// Correct iff the predictions differ by more than `threshold` in the labeled direction.
    pub fn is_correct(&self, threshold: f64) -> bool {
        if (self.pred_a - self.pred_b).abs() <= threshold {
            return false;
        }
        let predicted = if self.pred_a < self.pred_b { Member::A } else { Member::B };
        predicted == self.smaller
    }
}

pub fn ranking_accuracy(pairs: &[RankedPrediction], threshold: f64) -> Result<f64, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::Empty("ranking accuracy of no pairs"));
    }
    let correct = pairs.iter().filter(|p| p.is_correct(threshold)).count();
    Ok(correct as f64 / pairs.len() as f64)
}

/// A prepared graph with its target.
#[derive(Clone, Debug)]
pub struct Example {
    pub plan: GraphPlan,
    pub label: Label,
    pub pair_id: u64,
}

impl Example {
    pub fn from_sample(sample: &SyntheticSample, policy: ParallelPolicy) -> Result<Self, TrainError> {
        Ok(Self {
            plan: GraphPlan::new(&sample.graph, policy)?,
            label: sample.label,
            pair_id: sample.meta.pair_id,
        })
    }
}

pub fn examples_from_samples(samples: &[SyntheticSample], policy: ParallelPolicy) -> Result<Vec<Example>, TrainError> {
    samples.iter().map(|s| Example::from_sample(s, policy)).collect()
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

/// Train/valid/test indices in ratio 7:1:2 over distinct pair ids, so both
/// members of a pair always land in the same split.
pub fn split_indices(pair_ids: &[u64], seed: u64) -> [Vec<usize>; 3] {
    let mut ids = pair_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    ids.shuffle(&mut substream(seed, "split"));
    let n = ids.len();
    let n_train = (n as f64 * 0.7).round() as usize;
    let n_valid = ((n as f64 * 0.1).round() as usize).min(n - n_train);
    let bucket: BTreeMap<u64, usize> = ids
        .iter()
        .enumerate()
        .map(|(i, &p)| (p, if i < n_train { 0 } else if i < n_train + n_valid { 1 } else { 2 }))
        .collect();
    let mut out: [Vec<usize>; 3] = Default::default();
    for (i, p) in pair_ids.iter().enumerate() {
        out[bucket[p]].push(i);
    }
    out
}

impl Dataset {
    pub fn split(examples: Vec<Example>, seed: u64) -> Self {
        let ids: Vec<u64> = examples.iter().map(|e| e.pair_id).collect();
        let [tr, va, te] = split_indices(&ids, seed);
        let mut slots: Vec<Option<Example>> = examples.into_iter().map(Some).collect();
        let mut take = |idx: Vec<usize>| idx.into_iter().filter_map(|i| slots[i].take()).collect();
        Self {
            train: take(tr),
            valid: take(va),
            test: take(te),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ranking_accuracy: Option<f64>,
}

impl Metrics {
    /// The model-selection metric for `task`.
    pub fn primary(&self, task: Task) -> Option<f64> {
        match task {
            Task::Classification => self.accuracy,
            Task::Regression => self.mae,
            Task::Ranking => self.ranking_accuracy,
        }
    }
}

fn check_label(label: Label, task: Task) -> Result<(), TrainError> {
    match (label, task) {
        (Label::Class(_), Task::Classification) | (Label::Value(_), Task::Regression | Task::Ranking) => Ok(()),
        _ => Err(TrainError::LabelMismatch { label, task }),
    }
}

/// Head outputs for every example, one row each.
pub fn predict_all(stack: &LayerStack, examples: &[Example]) -> Result<Vec<Vec<f64>>, TrainError> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_CHUNK) {
        let plans: Vec<&GraphPlan> = chunk.iter().map(|e| &e.plan).collect();
        let batch = BatchPlan::new(&plans, stack.config.k)?;
        let pred = stack.predict(&batch)?;
        out.extend((0..pred.rows()).map(|r| pred.row(r).to_vec()));
    }
    Ok(out)
}

pub fn evaluate(stack: &LayerStack, examples: &[Example], cfg: &TrainConfig) -> Result<Metrics, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::Empty("evaluation on an empty split"));
    }
    let preds = predict_all(stack, examples)?;
    let mut metrics = Metrics {
        count: examples.len(),
        ..Metrics::default()
    };
    match cfg.task {
        Task::Classification => {
            let (mut loss, mut correct) = (0.0, 0);
            for (e, p) in examples.iter().zip(&preds) {
                check_label(e.label, cfg.task)?;
                let Label::Class(c) = e.label else { unreachable!() };
                loss += cross_entropy(p, c)?;
                let argmax = p
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, v)| if *v > p[best] { i } else { best });
                correct += usize::from(argmax == c);
            }
            metrics.loss = loss / examples.len() as f64;
            metrics.accuracy = Some(correct as f64 / examples.len() as f64);
        }
        Task::Regression | Task::Ranking => {
            let mut targets = Vec::with_capacity(examples.len());
            for e in examples {
                check_label(e.label, cfg.task)?;
                let Label::Value(v) = e.label else { unreachable!() };
                targets.push(v);
            }
            let flat: Vec<f64> = preds.iter().map(|p| p[0]).collect();
            let mae = l1_loss(&flat, &targets)?;
            metrics.loss = mae;
            metrics.mae = Some(mae);
            if cfg.task == Task::Ranking {
                metrics.ranking_accuracy = Some(pair_ranking(examples, &flat, &targets, cfg.ranking_threshold)?);
            }
        }
    }
    Ok(metrics)
}

/// Ranking accuracy over pairs with exactly two members in `examples`.
/// A pair with equal targets has no smaller member and counts as incorrect.
fn pair_ranking(examples: &[Example], preds: &[f64], targets: &[f64], threshold: f64) -> Result<f64, TrainError> {
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        groups.entry(e.pair_id).or_default().push(i);
    }
    let mut pairs = Vec::new();
    let mut ties = 0;
    for members in groups.values().filter(|m| m.len() == 2) {
        let (a, b) = (members[0], members[1]);
        if targets[a] == targets[b] {
            ties += 1;
            continue;
        }
        pairs.push(RankedPrediction {
            pred_a: preds[a],
            pred_b: preds[b],
            smaller: if targets[a] < targets[b] { Member::A } else { Member::B },
        });
    }
    let total = pairs.len() + ties;
    if total == 0 {
        return Err(TrainError::Empty("no complete enantiomer pairs"));
    }
    let correct = pairs.iter().filter(|p| p.is_correct(threshold)).count();
    Ok(correct as f64 / total as f64)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub valid_metric: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub log: Vec<EpochMetrics>,
    pub best_epoch: usize,
    /// Metrics of the restored best checkpoint.
    pub train: Metrics,
    pub valid: Option<Metrics>,
    pub test: Option<Metrics>,
}

pub fn metrics_jsonl(log: &[EpochMetrics]) -> String {
    log.iter()
        .map(|m| serde_json::to_string(m).expect("metrics serialize") + "\n")
        .collect()
}

fn diverged(epoch: usize, batch: usize) -> impl Fn(ChiennError) -> TrainError {
    move |e| TrainError::Diverged {
        epoch,
        batch,
        detail: e.to_string(),
    }
}

/// One optimizer step on `batch`; returns the batch loss.
fn train_step(
    stack: &mut LayerStack,
    examples: &[&Example],
    cfg: &TrainConfig,
    adam: &mut AdamState,
    lr: f64,
    at: (usize, usize),
) -> Result<f64, TrainError> {
    let plans: Vec<&GraphPlan> = examples.iter().map(|e| &e.plan).collect();
    let batch = BatchPlan::new(&plans, stack.config.k)?;
    let mut tape = Tape::new();
    let vars = stack.register(&mut tape)?;
    let out = stack.forward_tape(&mut tape, &vars, &batch).map_err(diverged(at.0, at.1))?;
    let loss = match cfg.task {
        Task::Classification => {
            let labels = examples
                .iter()
                .map(|e| match e.label {
                    Label::Class(c) => Ok(c),
                    other => Err(TrainError::LabelMismatch { label: other, task: cfg.task }),
                })
                .collect::<Result<Vec<_>, _>>()?;
            tape.cross_entropy(out, &labels)
        }
        Task::Regression | Task::Ranking => {
            let targets = examples
                .iter()
                .map(|e| match e.label {
                    Label::Value(v) => Ok(v),
                    other => Err(TrainError::LabelMismatch { label: other, task: cfg.task }),
                })
                .collect::<Result<Vec<_>, _>>()?;
            tape.l1(out, &targets)
        }
    }
    .map_err(|e| diverged(at.0, at.1)(e.into()))?;
    let loss_value = tape.value(loss)?.item();
    let grads = tape.backward(loss)?;
    let mut grads = vars
        .iter()
        .zip(stack.tensors())
        .map(|(v, t)| grads.get_or_zeros(*v, t))
        .collect::<Result<Vec<_>, _>>()?;
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::Diverged {
            epoch: at.0,
            batch: at.1,
            detail: "non-finite gradient".into(),
        });
    }
    clip_grad_norm(&mut grads, cfg.clip_norm)?;
    adam_step(&mut stack.tensors_mut(), &grads, adam, lr)?;
    Ok(loss_value)
}

/// Larger is better; ties in the primary metric fall back to the loss.
fn selection_key(task: Task, m: &Metrics) -> (f64, f64) {
    match task {
        Task::Classification => (m.accuracy.unwrap_or(f64::NAN), -m.loss),
        Task::Regression => (-m.loss, 0.0),
        Task::Ranking => (m.ranking_accuracy.unwrap_or(f64::NAN), -m.loss),
    }
}

/// Trains `stack` in place and leaves it at the best-validation epoch.
///
/// Mini-batch order comes from the "shuffle" stream of `cfg.seed`, which
/// permutes whole enantiomer pairs. Without a validation split the last
/// epoch is kept.
pub fn train_model(stack: &mut LayerStack, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    train_model_with(stack, data, cfg, |_| {})
}

/// [`train_model`] with a callback invoked after every epoch.
pub fn train_model_with<F: FnMut(&EpochMetrics)>(
    stack: &mut LayerStack,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::Empty("training split is empty"));
    }
    if stack.config.outputs != cfg.task.outputs() {
        return Err(TrainError::InvalidConfig(format!(
            "task {:?} needs {} outputs, stack has {}",
            cfg.task,
            cfg.task.outputs(),
            stack.config.outputs
        )));
    }
    for e in data.train.iter().chain(&data.valid).chain(&data.test) {
        check_label(e.label, cfg.task)?;
    }
    let mut shuffle = substream(cfg.seed, "shuffle");
    let mut adam = AdamState::new(&stack.tensors());
    // Shuffled in whole pairs so that, with an even batch size, both mirror
    // images share a batch and their achiral gradients cancel.
    let mut groups: Vec<Vec<usize>> = {
        let mut by_pair: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, e) in data.train.iter().enumerate() {
            by_pair.entry(e.pair_id).or_default().push(i);
        }
        by_pair.into_values().collect()
    };
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, (f64, f64), LayerStack)> = None;

    for epoch in 0..cfg.epochs {
        let lr = cosine_warmup_lr(epoch, cfg)?;
        groups.shuffle(&mut shuffle);
        let order: Vec<usize> = groups.iter().flatten().copied().collect();
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data.train[i]).collect();
            total += train_step(stack, &batch, cfg, &mut adam, lr, (epoch, bi))? * chunk.len() as f64;
        }
        let train_loss = total / data.train.len() as f64;
        let valid = if data.valid.is_empty() {
            None
        } else {
            Some(evaluate(stack, &data.valid, cfg)?)
        };
        let valid_metric = valid.as_ref().and_then(|m| m.primary(cfg.task));
        let entry = EpochMetrics {
            epoch,
            lr,
            train_loss,
            valid_metric,
        };
        log::info!("epoch {epoch}: lr={lr:.3e} train_loss={train_loss:.5} valid={valid_metric:?}");
        on_epoch(&entry);
        log.push(entry);
        let key = valid.as_ref().map(|m| selection_key(cfg.task, m));
        let improved = match (&best, key) {
            (None, _) | (Some(_), None) => true,
            (Some((_, inc, _)), Some(k)) => k > *inc,
        };
        if improved {
            best = Some((epoch, key.unwrap_or((f64::NAN, f64::NAN)), stack.clone()));
        }
    }

    let (best_epoch, _, best_stack) = best.expect("at least one epoch ran");
    *stack = best_stack;
    let eval = |split: &[Example]| -> Result<Option<Metrics>, TrainError> {
        if split.is_empty() {
            Ok(None)
        } else {
            evaluate(stack, split, cfg).map(Some)
        }
    };
    Ok(TrainReport {
        log,
        best_epoch,
        train: evaluate(stack, &data.train, cfg)?,
        valid: eval(&data.valid)?,
        test: eval(&data.test)?,
    })
}
