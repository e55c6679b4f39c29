//! Dense training, fine-pruning and evaluation.
//!
//! Both loops share one step function. A fine-pruning step records the
//! masked forward pass, combines cross-entropy with optional logit
//! distillation, adds the sigmoid regularizer gradient to the scores and
//! updates weights and scores with separate Adam settings.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::par;
use crate::pruning::{density_report, reg_value_and_grad, RegWeights};
use crate::rng::{stream, RngState};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub batch_size: usize,
    pub weights: AdamConfig,
    pub scores: AdamConfig,
    /// Finite-value checks after every recorded op.
    pub checked: bool,
    /// History rows per epoch.
    pub log_per_epoch: usize,
    /// Dev examples used for history accuracy (0 = whole dev set).
    pub history_eval: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            weights: AdamConfig::default(),
            scores: AdamConfig::for_scores(),
            checked: false,
            log_per_epoch: 4,
            history_eval: 512,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSchedule {
    pub epochs: usize,
    pub warmup_frac: f64,
    pub ramp_frac: f64,
    pub cooldown_frac: f64,
    pub lambda_end: f64,
}

impl Default for PruneSchedule {
    fn default() -> Self {
        Self {
            epochs: 10,
            warmup_frac: 0.1,
            ramp_frac: 0.5,
            cooldown_frac: 0.2,
            lambda_end: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Ramp,
    Hold,
    Cooldown,
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<()> {
        let fracs = [self.warmup_frac, self.ramp_frac, self.cooldown_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) || fracs.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(Error::Config(
                "schedule fractions must be in [0, 1] and sum to at most 1".into(),
            ));
        }
        if !(self.lambda_end >= 0.0 && self.lambda_end.is_finite()) {
            return Err(Error::Config("lambda_end must be finite and >= 0".into()));
        }
        Ok(())
    }

    fn bounds(&self, total: usize) -> (usize, usize, usize) {
        let t = total as f64;
        let warm = (self.warmup_frac * t).round() as usize;
        let ramp_end = warm + (self.ramp_frac * t).round() as usize;
        let cool_start = total - ((self.cooldown_frac * t).round() as usize).min(total);
        (warm, ramp_end.min(cool_start.max(warm)), cool_start.max(warm))
    }

    pub fn phase(&self, step: usize, total: usize) -> Phase {
        let (warm, ramp_end, cool) = self.bounds(total);
        if step >= cool {
            Phase::Cooldown
        } else if step < warm {
            Phase::Warmup
        } else if step < ramp_end {
            Phase::Ramp
        } else {
            Phase::Hold
        }
    }

    /// Base λ at `step` of `total`: 0, then a linear ramp, then `lambda_end`.
    pub fn lambda(&self, step: usize, total: usize) -> f64 {
        let (warm, ramp_end, _) = self.bounds(total);
        if step < warm {
            0.0
        } else if step >= ramp_end {
            self.lambda_end
        } else {
            self.lambda_end * (step - warm) as f64 / (ramp_end - warm) as f64
        }
    }
}

/// Pruning-run options beyond the schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneRun {
    pub schedule: PruneSchedule,
    /// λ per family at `lambda_end == 1` (already balanced if requested).
    pub reg_unit: RegWeights,
    pub alpha: f64,
    pub temperature: f64,
    pub seed: u64,
    pub optim: OptimConfig,
    /// `(score tensor, entry)` pairs clamped to at least `floor`.
    pub protected: Vec<(usize, usize)>,
    pub floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub lambda: f64,
    pub density: f64,
    pub head_compression: f64,
    pub accuracy: f64,
    pub loss: f64,
}

pub const HISTORY_HEADER: &str = "step,lambda,density,head_compression,accuracy,loss";

impl HistoryRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.lambda, self.density, self.head_compression, self.accuracy, self.loss
        )
    }
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar = f32> {
    pub model: Model<T>,
    /// Highest dev accuracy among the eligible epochs (all epochs for dense
    /// training, cool-down epochs for pruning).
    pub best: Model<T>,
    pub best_metrics: EvalMetrics,
    pub final_metrics: EvalMetrics,
    pub history: Vec<HistoryRow>,
}

const EVAL_BATCH: usize = 256;

fn eval_batch<T: Scalar>(model: &Model<T>, batch: &Batch) -> Result<(usize, f64)> {
    let logits = model.logits(batch)?;
    let c = logits.cols();
    let mut correct = 0;
    let mut loss = 0.0;
    for (row, &y) in logits.data().chunks_exact(c).zip(&batch.labels) {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
        loss += lse - row[y].as_f64();
        let pred = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v.as_f64() > best.1 { (i, v.as_f64()) } else { best })
            .0;
        correct += (pred == y) as usize;
    }
    Ok((correct, loss))
}

fn combine(parts: Vec<Result<(usize, f64)>>, n: usize) -> Result<EvalMetrics> {
    let mut correct = 0;
    let mut loss = 0.0;
    for p in parts {
        let (c, l) = p?;
        correct += c;
        loss += l;
    }
    Ok(EvalMetrics {
        accuracy: correct as f64 / n as f64,
        loss: loss / n as f64,
    })
}

/// Accuracy and mean cross-entropy; batches are evaluated in parallel when
/// the `parallel` feature is on and summed in dataset order.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let batches = data.batches(EVAL_BATCH);
    combine(par::map(&batches, |b| eval_batch(model, b)), data.len())
}

/// [`evaluate`] on the calling thread only.
pub fn evaluate_sequential<T: Scalar>(model: &Model<T>, data: &Dataset) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let batches = data.batches(EVAL_BATCH);
    combine(batches.iter().map(|b| eval_batch(model, b)).collect(), data.len())
}

/// Logits for every example, in dataset order.
pub fn predict_logits<T: Scalar>(model: &Model<T>, data: &Dataset) -> Result<Vec<Vec<T>>> {
    let batches = data.batches(EVAL_BATCH);
    let parts = par::map(&batches, |b| model.logits(b));
    let mut out = Vec::with_capacity(data.len());
    for p in parts {
        let t = p?;
        out.extend(t.data().chunks_exact(t.cols()).map(<[T]>::to_vec));
    }
    Ok(out)
}

fn subset(data: &Dataset, n: usize) -> Dataset {
    if n == 0 || n >= data.len() {
        return data.clone();
    }
    Dataset {
        seq_len: data.seq_len,
        label_names: data.label_names.clone(),
        examples: data.examples[..n].to_vec(),
    }
}

/// Mutable optimisation state of one run.
struct StepState<T: Scalar> {
    weights: Vec<AdamState<T>>,
    scores: Vec<AdamState<T>>,
    batch_rng: RngState,
    dropout_rng: RngState,
}

impl<T: Scalar> StepState<T> {
    fn new(model: &Model<T>, seed: u64) -> Self {
        Self {
            weights: model.named_params().iter().map(|(_, t)| AdamState::new(t.shape())).collect(),
            scores: model.scores.iter().map(|s| AdamState::new(s.values.shape())).collect(),
            batch_rng: RngState::new(seed, stream::BATCHES),
            dropout_rng: RngState::new(seed, stream::DROPOUT),
        }
    }
}

struct StepInput<'a, T: Scalar> {
    batch: &'a Batch,
    teacher: Option<&'a Tensor<T>>,
    alpha: f64,
    temperature: f64,
    reg: Option<RegWeights>,
    checked: bool,
}

/// One optimisation step; returns the total loss (task + regularizer).
fn step<T: Scalar>(
    model: &mut Model<T>,
    st: &mut StepState<T>,
    optim: &OptimConfig,
    input: StepInput<'_, T>,
    step_index: usize,
) -> Result<f64> {
    let train_scores = input.reg.is_some();
    let mut tape = Tape::new().checked(input.checked);
    let vars = model.register(&mut tape, true, train_scores);
    let logits = model.forward(&mut tape, &vars, input.batch, Some(&mut st.dropout_rng))?;
    let ce = tape.cross_entropy(logits, &input.batch.labels)?;
    let loss = match input.teacher {
        Some(t) if input.alpha < 1.0 => {
            let kl = tape.kl_distill(logits, t, input.temperature)?;
            let a = tape.scale(ce, T::from_f64_lossy(input.alpha))?;
            let b = tape.scale(kl, T::from_f64_lossy(1.0 - input.alpha))?;
            tape.add(a, b)?
        }
        _ => ce,
    };
    let task_loss = tape.value(loss).data()[0].as_f64();
    let (reg_value, reg_grads) = match input.reg {
        Some(r) => reg_value_and_grad(&model.scores, &r),
        None => (0.0, Vec::new()),
    };
    let total = task_loss + reg_value;
    if !total.is_finite() {
        return Err(Error::Diverged {
            step: step_index,
            loss: total,
        });
    }
    let mut grads = tape.backward(loss)?;
    let decay_flags: Vec<bool> = model.named_params().iter().map(|(_, t)| t.ndim() > 1).collect();
    for (i, p) in model.params_mut().into_iter().enumerate() {
        if let Some(g) = grads.take(vars.params[i]) {
            adam_step(p, &g, &mut st.weights[i], &optim.weights, decay_flags[i])?;
        }
    }
    if train_scores {
        for (i, rg) in reg_grads.into_iter().enumerate() {
            let g = match grads.take(vars.scores[i]) {
                Some(task) => task.zip_map(&rg, |a, b| a + b)?,
                None => rg,
            };
            adam_step(&mut model.scores[i].values, &g, &mut st.scores[i], &optim.scores, false)?;
        }
    }
    Ok(total)
}

struct Logger {
    dev: Dataset,
    every: usize,
    rows: Vec<HistoryRow>,
    loss_acc: f64,
    loss_n: usize,
}

impl Logger {
    fn new(dev: &Dataset, optim: &OptimConfig, steps_per_epoch: usize) -> Self {
        Self {
            dev: subset(dev, optim.history_eval),
            every: (steps_per_epoch / optim.log_per_epoch.max(1)).max(1),
            rows: Vec::new(),
            loss_acc: 0.0,
            loss_n: 0,
        }
    }

    fn record<T: Scalar>(&mut self, model: &Model<T>, step: usize, lambda: f64) -> Result<()> {
        let rep = density_report(model);
        let acc = evaluate(model, &self.dev)?.accuracy;
        self.rows.push(HistoryRow {
            step,
            lambda,
            density: rep.density,
            head_compression: rep.head_compression,
            accuracy: acc,
            loss: if self.loss_n == 0 {
                f64::NAN
            } else {
                self.loss_acc / self.loss_n as f64
            },
        });
        self.loss_acc = 0.0;
        self.loss_n = 0;
        Ok(())
    }
}

fn epoch_order(rng: &mut RngState, n: usize, batch: usize) -> Vec<Vec<usize>> {
    rng.permutation(n).chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Plain fine-tuning with cross-entropy. Zero epochs return `model` as is.
pub fn train_dense<T: Scalar>(
    model: Model<T>,
    train: &Dataset,
    dev: &Dataset,
    epochs: usize,
    seed: u64,
    optim: &OptimConfig,
) -> Result<TrainOutcome<T>> {
    if train.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let mut model = model;
    let mut st = StepState::new(&model, seed);
    let steps_per_epoch = train.len().div_ceil(optim.batch_size.max(1));
    let mut log = Logger::new(dev, optim, steps_per_epoch);
    let initial = evaluate(&model, dev)?;
    let mut best = (model.clone(), initial);
    let mut global = 0;
    for _ in 0..epochs {
        for idx in epoch_order(&mut st.batch_rng, train.len(), optim.batch_size.max(1)) {
            let batch = train.batch(&idx);
            let loss = step(
                &mut model,
                &mut st,
                optim,
                StepInput {
                    batch: &batch,
                    teacher: None,
                    alpha: 1.0,
                    temperature: 1.0,
                    reg: None,
                    checked: optim.checked,
                },
                global,
            )?;
            log.loss_acc += loss;
            log.loss_n += 1;
            global += 1;
            if global % log.every == 0 {
                log.record(&model, global, 0.0)?;
            }
        }
        let m = evaluate(&model, dev)?;
        if m.accuracy > best.1.accuracy {
            best = (model.clone(), m);
        }
    }
    let final_metrics = evaluate(&model, dev)?;
    Ok(TrainOutcome {
        model,
        best: best.0,
        best_metrics: best.1,
        final_metrics,
        history: log.rows,
    })
}

/// Teacher logits for every training example, indexed by example.
pub fn teacher_logits<T: Scalar>(teacher: &Model<T>, train: &Dataset) -> Result<Vec<Vec<T>>> {
    predict_logits(teacher, train)
}

fn gather_teacher<T: Scalar>(cache: &[Vec<T>], idx: &[usize]) -> Result<Tensor<T>> {
    let c = cache[0].len();
    let data = idx.iter().flat_map(|&i| cache[i].iter().copied()).collect();
    Ok(Tensor::new(vec![idx.len(), c], data)?)
}

/// Fine-pruning from `model` (scores already attached).
///
/// Scores only move while the scheduled λ is positive and before the
/// cool-down starts; afterwards masks are frozen and weights keep training.
pub fn fine_prune<T: Scalar>(
    model: Model<T>,
    teacher: Option<&Model<T>>,
    train: &Dataset,
    dev: &Dataset,
    run: &PruneRun,
) -> Result<TrainOutcome<T>> {
    run.schedule.validate()?;
    if train.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if !(0.0..=1.0).contains(&run.alpha) || run.temperature <= 0.0 {
        return Err(Error::Config("alpha must be in [0, 1] and temperature > 0".into()));
    }
    let mut model = model;
    let optim = &run.optim;
    let bs = optim.batch_size.max(1);
    let cache = match teacher {
        Some(t) if run.alpha < 1.0 => Some(teacher_logits(t, train)?),
        _ => None,
    };
    let mut st = StepState::new(&model, run.seed);
    let steps_per_epoch = train.len().div_ceil(bs);
    let total = steps_per_epoch * run.schedule.epochs;
    let mut log = Logger::new(dev, optim, steps_per_epoch);
    let floor = T::from_f64_lossy(run.floor);
    let clamp = |m: &mut Model<T>| {
        for &(s, e) in &run.protected {
            let v = &mut m.scores[s].values.data_mut()[e];
            if *v < floor {
                *v = floor;
            }
        }
    };
    clamp(&mut model);
    let mut best: Option<(Model<T>, EvalMetrics)> = None;
    let mut global = 0;
    for _ in 0..run.schedule.epochs {
        for idx in epoch_order(&mut st.batch_rng, train.len(), bs) {
            let lambda = run.schedule.lambda(global, total);
            let phase = run.schedule.phase(global, total);
            let reg = (lambda > 0.0 && phase != Phase::Cooldown).then(|| run.reg_unit.scaled(lambda));
            let batch = train.batch(&idx);
            let t = cache.as_ref().map(|c| gather_teacher(c, &idx)).transpose()?;
            let loss = step(
                &mut model,
                &mut st,
                optim,
                StepInput {
                    batch: &batch,
                    teacher: t.as_ref(),
                    alpha: run.alpha,
                    temperature: run.temperature,
                    reg,
                    checked: optim.checked,
                },
                global,
            )?;
            clamp(&mut model);
            log.loss_acc += loss;
            log.loss_n += 1;
            global += 1;
            if global % log.every == 0 {
                log.record(&model, global, lambda)?;
            }
        }
        // an epoch is eligible once its last step ran with frozen masks
        let frozen = run.schedule.phase(global.saturating_sub(1), total) == Phase::Cooldown;
        if frozen || run.schedule.cooldown_frac == 0.0 {
            let m = evaluate(&model, dev)?;
            if best.as_ref().is_none_or(|b| m.accuracy > b.1.accuracy) {
                best = Some((model.clone(), m));
            }
        }
    }
    let final_metrics = evaluate(&model, dev)?;
    let (best, best_metrics) = best.unwrap_or_else(|| (model.clone(), final_metrics));
    Ok(TrainOutcome {
        model,
        best,
        best_metrics,
        final_metrics,
        history: log.rows,
    })
}

/// Fine-tunes a model without scores (e.g. a compacted one), optionally
/// distilling from `teacher`, for a fixed number of steps.
pub fn finetune_steps<T: Scalar>(
    model: Model<T>,
    teacher: Option<&Model<T>>,
    train: &Dataset,
    steps: usize,
    alpha: f64,
    temperature: f64,
    seed: u64,
    optim: &OptimConfig,
) -> Result<Model<T>> {
    let mut model = model;
    if steps == 0 {
        return Ok(model);
    }
    let bs = optim.batch_size.max(1);
    let cache = match teacher {
        Some(t) if alpha < 1.0 => Some(teacher_logits(t, train)?),
        _ => None,
    };
    let mut st = StepState::new(&model, seed);
    let mut global = 0;
    'outer: loop {
        for idx in epoch_order(&mut st.batch_rng, train.len(), bs) {
            if global == steps {
                break 'outer;
            }
            let batch = train.batch(&idx);
            let t = cache.as_ref().map(|c| gather_teacher(c, &idx)).transpose()?;
            step(
                &mut model,
                &mut st,
                optim,
                StepInput {
                    batch: &batch,
                    teacher: t.as_ref(),
                    alpha,
                    temperature,
                    reg: None,
                    checked: optim.checked,
                },
                global,
            )?;
            global += 1;
        }
    }
    Ok(model)
}
