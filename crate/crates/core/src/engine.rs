//! Class-incremental training: the three-term dark-experience objective,
//! its baselines, and the task loop that fills the accuracy matrix.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Mode, Tape, Tensor, Var};
use crate::buffer::{BufferEntry, ReservoirBuffer};
use crate::dataset::{validate_schedule, Dataset, Example, TaskSpec};
use crate::dsp::FeatureMatrix;
use crate::error::{input_err, Error, Result};
use crate::metrics::{count_correct, AccuracyMatrix, MetricsReport};
use crate::model::{features_to_input, ForwardStats, TcResNet8, TcResNet8Config};
use crate::rng::{stream, Rng, Stream};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    DeKws,
    Finetune,
    Joint,
    NaiveRehearsal,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::DeKws, Strategy::Finetune, Strategy::Joint, Strategy::NaiveRehearsal];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::DeKws => "de_kws",
            Strategy::Finetune => "finetune",
            Strategy::Joint => "joint",
            Strategy::NaiveRehearsal => "naive_rehearsal",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown strategy '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs_per_task: usize,
    pub alpha: f64,
    pub beta: f64,
    pub buffer_capacity: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            batch_size: 128,
            epochs_per_task: 50,
            alpha: 0.5,
            beta: 1.0,
            buffer_capacity: 500,
            seed: 0,
            strategy: Strategy::DeKws,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0 && self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::InvalidConfig(format!("alpha ({}) and beta ({}) must be >= 0", self.alpha, self.beta)));
        }
        if self.batch_size == 0 || self.epochs_per_task == 0 {
            return Err(Error::InvalidConfig("batch_size and epochs_per_task must be >= 1".into()));
        }
        Ok(())
    }

    /// `(alpha, beta, capacity)` as the strategy uses them.
    pub fn effective_weights(&self) -> (f64, f64, usize) {
        match self.strategy {
            Strategy::DeKws => (self.alpha, self.beta, self.buffer_capacity),
            Strategy::NaiveRehearsal => (0.0, 0.0, self.buffer_capacity),
            Strategy::Finetune | Strategy::Joint => (0.0, 0.0, 0),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }
}

/// `L_C + α·L_R + β·L_D`; absent terms contribute nothing.
pub fn combined_loss(
    l_current: f64,
    l_rehearsal: Option<f64>,
    l_distill: Option<f64>,
    alpha: f64,
    beta: f64,
) -> Result<f64> {
    for (name, v) in [("current", Some(l_current)), ("rehearsal", l_rehearsal), ("distillation", l_distill)] {
        if let Some(v) = v.filter(|v| !v.is_finite()) {
            return Err(Error::TrainingFault(format!("{name} loss is {v}")));
        }
    }
    Ok(l_current + l_rehearsal.map_or(0.0, |l| alpha * l) + l_distill.map_or(0.0, |l| beta * l))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLosses {
    pub l_current: f64,
    pub l_rehearsal: Option<f64>,
    pub l_distill: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub task: usize,
    pub epoch: usize,
    pub step: u64,
    #[serde(flatten)]
    pub losses: StepLosses,
}

/// Model, optimizer, buffer and random streams of one training run.
#[derive(Debug, Clone)]
pub struct Learner<T: Scalar> {
    cfg: TrainConfig,
    model: TcResNet8<T>,
    adam: AdamState,
    buffer: ReservoirBuffer<T>,
    sampler: Rng,
    shuffle: Rng,
    steps: u64,
}

fn gather<T: Scalar>(batch: &[Example<T>]) -> (Vec<&FeatureMatrix<T>>, Vec<usize>) {
    (batch.iter().map(|e| e.features.as_ref()).collect(), batch.iter().map(|e| e.label).collect())
}

impl<T: Scalar> Learner<T> {
    pub fn new(cfg: TrainConfig, model_config: TcResNet8Config) -> Result<Self> {
        cfg.validate()?;
        let model = TcResNet8::build(model_config, cfg.seed)?;
        Ok(Self::from_model(cfg, model))
    }

    pub fn from_model(cfg: TrainConfig, model: TcResNet8<T>) -> Self {
        let adam = AdamState::new(cfg.adam(), model.params());
        let (_, _, capacity) = cfg.effective_weights();
        let buffer = ReservoirBuffer::new(capacity, model.config().num_classes, stream(cfg.seed, Stream::Reservoir));
        Self {
            sampler: stream(cfg.seed, Stream::Sampler),
            shuffle: stream(cfg.seed, Stream::Shuffle),
            cfg,
            model,
            adam,
            buffer,
            steps: 0,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &TcResNet8<T> {
        &self.model
    }

    pub fn buffer(&self) -> &ReservoirBuffer<T> {
        &self.buffer
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn into_parts(self) -> (TcResNet8<T>, ReservoirBuffer<T>) {
        (self.model, self.buffer)
    }

    /// Train-mode forward of `features` plus cross-entropy against `labels`.
    fn forward_ce(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        features: &[&FeatureMatrix<T>],
        labels: &[usize],
    ) -> Result<(Var, Var, ForwardStats)> {
        let x = tape.constant(features_to_input(features)?);
        let (logits, stats) = self.model.forward(tape, vars, x, Mode::Train)?;
        let ce = tape.cross_entropy(logits, labels)?;
        Ok((logits, ce, stats))
    }

    /// One optimizer step on a batch of the current task.
    pub fn train_step(&mut self, batch: &[Example<T>]) -> Result<StepLosses> {
        if batch.is_empty() {
            return Err(input_err!("empty training batch"));
        }
        let (features, labels) = gather(batch);
        let mut tape = Tape::new();
        let vars = self.model.bind(&mut tape);
        let mut all_stats = Vec::new();

        let (logits, loss, l_current, l_rehearsal, l_distill) = match self.cfg.strategy {
            Strategy::Finetune | Strategy::Joint => {
                let (logits, lc, stats) = self.forward_ce(&mut tape, &vars, &features, &labels)?;
                all_stats.push(stats);
                (logits, lc, tape.scalar(lc), None, None)
            }
            Strategy::NaiveRehearsal => {
                let replay = if self.buffer.is_empty() {
                    Vec::new()
                } else {
                    self.buffer.sample_batch(batch.len(), &mut self.sampler)?
                };
                let mut f = features.clone();
                let mut y = labels.clone();
                f.extend(replay.iter().map(|e| e.features.as_ref()));
                y.extend(replay.iter().map(|e| e.label));
                let (logits, lc, stats) = self.forward_ce(&mut tape, &vars, &f, &y)?;
                all_stats.push(stats);
                (logits, lc, tape.scalar(lc), None, None)
            }
            Strategy::DeKws => {
                let (alpha, beta, _) = self.cfg.effective_weights();
                let (logits, lc, stats) = self.forward_ce(&mut tape, &vars, &features, &labels)?;
                all_stats.push(stats);
                let mut terms = vec![(lc, 1.0)];
                let (mut l_r, mut l_d) = (None, None);
                // Zero-weighted terms are skipped outright: no draw, no forward.
                if !self.buffer.is_empty() && alpha > 0.0 {
                    let replay = self.buffer.sample_batch(self.cfg.batch_size, &mut self.sampler)?;
                    let (f, y) = gather_entries(&replay);
                    let (_, lr, stats) = self.forward_ce(&mut tape, &vars, &f, &y)?;
                    all_stats.push(stats);
                    terms.push((lr, alpha));
                    l_r = Some(tape.scalar(lr));
                }
                if !self.buffer.is_empty() && beta > 0.0 {
                    let replay = self.buffer.sample_batch(self.cfg.batch_size, &mut self.sampler)?;
                    let (f, _) = gather_entries(&replay);
                    let x = tape.constant(features_to_input(&f)?);
                    let (current, stats) = self.model.forward(&mut tape, &vars, x, Mode::Train)?;
                    all_stats.push(stats);
                    let c = self.model.config().num_classes;
                    let stored = Tensor::new(
                        vec![replay.len(), c],
                        replay.iter().flat_map(|e| e.logits.iter().copied()).collect(),
                    )?;
                    let target = tape.constant(stored);
                    let ld = tape.mse(target, current)?;
                    terms.push((ld, beta));
                    l_d = Some(tape.scalar(ld));
                }
                let loss = if terms.len() == 1 { lc } else { tape.weighted_sum(&terms)? };
                (logits, loss, tape.scalar(lc), l_r, l_d)
            }
        };

        let (alpha, beta, _) = self.cfg.effective_weights();
        let total = combined_loss(l_current, l_rehearsal, l_distill, alpha, beta)?;
        tape.backward(loss)?;
        let grads: Vec<Vec<T>> = vars
            .iter()
            .zip(self.model.params())
            .map(|(v, p)| tape.grad(*v).map_or_else(|| vec![T::zero(); p.tensor.len()], <[T]>::to_vec))
            .collect();
        self.adam.step(self.model.params_mut(), &grads)?;
        for stats in all_stats {
            self.model.apply_forward_stats(stats);
        }

        let c = self.model.config().num_classes;
        let rows = tape.value(logits).data().chunks_exact(c);
        for (ex, row) in batch.iter().zip(rows) {
            self.buffer.insert(BufferEntry {
                features: Arc::clone(&ex.features),
                label: ex.label,
                logits: row.to_vec(),
            })?;
        }
        self.steps += 1;
        Ok(StepLosses { l_current, l_rehearsal, l_distill, total })
    }

    /// One shuffled pass over `examples` in batches of `batch_size`.
    pub fn train_epoch(&mut self, examples: &[Example<T>]) -> Result<Vec<StepLosses>> {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut self.shuffle);
        let mut out = Vec::new();
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<Example<T>> = chunk.iter().map(|&i| examples[i].clone()).collect();
            out.push(self.train_step(&batch)?);
        }
        Ok(out)
    }
}

fn gather_entries<T: Scalar>(entries: &[BufferEntry<T>]) -> (Vec<&FeatureMatrix<T>>, Vec<usize>) {
    (entries.iter().map(|e| e.features.as_ref()).collect(), entries.iter().map(|e| e.label).collect())
}

/// Result of a full schedule (or of the joint baseline).
#[derive(Debug, Clone)]
pub struct RunOutcome<T: Scalar> {
    pub model: TcResNet8<T>,
    pub buffer: ReservoirBuffer<T>,
    pub matrix: AccuracyMatrix,
    pub metrics: MetricsReport,
    pub steps: Vec<StepRecord>,
    /// Buffer `num_seen` after each task.
    pub seen_after_task: Vec<u64>,
}

struct TaskSplits<T> {
    train: Vec<Vec<Example<T>>>,
    validation: Vec<Vec<Example<T>>>,
}

fn split_by_task<T: Scalar>(schedule: &[TaskSpec], data: &Dataset<T>) -> Result<TaskSplits<T>> {
    validate_schedule(schedule, data.num_classes())?;
    let mut task_of = vec![0; data.num_classes()];
    for t in schedule {
        for &c in &t.class_ids {
            task_of[c] = t.task_id;
        }
    }
    let position: Vec<usize> = {
        let mut p = vec![0; schedule.len()];
        for (i, t) in schedule.iter().enumerate() {
            p.get_mut(t.task_id)
                .map(|slot| *slot = i)
                .ok_or_else(|| Error::InvalidSchedule(format!("task id {} out of range", t.task_id)))?;
        }
        p
    };
    let bucket = |examples: &[Example<T>], what: &str| -> Result<Vec<Vec<Example<T>>>> {
        let mut out = vec![Vec::new(); schedule.len()];
        for ex in examples {
            let c = *task_of
                .get(ex.label)
                .ok_or_else(|| Error::InvalidDataset(format!("label {} outside the schedule", ex.label)))?;
            out[position[c]].push(ex.clone());
        }
        if let Some(t) = out.iter().position(Vec::is_empty) {
            return Err(Error::InvalidSchedule(format!("task {} has no {what} examples", schedule[t].task_id)));
        }
        Ok(out)
    };
    Ok(TaskSplits { train: bucket(&data.train, "training")?, validation: bucket(&data.validation, "validation")? })
}

fn evaluate_tasks<T: Scalar>(model: &TcResNet8<T>, validation: &[Vec<Example<T>>]) -> Result<Vec<(usize, usize)>> {
    validation
        .iter()
        .map(|v| {
            let pairs: Vec<(&FeatureMatrix<T>, usize)> = v.iter().map(|e| (e.features.as_ref(), e.label)).collect();
            Ok((count_correct(model, &pairs)?, v.len()))
        })
        .collect()
}

fn model_config_for<T: Scalar>(data: &Dataset<T>) -> Result<TcResNet8Config> {
    let first = data.train.first().ok_or_else(|| Error::InvalidDataset("no training examples".into()))?;
    Ok(TcResNet8Config {
        input_channels: first.features.n_coeffs(),
        ..TcResNet8Config::with_classes(data.num_classes())
    })
}

fn finish<T: Scalar>(
    learner: Learner<T>,
    matrix: AccuracyMatrix,
    last: &[(usize, usize)],
    steps: Vec<StepRecord>,
    seen_after_task: Vec<u64>,
) -> Result<RunOutcome<T>> {
    let (correct, total) = last.iter().fold((0, 0), |(a, b), (c, n)| (a + c, b + n));
    let metrics =
        MetricsReport::from_matrix(&matrix, correct as f64 / total as f64, learner.model().count_parameters())?;
    let (model, buffer) = learner.into_parts();
    Ok(RunOutcome { model, buffer, matrix, metrics, steps, seen_after_task })
}

/// Trains tasks in order, `epochs_per_task` epochs each, evaluating every
/// task seen so far after each one. Joint training is dispatched to
/// [`run_baseline`].
pub fn run_schedule<T: Scalar>(schedule: &[TaskSpec], data: &Dataset<T>, cfg: &TrainConfig) -> Result<RunOutcome<T>> {
    if cfg.strategy == Strategy::Joint {
        return run_joint(schedule, data, cfg);
    }
    let splits = split_by_task(schedule, data)?;
    let mut learner = Learner::new(cfg.clone(), model_config_for(data)?)?;
    let mut matrix = AccuracyMatrix::new(schedule.len());
    let mut steps = Vec::new();
    let mut seen = Vec::new();
    let mut last = Vec::new();
    for (t, train) in splits.train.iter().enumerate() {
        for epoch in 0..cfg.epochs_per_task {
            for losses in learner.train_epoch(train)? {
                steps.push(StepRecord { task: t, epoch, step: learner.steps() - 1, losses });
            }
        }
        seen.push(learner.buffer().num_seen());
        last = evaluate_tasks(learner.model(), &splits.validation[..=t])?;
        for (i, &(c, n)) in last.iter().enumerate() {
            matrix.set(t, i, c as f64 / n as f64)?;
        }
    }
    finish(learner, matrix, &last, steps, seen)
}

/// Single phase over all classes pooled; only the final matrix row is
/// defined, so BWT is absent.
fn run_joint<T: Scalar>(schedule: &[TaskSpec], data: &Dataset<T>, cfg: &TrainConfig) -> Result<RunOutcome<T>> {
    let splits = split_by_task(schedule, data)?;
    let pooled: Vec<Example<T>> = splits.train.concat();
    let mut learner = Learner::new(cfg.clone(), model_config_for(data)?)?;
    let mut steps = Vec::new();
    for epoch in 0..cfg.epochs_per_task {
        for losses in learner.train_epoch(&pooled)? {
            steps.push(StepRecord { task: 0, epoch, step: learner.steps() - 1, losses });
        }
    }
    let last = evaluate_tasks(learner.model(), &splits.validation)?;
    let mut matrix = AccuracyMatrix::new(schedule.len());
    for (i, &(c, n)) in last.iter().enumerate() {
        matrix.set(schedule.len() - 1, i, c as f64 / n as f64)?;
    }
    let seen = vec![learner.buffer().num_seen()];
    finish(learner, matrix, &last, steps, seen)
}

/// Finetune, joint or naive-rehearsal baseline.
pub fn run_baseline<T: Scalar>(
    strategy: Strategy,
    schedule: &[TaskSpec],
    data: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<RunOutcome<T>> {
    if strategy == Strategy::DeKws {
        return Err(Error::InvalidConfig("de_kws is not a baseline; use run_schedule".into()));
    }
    run_schedule(schedule, data, &TrainConfig { strategy, ..cfg.clone() })
}
