//! Training loops for the baselines and the replay, representation-loss,
//! frozen-feature and multi-head strategies, plus evaluation.
//!
//! Every run draws from two independent seeded generators: one for data
//! order and one for memory operations. A strategy whose memory is empty or
//! unused therefore follows exactly the data order of plain fine-tuning.

mod config;
mod loops;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalmetrics::{ResourceMeter, ResourceSnapshot, Usage};
use crate::memory::Sample;
use crate::model::{
    argmax, combined_loss_grad, prior_corrected_argmax, softmax_rows, xent_loss_grad, DrlConfig,
    FrozenProjection, GradientVector, HeadRef, HeadSet, Matrix, MlpParams,
};
use crate::streamgen::{derive_seed, split_validation, Example, Protocol, Stream};

pub use config::{Budget, MemoryUpdate, ModelConfig, ProjectionKind, StrategyConfig, StrategyKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub batch: usize,
    pub inner: f64,
    pub cosine: f64,
}

/// Everything a run reports.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Validation accuracy after each training batch.
    pub val_acc: Vec<f64>,
    /// Mean training loss over each batch's steps.
    pub batch_loss: Vec<f64>,
    /// Replay memory size after each batch.
    pub memory_items: Vec<usize>,
    /// One snapshot per training epoch.
    pub resources: Vec<ResourceSnapshot>,
    pub alignment: Vec<AlignmentRecord>,
    pub steps: u64,
    /// Rows x parameters summed over every forward/backward step.
    pub work_units: u64,
    pub final_test_acc: f64,
    pub per_class_test_acc: Vec<Option<f64>>,
    pub per_task_test_acc: BTreeMap<u32, f64>,
    pub notes: Vec<String>,
    pub over_budget: bool,
    pub stream_hash_before: String,
    pub stream_hash_after: String,
    pub wall_clock_seconds: f64,
}

impl TrainLog {
    /// The log with machine-dependent fields cleared.
    pub fn without_wall_clock(&self) -> Self {
        let mut out = self.clone();
        out.wall_clock_seconds = 0.0;
        for r in &mut out.resources {
            r.measured_rss_bytes = None;
        }
        out
    }
}

impl Sample<f64> {
    pub fn from_example(e: &Example) -> Self {
        Self {
            features: e.features.iter().map(|&x| x as f64).collect(),
            label: e.label,
            task: e.task,
        }
    }
}

pub fn to_samples(examples: &[Example]) -> Vec<Sample<f64>> {
    examples.iter().map(Sample::from_example).collect()
}

/// Something that maps samples to predicted class ids.
pub trait Classifier {
    fn predict(&self, xs: &[Sample<f64>], priors: Option<&[f64]>) -> Result<Vec<u32>>;
    fn size_bytes(&self) -> usize;
}

const EVAL_CHUNK: usize = 1024;

fn predict_rows(
    model: &MlpParams<f64>,
    rows: &[Vec<f64>],
    priors: Option<&[f64]>,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(EVAL_CHUNK) {
        let x = Matrix::from_rows(chunk)?;
        let logits = model.forward(&x)?.logits().clone();
        match priors {
            None => out.extend((0..logits.rows()).map(|i| argmax(logits.row(i)))),
            Some(p) => {
                let probs = softmax_rows(&logits);
                for i in 0..probs.rows() {
                    out.push(prior_corrected_argmax(probs.row(i), p)?);
                }
            }
        }
    }
    Ok(out)
}

impl Classifier for MlpParams<f64> {
    fn predict(&self, xs: &[Sample<f64>], priors: Option<&[f64]>) -> Result<Vec<u32>> {
        let rows: Vec<Vec<f64>> = xs.iter().map(|s| s.features.clone()).collect();
        Ok(predict_rows(self, &rows, priors)?
            .into_iter()
            .map(|c| c as u32)
            .collect())
    }
    fn size_bytes(&self) -> usize {
        MlpParams::size_bytes(self)
    }
}

impl Classifier for HeadSet<f64> {
    /// Routes each sample to its task's head. Samples of a task with no
    /// head yet get `u32::MAX`, which never matches a label.
    fn predict(&self, xs: &[Sample<f64>], priors: Option<&[f64]>) -> Result<Vec<u32>> {
        let mut by_task: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in xs.iter().enumerate() {
            let t = s
                .task
                .ok_or_else(|| Error::Protocol("multi-head evaluation needs task labels".into()))?;
            by_task.entry(t).or_default().push(i);
        }
        let mut out = vec![u32::MAX; xs.len()];
        for (t, idx) in by_task {
            let Ok(head) = self.head(HeadRef::Task(t)) else {
                continue;
            };
            let chain = self.chain(HeadRef::Task(t))?;
            let local_priors: Option<Vec<f64>> =
                priors.map(|p| head.classes.iter().map(|&c| p[c as usize]).collect());
            for chunk in idx.chunks(EVAL_CHUNK) {
                let rows: Vec<&[f64]> = chunk.iter().map(|&i| xs[i].features.as_slice()).collect();
                let logits = chain.forward(&Matrix::from_rows(&rows)?)?.logits().clone();
                let probs = softmax_rows(&logits);
                for (r, &i) in chunk.iter().enumerate() {
                    let k = match &local_priors {
                        None => argmax(logits.row(r)),
                        Some(p) => prior_corrected_argmax(probs.row(r), p)?,
                    };
                    out[i] = head.classes[k];
                }
            }
        }
        Ok(out)
    }
    fn size_bytes(&self) -> usize {
        HeadSet::size_bytes(self)
    }
}

/// Fixed projection followed by a trainable linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenClassifier {
    pub projection: FrozenProjection<f64>,
    pub linear: MlpParams<f64>,
}

impl Classifier for FrozenClassifier {
    fn predict(&self, xs: &[Sample<f64>], priors: Option<&[f64]>) -> Result<Vec<u32>> {
        let rows: Vec<Vec<f64>> = xs.iter().map(|s| self.projection.project(&s.features)).collect();
        Ok(predict_rows(&self.linear, &rows, priors)?
            .into_iter()
            .map(|c| c as u32)
            .collect())
    }
    fn size_bytes(&self) -> usize {
        self.linear.size_bytes() + self.projection.size_bytes()
    }
}

/// A trained model of any strategy.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Mlp(MlpParams<f64>),
    Heads(HeadSet<f64>),
    Frozen(FrozenClassifier),
}

impl Classifier for Model {
    fn predict(&self, xs: &[Sample<f64>], priors: Option<&[f64]>) -> Result<Vec<u32>> {
        match self {
            Self::Mlp(m) => m.predict(xs, priors),
            Self::Heads(m) => m.predict(xs, priors),
            Self::Frozen(m) => m.predict(xs, priors),
        }
    }
    fn size_bytes(&self) -> usize {
        match self {
            Self::Mlp(m) => Classifier::size_bytes(m),
            Self::Heads(m) => Classifier::size_bytes(m),
            Self::Frozen(m) => m.size_bytes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    /// Indexed by class id; `None` for classes absent from the test set.
    pub per_class: Vec<Option<f64>>,
    pub per_task: BTreeMap<u32, f64>,
}

/// Accuracy overall, per class and per task. Prediction ties go to the
/// lowest class id.
pub fn evaluate(
    model: &impl Classifier,
    test_set: &[Sample<f64>],
    priors: Option<&[f64]>,
) -> Result<EvalResult> {
    if test_set.is_empty() {
        return Err(Error::Precondition("empty test set".into()));
    }
    let preds = model.predict(test_set, priors)?;
    let n_classes = test_set.iter().map(|s| s.label as usize + 1).max().unwrap_or(0);
    let mut class_hits = vec![(0usize, 0usize); n_classes];
    let mut task_hits: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for (s, &p) in test_set.iter().zip(&preds) {
        let hit = usize::from(s.label == p);
        correct += hit;
        let c = &mut class_hits[s.label as usize];
        c.0 += hit;
        c.1 += 1;
        if let Some(t) = s.task {
            let e = task_hits.entry(t).or_default();
            e.0 += hit;
            e.1 += 1;
        }
    }
    Ok(EvalResult {
        accuracy: correct as f64 / test_set.len() as f64,
        per_class: class_hits
            .iter()
            .map(|&(h, n)| (n > 0).then(|| h as f64 / n as f64))
            .collect(),
        per_task: task_hits
            .into_iter()
            .map(|(t, (h, n))| (t, h as f64 / n as f64))
            .collect(),
    })
}

/// Per-run mutable state shared by the training loops.
pub(crate) struct Ctx {
    cfg: StrategyConfig,
    budget: Budget,
    train_rng: ChaCha8Rng,
    mem_rng: ChaCha8Rng,
    meter: ResourceMeter,
    log: TrainLog,
    start: Instant,
    val: Vec<Sample<f64>>,
    n_classes: usize,
    label_counts: Vec<u64>,
    peak_activation: usize,
    loss_sum: f64,
    loss_steps: usize,
}

const SEED_TRAIN: u64 = 1;
const SEED_MEMORY: u64 = 2;
const SEED_INIT: u64 = 3;
const SEED_HEAD: u64 = 4;

impl Ctx {
    fn new(cfg: &StrategyConfig, budget: &Budget, meter: ResourceMeter, stream: &Stream) -> Self {
        let (val, _) = split_validation(stream.test_set(), cfg.validation_fraction);
        let n_classes = stream.n_classes();
        Self {
            cfg: cfg.clone(),
            budget: *budget,
            train_rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[SEED_TRAIN])),
            mem_rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[SEED_MEMORY])),
            meter,
            log: TrainLog::default(),
            start: Instant::now(),
            val: to_samples(&val),
            n_classes,
            label_counts: vec![0; n_classes],
            peak_activation: 0,
            loss_sum: 0.0,
            loss_steps: 0,
        }
    }

    fn init_seed(&self) -> u64 {
        derive_seed(self.cfg.seed, &[SEED_INIT])
    }

    fn head_seed(&self, task: u64) -> u64 {
        derive_seed(self.cfg.seed, &[SEED_HEAD, task])
    }

    /// Accounts one optimizer step, refusing it when the budget is spent.
    fn tick(&mut self, rows: usize, params: usize) -> Result<()> {
        if let Some(max) = self.budget.max_steps {
            if self.log.steps >= max {
                return Err(Error::OverBudget(format!("step cap {max} reached")));
            }
        }
        if let Some(max) = self.budget.max_seconds {
            if self.start.elapsed().as_secs_f64() > max {
                return Err(Error::OverBudget(format!("time cap {max}s reached")));
            }
        }
        self.log.steps += 1;
        self.log.work_units += (rows * params) as u64;
        Ok(())
    }

    fn record_loss(&mut self, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite training loss at step {}",
                self.log.steps
            )));
        }
        self.loss_sum += loss;
        self.loss_steps += 1;
        Ok(())
    }

    fn shuffled_indices(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut self.train_rng);
        idx
    }

    fn observe_labels(&mut self, data: &[Sample<f64>]) {
        for s in data {
            if let Some(c) = self.label_counts.get_mut(s.label as usize) {
                *c += 1;
            }
        }
    }

    /// Smoothed empirical class frequencies of the training data seen so far.
    fn priors(&self) -> Option<Vec<f64>> {
        if !self.cfg.prior_correction {
            return None;
        }
        let total: u64 = self.label_counts.iter().sum();
        let denom = (total + self.n_classes as u64) as f64;
        Some(
            self.label_counts
                .iter()
                .map(|&c| (c + 1) as f64 / denom)
                .collect(),
        )
    }

    fn step_mlp(
        &mut self,
        model: &mut MlpParams<f64>,
        rows: &[&Sample<f64>],
        lr: f64,
        drl: Option<&DrlConfig>,
    ) -> Result<()> {
        if rows.is_empty() {
            return Ok(());
        }
        self.tick(rows.len(), model.param_count())?;
        let x = Matrix::from_rows(&rows.iter().map(|s| s.features.as_slice()).collect::<Vec<_>>())?;
        let labels: Vec<usize> = rows.iter().map(|s| s.label as usize).collect();
        let chain = model.chain();
        let trace = chain.forward(&x)?;
        self.peak_activation = self.peak_activation.max(trace.size_bytes());
        let (parts, grad) = combined_loss_grad(&chain, &trace, &labels, drl)?;
        let lambda = drl.map_or(0.0, |d| d.lambda);
        self.record_loss(parts.xent + lambda * parts.drl)?;
        model.descend(&grad, lr)
    }

    /// One shuffled pass over `data` in mini-batches.
    fn epoch_mlp(
        &mut self,
        model: &mut MlpParams<f64>,
        data: &[&Sample<f64>],
        lr: f64,
        drl: Option<&DrlConfig>,
    ) -> Result<()> {
        let order = self.shuffled_indices(data.len());
        for chunk in order.chunks(self.cfg.minibatch) {
            let rows: Vec<&Sample<f64>> = chunk.iter().map(|&i| data[i]).collect();
            self.step_mlp(model, &rows, lr, drl)?;
        }
        Ok(())
    }

    fn step_heads(
        &mut self,
        model: &mut HeadSet<f64>,
        which: HeadRef,
        rows: &[&Sample<f64>],
        lr: f64,
        train_trunk: bool,
    ) -> Result<()> {
        if rows.is_empty() {
            return Ok(());
        }
        let head = model.head(which)?;
        let labels = rows
            .iter()
            .map(|s| {
                head.local_index(s.label).ok_or_else(|| {
                    Error::Precondition(format!("class {} not scored by head {which:?}", s.label))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let chain = model.chain(which)?;
        self.tick(rows.len(), chain.param_count())?;
        let x = Matrix::from_rows(&rows.iter().map(|s| s.features.as_slice()).collect::<Vec<_>>())?;
        let trace = chain.forward(&x)?;
        self.peak_activation = self.peak_activation.max(trace.size_bytes());
        let (loss, grad) = xent_loss_grad(&chain, &trace, &labels)?;
        self.record_loss(loss)?;
        model.descend(which, &grad, lr, train_trunk)
    }

    fn epoch_heads(
        &mut self,
        model: &mut HeadSet<f64>,
        which: HeadRef,
        data: &[&Sample<f64>],
        lr: f64,
        train_trunk: bool,
    ) -> Result<()> {
        let order = self.shuffled_indices(data.len());
        for chunk in order.chunks(self.cfg.minibatch) {
            let rows: Vec<&Sample<f64>> = chunk.iter().map(|&i| data[i]).collect();
            self.step_heads(model, which, &rows, lr, train_trunk)?;
        }
        Ok(())
    }

    fn snapshot(&mut self, param_bytes: usize, memory_bytes: usize) {
        let usage = Usage {
            param_bytes,
            memory_bytes,
            activation_bytes: self.peak_activation,
        };
        self.meter.snapshot(usage);
    }

    /// Keeps `bytes` of replay data on disk: written to the meter's disk
    /// directory when it has one, otherwise only accounted.
    fn persist(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        match self.meter.disk_dir() {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join(name), bytes)?;
            }
            None => self.meter.set_disk_bytes(bytes.len() as u64),
        }
        Ok(())
    }

    fn end_batch(&mut self, model: &impl Classifier, memory_items: usize) -> Result<()> {
        let priors = self.priors();
        let acc = if self.val.is_empty() {
            0.0
        } else {
            evaluate(model, &self.val, priors.as_deref())?.accuracy
        };
        self.log.val_acc.push(acc);
        self.log.memory_items.push(memory_items);
        let mean = if self.loss_steps == 0 {
            0.0
        } else {
            self.loss_sum / self.loss_steps as f64
        };
        self.log.batch_loss.push(mean);
        self.loss_sum = 0.0;
        self.loss_steps = 0;
        Ok(())
    }
}

fn full_gradient(model: &MlpParams<f64>, rows: &[&Sample<f64>]) -> Result<GradientVector<f64>> {
    let x = Matrix::from_rows(&rows.iter().map(|s| s.features.as_slice()).collect::<Vec<_>>())?;
    let labels: Vec<usize> = rows.iter().map(|s| s.label as usize).collect();
    let chain = model.chain();
    let trace = chain.forward(&x)?;
    Ok(xent_loss_grad(&chain, &trace, &labels)?.1)
}

/// The part of the stream's test set not used for validation.
pub fn final_test_set(stream: &Stream, validation_fraction: f64) -> Vec<Sample<f64>> {
    to_samples(&split_validation(stream.test_set(), validation_fraction).1)
}

/// A finished run: its log and final model.
#[derive(Debug, Clone)]
pub struct Trained {
    pub log: TrainLog,
    pub model: Model,
}

/// Options that do not affect the trajectory.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub budget: Budget,
    pub meter: ResourceMeter,
}

fn mlp_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    std::iter::once(input)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(output))
        .collect()
}

/// Trains `cfg.kind` on the stream and evaluates on the final-test split.
pub fn train(
    stream: &Stream,
    model_cfg: &ModelConfig,
    cfg: &StrategyConfig,
    opts: RunOptions,
) -> Result<Trained> {
    cfg.validate()?;
    opts.budget.validate()?;
    let hash_before = stream.content_hash();
    let mut ctx = Ctx::new(cfg, &opts.budget, opts.meter, stream);
    let d = stream.feature_dim();
    let c = ctx.n_classes;
    let init = ctx.init_seed();

    let (model, outcome) = match cfg.kind {
        StrategyKind::Multihead => {
            if model_cfg.hidden.is_empty() {
                return Err(Error::Config("multi-head pipeline needs a hidden trunk".into()));
            }
            let trunk = MlpParams::init(&mlp_sizes(d, &model_cfg.hidden[..model_cfg.hidden.len() - 1], model_cfg.hidden[model_cfg.hidden.len() - 1]), init)?;
            let mut hs = HeadSet::new(trunk);
            let r = loops::multihead(&mut ctx, stream, &mut hs);
            (Model::Heads(hs), r)
        }
        StrategyKind::FrozenOnline => {
            let projection = match model_cfg.projection {
                ProjectionKind::Identity => FrozenProjection::Identity { dim: d },
                ProjectionKind::RandomRelu => {
                    FrozenProjection::random_relu(d, model_cfg.projection_dim, init ^ 0x5EED)
                }
            };
            let linear = MlpParams::init(&[projection.output_dim(), c], init)?;
            let mut fc = FrozenClassifier { projection, linear };
            let r = loops::frozen_online(&mut ctx, stream, &mut fc);
            (Model::Frozen(fc), r)
        }
        kind => {
            let mut mlp = MlpParams::init(&mlp_sizes(d, &model_cfg.hidden, c), init)?;
            let r = match kind {
                StrategyKind::Naive => loops::naive(&mut ctx, stream, &mut mlp),
                StrategyKind::Rehearsal => loops::rehearsal(&mut ctx, stream, &mut mlp),
                StrategyKind::Berr => loops::berr(&mut ctx, stream, &mut mlp),
                StrategyKind::Replay | StrategyKind::Drl => loops::replay(&mut ctx, stream, &mut mlp),
                StrategyKind::FrozenOnline | StrategyKind::Multihead => unreachable!(),
            };
            (Model::Mlp(mlp), r)
        }
    };
    match outcome {
        Ok(()) => {}
        Err(Error::OverBudget(msg)) => {
            ctx.log.over_budget = true;
            ctx.log.notes.push(format!("aborted: {msg}"));
        }
        Err(e) => return Err(e),
    }

    let final_test = final_test_set(stream, cfg.validation_fraction);
    let priors = ctx.priors();
    let eval = evaluate(&model, &final_test, priors.as_deref())?;
    let mut log = std::mem::take(&mut ctx.log);
    log.final_test_acc = eval.accuracy;
    log.per_class_test_acc = eval.per_class;
    log.per_task_test_acc = eval.per_task;
    log.resources = ctx.meter.into_snapshots();
    log.stream_hash_before = hash_before;
    log.stream_hash_after = stream.content_hash();
    log.wall_clock_seconds = ctx.start.elapsed().as_secs_f64();
    Ok(Trained { log, model })
}

pub fn run(stream: &Stream, model_cfg: &ModelConfig, cfg: &StrategyConfig) -> Result<TrainLog> {
    Ok(train(stream, model_cfg, cfg, RunOptions::default())?.log)
}

fn run_as(
    kind: StrategyKind,
    stream: &Stream,
    model_cfg: &ModelConfig,
    cfg: &StrategyConfig,
) -> Result<TrainLog> {
    let cfg = StrategyConfig {
        kind,
        ..cfg.clone()
    };
    run(stream, model_cfg, &cfg)
}

pub fn run_naive(stream: &Stream, model_cfg: &ModelConfig, cfg: &StrategyConfig) -> Result<TrainLog> {
    run_as(StrategyKind::Naive, stream, model_cfg, cfg)
}

pub fn run_rehearsal_baseline(
    stream: &Stream,
    model_cfg: &ModelConfig,
    cfg: &StrategyConfig,
) -> Result<TrainLog> {
    run_as(StrategyKind::Rehearsal, stream, model_cfg, cfg)
}

pub fn run_berr(stream: &Stream, model_cfg: &ModelConfig, cfg: &StrategyConfig) -> Result<TrainLog> {
    run_as(StrategyKind::Berr, stream, model_cfg, cfg)
}

pub fn run_replay(stream: &Stream, model_cfg: &ModelConfig, cfg: &StrategyConfig) -> Result<TrainLog> {
    run_as(StrategyKind::Replay, stream, model_cfg, cfg)
}

pub fn run_drl(stream: &Stream, model_cfg: &ModelConfig, cfg: &StrategyConfig) -> Result<TrainLog> {
    run_as(StrategyKind::Drl, stream, model_cfg, cfg)
}

pub fn run_frozen_feature_online(
    stream: &Stream,
    model_cfg: &ModelConfig,
    cfg: &StrategyConfig,
) -> Result<TrainLog> {
    run_as(StrategyKind::FrozenOnline, stream, model_cfg, cfg)
}

pub fn run_multihead_pipeline(
    stream: &Stream,
    model_cfg: &ModelConfig,
    cfg: &StrategyConfig,
) -> Result<TrainLog> {
    if stream.protocol() != Protocol::MtNc {
        return Err(Error::Protocol(format!(
            "multi-head pipeline needs a task-labelled stream, got {}",
            stream.protocol()
        )));
    }
    run_as(StrategyKind::Multihead, stream, model_cfg, cfg)
}
