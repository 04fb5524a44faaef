use std::collections::BTreeSet;

use rand::seq::index;

use super::{full_gradient, to_samples, Ctx, FrozenClassifier};
use crate::error::{Error, Result};
use crate::memory::{dump, QuotaMemory, ReplayMemory, ReservoirMemory, Sample};
use crate::model::{grad_alignment, HeadRef, HeadSet, MlpParams};
use crate::streamgen::Stream;
use super::{AlignmentRecord, MemoryUpdate, StrategyKind};

fn refs(data: &[Sample<f64>]) -> Vec<&Sample<f64>> {
    data.iter().collect()
}

/// Fine-tunes on each batch in turn.
pub(super) fn naive(ctx: &mut Ctx, stream: &Stream, model: &mut MlpParams<f64>) -> Result<()> {
    let cfg = ctx.cfg.clone();
    for batch in stream.batches() {
        let data = to_samples(&batch.examples);
        ctx.observe_labels(&data);
        for _ in 0..cfg.epochs {
            ctx.epoch_mlp(model, &refs(&data), cfg.lr, None)?;
            ctx.snapshot(model.size_bytes(), 0);
        }
        ctx.end_batch(model, 0)?;
    }
    Ok(())
}

/// Trains on each batch joined with a growing store of `growing_quota`
/// random samples from every earlier batch.
pub(super) fn rehearsal(ctx: &mut Ctx, stream: &Stream, model: &mut MlpParams<f64>) -> Result<()> {
    let cfg = ctx.cfg.clone();
    let mut memory = crate::memory::GrowingMemory::new(cfg.growing_quota);
    for batch in stream.batches() {
        let data = to_samples(&batch.examples);
        ctx.observe_labels(&data);
        let mut train: Vec<&Sample<f64>> = refs(&data);
        let stored = memory.items();
        train.extend(stored.iter().copied());
        for _ in 0..cfg.epochs {
            ctx.epoch_mlp(model, &train, cfg.lr, None)?;
            ctx.snapshot(model.size_bytes(), memory.size_bytes());
        }
        memory.update(&data, &mut ctx.mem_rng);
        ctx.end_batch(model, memory.len())?;
    }
    Ok(())
}

fn update_reservoir(ctx: &mut Ctx, memory: &mut ReservoirMemory<f64>, data: &[Sample<f64>]) {
    match ctx.cfg.memory_update {
        MemoryUpdate::Reservoir => {
            for s in data {
                memory.update(s.clone(), &mut ctx.mem_rng);
            }
        }
        MemoryUpdate::Subsample(k) => {
            let k = k.min(data.len());
            let mut idx = index::sample(&mut ctx.mem_rng, data.len(), k).into_vec();
            idx.sort_unstable();
            for i in idx {
                memory.update(data[i].clone(), &mut ctx.mem_rng);
            }
        }
    }
}

/// Batch-level replay from a reservoir, then one review pass over a memory
/// sample at a reduced learning rate once the stream ends.
pub(super) fn berr(ctx: &mut Ctx, stream: &Stream, model: &mut MlpParams<f64>) -> Result<()> {
    let cfg = ctx.cfg.clone();
    let mut memory = ReservoirMemory::new(cfg.mem_sz);
    // With nothing ever replayed or reviewed the memory is never read, so it
    // is not filled and the run follows the naive trajectory exactly.
    let memory_used = cfg.replay_sz > 0 || cfg.review_sz > 0;
    for (t, batch) in stream.batches().iter().enumerate() {
        let data = to_samples(&batch.examples);
        ctx.observe_labels(&data);
        for _ in 0..cfg.epochs {
            let replay = if t > 0 && cfg.replay_sz > 0 {
                memory.sample(cfg.replay_sz, &mut ctx.mem_rng)
            } else {
                Vec::new()
            };
            let mut train = refs(&data);
            train.extend(replay.iter());
            ctx.epoch_mlp(model, &train, cfg.lr_replay, None)?;
            ctx.snapshot(model.size_bytes(), memory.size_bytes());
        }
        if memory_used {
            update_reservoir(ctx, &mut memory, &data);
        }
        ctx.end_batch(model, memory.len())?;
    }
    if cfg.review_sz > memory.len() {
        ctx.log.notes.push(format!(
            "review_sz {} clamped to memory size {}",
            cfg.review_sz,
            memory.len()
        ));
    }
    let review = memory.sample(cfg.review_sz, &mut ctx.mem_rng);
    if !review.is_empty() {
        ctx.epoch_mlp(model, &refs(&review), cfg.lr_review, None)?;
        ctx.snapshot(model.size_bytes(), memory.size_bytes());
    }
    Ok(())
}

/// Mini-batch replay: every step trains on the incoming rows plus
/// `replay_sz` reservoir samples. With `StrategyKind::Drl` the step loss
/// adds the weighted representation term.
pub(super) fn replay(ctx: &mut Ctx, stream: &Stream, model: &mut MlpParams<f64>) -> Result<()> {
    let cfg = ctx.cfg.clone();
    let drl = (cfg.kind == StrategyKind::Drl).then_some(cfg.drl);
    let mut memory = ReservoirMemory::new(cfg.mem_sz);
    for (t, batch) in stream.batches().iter().enumerate() {
        let data = to_samples(&batch.examples);
        ctx.observe_labels(&data);
        if cfg.log_alignment && t > 0 && !memory.is_empty() {
            let g_t = full_gradient(model, &refs(&data))?;
            let g_k = full_gradient(model, &memory.items())?;
            let (inner, cosine) = grad_alignment(&g_t, &g_k)?;
            ctx.log.alignment.push(AlignmentRecord {
                batch: t,
                inner,
                cosine,
            });
        }
        for _ in 0..cfg.epochs {
            let order = ctx.shuffled_indices(data.len());
            for chunk in order.chunks(cfg.minibatch) {
                let replayed = memory.sample(cfg.replay_sz, &mut ctx.mem_rng);
                let mut rows: Vec<&Sample<f64>> = chunk.iter().map(|&i| &data[i]).collect();
                rows.extend(replayed.iter());
                ctx.step_mlp(model, &rows, cfg.lr, drl.as_ref())?;
            }
            ctx.snapshot(model.size_bytes(), memory.size_bytes());
        }
        update_reservoir(ctx, &mut memory, &data);
        ctx.end_batch(model, memory.len())?;
    }
    Ok(())
}

/// A fixed projection feeds a linear classifier trained one pass per
/// mini-batch with replay of stored projected features.
pub(super) fn frozen_online(ctx: &mut Ctx, stream: &Stream, model: &mut FrozenClassifier) -> Result<()> {
    let cfg = ctx.cfg.clone();
    let mut memory = ReservoirMemory::new(cfg.mem_sz);
    let proj_params = model.projection.size_bytes() / std::mem::size_of::<f64>();
    for batch in stream.batches() {
        let data = to_samples(&batch.examples);
        ctx.observe_labels(&data);
        let order = ctx.shuffled_indices(data.len());
        for chunk in order.chunks(cfg.minibatch) {
            let reps: Vec<Sample<f64>> = chunk
                .iter()
                .map(|&i| Sample {
                    features: model.projection.project(&data[i].features),
                    label: data[i].label,
                    task: data[i].task,
                })
                .collect();
            ctx.log.work_units += (reps.len() * proj_params) as u64;
            let replayed = memory.sample(cfg.replay_sz, &mut ctx.mem_rng);
            let mut rows = refs(&reps);
            rows.extend(replayed.iter());
            ctx.step_mlp(&mut model.linear, &rows, cfg.lr, None)?;
            for r in reps {
                memory.update(r, &mut ctx.mem_rng);
            }
        }
        ctx.snapshot(model.linear.size_bytes() + model.projection.size_bytes(), memory.size_bytes());
        ctx.end_batch(&*model, memory.len())?;
    }
    Ok(())
}

/// Per-task heads over a shared trunk with a quota exemplar store:
/// new head alone, then joint trunk training through a temporary head over
/// all classes seen, then each task head refit on its exemplars.
pub(super) fn multihead(ctx: &mut Ctx, stream: &Stream, model: &mut HeadSet<f64>) -> Result<()> {
    let cfg = ctx.cfg.clone();
    let mut memory: QuotaMemory<f64> = QuotaMemory::new(cfg.quota_budget);
    let mut seen: BTreeSet<u32> = BTreeSet::new();
    let mut task_ids: Vec<u32> = Vec::new();
    for (i, batch) in stream.batches().iter().enumerate() {
        let task = batch
            .task
            .ok_or_else(|| Error::Protocol(format!("batch {i} has no task label")))?;
        if task_ids.contains(&task) {
            return Err(Error::Protocol(format!("task {task} appears twice")));
        }
        let data = to_samples(&batch.examples);
        ctx.observe_labels(&data);
        let classes: Vec<u32> = batch.labels().into_iter().collect();
        seen.extend(classes.iter().copied());
        model.add_head(task, classes, ctx.head_seed(u64::from(task)))?;
        task_ids.push(task);
        let first = i == 0;
        for _ in 0..cfg.epochs {
            ctx.epoch_heads(model, HeadRef::Task(task), &refs(&data), cfg.lr, first)?;
            ctx.snapshot(model.size_bytes(), memory.size_bytes());
        }
        memory.rebalance(i, &data, &mut ctx.mem_rng)?;
        ctx.persist("exemplars.clb", &dump(&memory.items())?)?;
        if !first {
            let all: Vec<u32> = seen.iter().copied().collect();
            model.set_temporary_classes(&all, ctx.head_seed(u64::MAX));
            let pool = memory.items();
            for _ in 0..cfg.pipeline_epochs {
                ctx.epoch_heads(model, HeadRef::Temporary, &pool, cfg.lr, true)?;
                ctx.snapshot(model.size_bytes(), memory.size_bytes());
            }
            for (j, &tj) in task_ids.iter().enumerate() {
                let store = refs(memory.store(j).unwrap_or(&[]));
                for _ in 0..cfg.pipeline_epochs {
                    ctx.epoch_heads(model, HeadRef::Task(tj), &store, cfg.lr, false)?;
                }
            }
            ctx.snapshot(model.size_bytes(), memory.size_bytes());
        }
        ctx.end_batch(&*model, memory.len())?;
    }
    Ok(())
}
