//! Training loop: augmented samples feed per-sample graphs, gradients
//! accumulate to the effective batch, AdamW applies the one-cycle schedule.
//! Deterministic under a fixed seed: sample order, augmentation draws and
//! radar dropout all come from streams keyed by (seed, epoch, sample).

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment_sample, sample_augs};
use crate::cfg::TrainConfig;
use crate::diff::{Gradients, Tensor};
use crate::loss::LossWeights;
use crate::metrics::IouAccumulator;
use crate::model::{ModelError, Sample, SegModel};
use crate::optim::{one_cycle_lr, AdamW};

#[derive(Clone, Debug, PartialEq)]
pub enum TrainError {
    EmptyDataset,
    NonFiniteLoss { epoch: usize, step: usize },
    Model(ModelError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::EmptyDataset => write!(f, "training dataset is empty"),
            TrainError::NonFiniteLoss { epoch, step } => {
                write!(f, "non-finite loss at epoch {epoch}, step {step}; aborting")
            }
            TrainError::Model(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_iou: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TrainEvent {
    Step(StepRecord),
    Epoch(EpochRecord),
}

#[derive(Clone, Debug, Default)]
pub struct TrainSummary {
    pub steps: usize,
    pub epochs: usize,
    pub final_val_iou: f64,
    pub records: Vec<EpochRecord>,
}

fn mix_seed(a: u64, b: u64, c: u64) -> u64 {
    let mut x = a
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(b.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(c.wrapping_mul(0x94d0_49bb_1331_11eb));
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x
}

/// Augmentation + radar dropout for one (epoch, sample) pair, drawn from its
/// own RNG stream.
fn prepare_sample(model: &SegModel, tcfg: &TrainConfig, sample: &Sample, epoch: usize, index: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(tcfg.seed, epoch as u64, index as u64));
    let (img_aug, bev_aug) = sample_augs(&tcfg.aug, &mut rng);
    let mut out = augment_sample(
        sample,
        &img_aug,
        &bev_aug,
        &model.cfg.internal,
        &model.cfg.output,
    );
    if tcfg.radar_drop_prob > 0.0 && rng.gen_bool(tcfg.radar_drop_prob.min(1.0)) {
        out.cloud.points.clear();
        out.cloud.sweep_index.clear();
    }
    out
}

fn sample_loss_and_grads(
    model: &SegModel,
    sample: &Sample,
    weights: &LossWeights,
    no_radar: bool,
) -> Result<(f64, Gradients), ModelError> {
    let mut g = model.build_training_graph(sample, weights, no_radar)?;
    g.run_forward()?;
    let loss = g.value(g.output_id("loss").expect("loss marked")).item();
    let mut seeds = BTreeMap::new();
    seeds.insert(String::from("loss"), Tensor::scalar(1.0));
    let grads = g.backward(&seeds)?;
    Ok((loss, grads))
}

#[cfg(feature = "std")]
fn batch_losses_and_grads(
    model: &SegModel,
    batch: &[Sample],
    weights: &LossWeights,
    no_radar: bool,
) -> Result<Vec<(f64, Gradients)>, ModelError> {
    if batch.len() <= 1 {
        return batch
            .iter()
            .map(|s| sample_loss_and_grads(model, s, weights, no_radar))
            .collect();
    }
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(batch.len());
    if workers <= 1 {
        return batch
            .iter()
            .map(|s| sample_loss_and_grads(model, s, weights, no_radar))
            .collect();
    }
    // samples run independently; results are reduced in index order so the
    // sum is identical to the serial path
    let mut results: Vec<Option<Result<(f64, Gradients), ModelError>>> =
        (0..batch.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut pending: Vec<(usize, &Sample, &mut Option<Result<(f64, Gradients), ModelError>>)> =
            batch.iter().enumerate().zip(results.iter_mut()).map(|((i, s), r)| (i, s, r)).collect();
        let mut handles = Vec::new();
        while !pending.is_empty() {
            let take = pending.len().min(workers);
            let chunk: Vec<_> = pending.drain(..take).collect();
            for (_, sample, slot) in chunk {
                let handle = scope.spawn(move || sample_loss_and_grads(model, sample, weights, no_radar));
                handles.push((handle, slot));
            }
            for (handle, slot) in handles.drain(..) {
                *slot = Some(handle.join().expect("worker panicked"));
            }
        }
    });
    results.into_iter().map(|r| r.expect("filled")).collect()
}

#[cfg(not(feature = "std"))]
fn batch_losses_and_grads(
    model: &SegModel,
    batch: &[Sample],
    weights: &LossWeights,
    no_radar: bool,
) -> Result<Vec<(f64, Gradients)>, ModelError> {
    batch
        .iter()
        .map(|s| sample_loss_and_grads(model, s, weights, no_radar))
        .collect()
}

/// Dataset-level IoU of the model over `samples` at threshold 0.5 with the
/// visibility ignore masks applied.
pub fn evaluate_iou(
    model: &SegModel,
    samples: &[Sample],
    no_radar: bool,
) -> Result<f64, ModelError> {
    let mut acc = IouAccumulator::default();
    for s in samples {
        let cloud = if no_radar { None } else { Some(&s.cloud) };
        let logits = model.infer(&s.images, &s.calibs, cloud)?;
        acc.add(&logits, &s.gt, 0.5, Some(&s.ignore));
    }
    Ok(acc.value())
}

/// Run the optimizer over the dataset. The trailing `val_fraction` of the
/// dataset validates; with no held-out slice the training set validates.
pub fn train_loop(
    model: &mut SegModel,
    dataset: &[Sample],
    tcfg: &TrainConfig,
    weights: &LossWeights,
    mut emit: impl FnMut(&TrainEvent),
) -> Result<TrainSummary, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let val_len = ((dataset.len() as f64) * tcfg.val_fraction) as usize;
    let train_len = dataset.len() - val_len.min(dataset.len().saturating_sub(1));
    let (train_set, val_set) = dataset.split_at(train_len);
    let val_set = if val_set.is_empty() { train_set } else { val_set };

    let batch = tcfg.effective_batch.max(1);
    let steps_per_epoch = train_len.div_ceil(batch).max(1);
    let planned = tcfg.epochs * steps_per_epoch;
    let total_steps = if tcfg.max_steps > 0 {
        planned.min(tcfg.max_steps)
    } else {
        planned
    };
    let warmup = tcfg.warmup_epochs * steps_per_epoch;

    let mut opt = AdamW::new(tcfg.weight_decay);
    let mut summary = TrainSummary::default();
    let mut step = 0usize;

    for epoch in 0..tcfg.epochs {
        // deterministic shuffle keyed by (seed, epoch)
        let mut order: Vec<usize> = (0..train_len).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(tcfg.seed, epoch as u64, 0xdead));
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        let mut cursor = 0usize;
        let mut last_lr = 0.0;
        let mut capped = false;
        while cursor < order.len() {
            if step >= total_steps {
                capped = true;
                break;
            }
            let take = batch.min(order.len() - cursor);
            let prepared: Vec<Sample> = order[cursor..cursor + take]
                .iter()
                .map(|&idx| prepare_sample(model, tcfg, &train_set[idx], epoch, idx))
                .collect();
            cursor += take;

            let results = batch_losses_and_grads(model, &prepared, weights, tcfg.no_radar)?;
            let mut mean_grads: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut batch_loss = 0.0;
            for (loss, grads) in &results {
                batch_loss += loss;
                for (name, grad) in &grads.params {
                    match mean_grads.get_mut(name) {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(grad.data()) {
                                *a += b;
                            }
                        }
                        None => {
                            mean_grads.insert(name.clone(), grad.clone());
                        }
                    }
                }
            }
            let scale = 1.0 / take as f64;
            batch_loss *= scale;
            for grad in mean_grads.values_mut() {
                for v in grad.data_mut() {
                    *v *= scale;
                }
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step });
            }

            let lr = one_cycle_lr(step, warmup, total_steps, tcfg.peak_lr);
            opt.step(&mut model.store, &mean_grads, lr);
            last_lr = lr;
            step += 1;
            epoch_loss += batch_loss;
            epoch_batches += 1;
            emit(&TrainEvent::Step(StepRecord {
                epoch,
                step,
                lr,
                loss: batch_loss,
            }));
        }
        if epoch_batches > 0 {
            let val_iou = evaluate_iou(model, val_set, tcfg.no_radar)?;
            let record = EpochRecord {
                epoch,
                step,
                lr: last_lr,
                train_loss: epoch_loss / epoch_batches as f64,
                val_iou,
            };
            emit(&TrainEvent::Epoch(record));
            summary.records.push(record);
            summary.epochs = epoch + 1;
            summary.final_val_iou = val_iou;
        }
        if capped || epoch_batches == 0 {
            break;
        }
    }
    summary.steps = step;
    Ok(summary)
}
