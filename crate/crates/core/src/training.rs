//! Epoch planning, training-pair batches and the plain (non-collaborative)
//! training loops used as baselines.
//!
//! Both the collaborative session and the plain loops draw from a client's
//! random stream in the same order: one shuffle at the start of every
//! epoch, then per image `t` followed by its noise. Routing by ownership
//! never consumes randomness.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{sample_training_pair, NoiseSample, VarianceSchedule};
use crate::net::{Model, NetError};
use crate::tensor::{ImageTensor, Tensor};

pub fn batches_per_epoch(n_images: usize, batch_size: usize) -> usize {
    n_images.div_ceil(batch_size.max(1))
}

/// Walks a shard in a fresh random order each epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochPlan {
    order: Vec<usize>,
    cursor: usize,
}

impl EpochPlan {
    pub fn new() -> Self {
        Self::default()
    }

    /// Indices of the next batch; the last batch of an epoch may be short.
    pub fn next_batch(&mut self, n_images: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if self.cursor == 0 {
            self.order = (0..n_images).collect();
            self.order.shuffle(rng);
        }
        let end = (self.cursor + batch_size.max(1)).min(n_images);
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = if end >= n_images { 0 } else { end };
        batch
    }
}

/// Draw one training pair per selected image, in order.
pub fn sample_pairs(
    shard: &ImageTensor,
    indices: &[usize],
    sched: &VarianceSchedule,
    rng: &mut ChaCha8Rng,
) -> Vec<NoiseSample> {
    indices
        .iter()
        .map(|&i| sample_training_pair(&shard.select(&[i]), sched, rng))
        .collect()
}

/// Training pairs stacked into batch tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub timesteps: Vec<usize>,
    pub x_t: ImageTensor,
    pub epsilon: ImageTensor,
}

impl PairBatch {
    pub fn from_pairs(pairs: &[&NoiseSample], item_shape: &[usize]) -> Self {
        let xs: Vec<&ImageTensor> = pairs.iter().map(|p| &p.x_t).collect();
        let es: Vec<&ImageTensor> = pairs.iter().map(|p| &p.epsilon).collect();
        Self {
            timesteps: pairs.iter().map(|p| p.t).collect(),
            x_t: Tensor::stack(&xs, item_shape).expect("pairs share the shard's image shape"),
            epsilon: Tensor::stack(&es, item_shape).expect("pairs share the shard's image shape"),
        }
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }
}

/// Loss and pair count of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    /// Index of the shard the batch came from.
    pub source: usize,
    pub pairs: usize,
    pub loss: f32,
}

/// Plain local DDPM training of one model on one shard.
pub fn train_local_plain(
    model: &mut Model,
    shard: &ImageTensor,
    sched: &VarianceSchedule,
    epochs: usize,
    batch_size: usize,
    lr: f32,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<StepRecord>, NetError> {
    let mut plan = EpochPlan::new();
    let n = shard.batch();
    let mut records = Vec::new();
    for epoch in 1..=epochs {
        for _ in 0..batches_per_epoch(n, batch_size) {
            let idx = plan.next_batch(n, batch_size, rng);
            let pairs = sample_pairs(shard, &idx, sched, rng);
            let refs: Vec<&NoiseSample> = pairs.iter().collect();
            let batch = PairBatch::from_pairs(&refs, &shard.shape()[1..]);
            let out = model.train_step(&batch.x_t, &batch.timesteps, &batch.epsilon, lr)?;
            records.push(StepRecord {
                epoch,
                source: 0,
                pairs: batch.len(),
                loss: out.loss,
            });
        }
    }
    Ok(records)
}

/// Plain centralized training: one model sees every client's batches,
/// interleaved batch-by-batch in client order, each client's pairs drawn
/// from that client's own stream.
pub fn train_central_plain(
    model: &mut Model,
    shards: &[ImageTensor],
    sched: &VarianceSchedule,
    epochs: usize,
    batch_size: usize,
    lr: f32,
    rngs: &mut [ChaCha8Rng],
) -> Result<Vec<StepRecord>, NetError> {
    let mut plans = vec![EpochPlan::new(); shards.len()];
    let per_client: Vec<usize> = shards.iter().map(|s| batches_per_epoch(s.batch(), batch_size)).collect();
    let max_batches = per_client.iter().copied().max().unwrap_or(0);
    let mut records = Vec::new();
    for epoch in 1..=epochs {
        for b in 0..max_batches {
            for (k, shard) in shards.iter().enumerate() {
                if b >= per_client[k] {
                    continue;
                }
                let idx = plans[k].next_batch(shard.batch(), batch_size, &mut rngs[k]);
                let pairs = sample_pairs(shard, &idx, sched, &mut rngs[k]);
                let refs: Vec<&NoiseSample> = pairs.iter().collect();
                let batch = PairBatch::from_pairs(&refs, &shard.shape()[1..]);
                let out = model.train_step(&batch.x_t, &batch.timesteps, &batch.epsilon, lr)?;
                records.push(StepRecord {
                    epoch,
                    source: k,
                    pairs: batch.len(),
                    loss: out.loss,
                });
            }
        }
    }
    Ok(records)
}
