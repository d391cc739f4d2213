use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, evaluate, Mode, ModelError, ModelParams, PreparedSample, Result, STREAM_DROPOUT, STREAM_ORDER};
use crate::tensor::{Adam, AdamConfig, Parameters, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch: usize,
    pub epochs: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch: 32,
            epochs: 20,
            patience: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub dev_accuracy: f64,
    /// Samples whose gold had no mention and was scored at the floor logit.
    pub floor_events: usize,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best snapshot by dev accuracy, rounded to `f32` so that a checkpoint
    /// of it evaluates identically.
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_dev_accuracy: f64,
    pub adam_steps: u64,
}

fn accumulate(sum: &mut [Vec<f64>], grads: &[Tensor]) {
    for (s, g) in sum.iter_mut().zip(grads) {
        for (a, b) in s.iter_mut().zip(g.data()) {
            *a += b;
        }
    }
}

/// Mini-batch Adam on the mean batch loss with early stopping on dev
/// accuracy. Per-sample gradients may be computed concurrently; they are
/// always summed in sample order, so results do not depend on thread count.
pub fn train(
    init: ModelParams,
    train: &[PreparedSample],
    dev: &[PreparedSample],
    config: &TrainConfig,
    mut progress: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(ModelError::EmptyTrainSet);
    }
    let batch = config.batch.max(1);
    let mut params = init;
    let mut adam = Adam::new(config.adam, &params);
    let mut best = params.rounded();
    let mut best_acc = if dev.is_empty() { 0.0 } else { evaluate(&best, dev)?.accuracy };
    let mut best_epoch = None;
    let mut log = Vec::new();
    let mut stale = 0;
    let shapes: Vec<usize> = {
        let mut v = Vec::new();
        params.visit(&mut |t| v.push(t.len()));
        v
    };
    let chunk = rayon::current_num_threads().max(1);

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, STREAM_ORDER, epoch as u64])));
        let mut total_loss = 0.0;
        let mut counted = 0usize;
        let mut floor_events = 0;
        for (b, idx) in order.chunks(batch).enumerate() {
            let mut sum: Vec<Vec<f64>> = shapes.iter().map(|&n| vec![0.0; n]).collect();
            let mut used = 0usize;
            for part in idx.chunks(chunk) {
                let results: Vec<_> = part
                    .par_iter()
                    .enumerate()
                    .map(|(k, &i)| {
                        let seed = derive_seed(&[config.seed, STREAM_DROPOUT, epoch as u64, (b * batch + k) as u64]);
                        params.sample_gradients(&train[i], Mode::Train { seed })
                    })
                    .collect();
                for r in results {
                    if let Some((loss, floored, grads)) = r? {
                        total_loss += loss;
                        counted += 1;
                        floor_events += floored as usize;
                        used += 1;
                        accumulate(&mut sum, &grads);
                    }
                }
            }
            if used == 0 {
                continue;
            }
            let mut k = 0;
            let mut grads = Vec::with_capacity(sum.len());
            params.visit(&mut |t| {
                let data = std::mem::take(&mut sum[k]).into_iter().map(|g| g / used as f64).collect();
                grads.push(Tensor::new(t.shape().to_vec(), data).expect("aligned gradient"));
                k += 1;
            });
            adam.step(&mut params, &grads)?;
        }
        let snapshot = params.rounded();
        let dev_accuracy = if dev.is_empty() { 0.0 } else { evaluate(&snapshot, dev)?.accuracy };
        let improved = best_epoch.is_none() || dev_accuracy > best_acc;
        if improved {
            best = snapshot;
            best_acc = dev_accuracy;
            best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
        }
        let entry = EpochLog {
            epoch,
            loss: if counted > 0 { total_loss / counted as f64 } else { 0.0 },
            dev_accuracy,
            floor_events,
            improved,
        };
        log::info!("epoch {epoch}: loss {:.5}, dev accuracy {:.4}", entry.loss, entry.dev_accuracy);
        progress(&entry);
        log.push(entry);
        if stale >= config.patience.max(1) {
            break;
        }
    }
    Ok(TrainOutcome {
        params: best,
        log,
        best_epoch,
        best_dev_accuracy: best_acc,
        adam_steps: adam.steps_taken(),
    })
}
