use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::model::{ModelParams, Sample};
use crate::optim::{AdamConfig, AdamState};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2,
            batch_size: 32,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean of `per_sample_losses`.
    pub mean_loss: f64,
    /// Loss of every local sample under the trained parameters.
    pub per_sample_losses: Vec<f64>,
    pub steps: u64,
}

pub fn sample_losses(params: &ModelParams, samples: &[Sample]) -> Result<Vec<f64>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| params.sample_loss(s).map_err(|e| e.context(format!("sample {i}"))))
        .collect()
}

/// Mini-batch Adam on one client's data, starting from a fresh optimizer
/// state. The sample order is reshuffled every epoch from `seed`; a trailing
/// partial batch is kept.
pub fn local_train(
    params: &ModelParams,
    data: &ClientDataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    if data.samples.is_empty() {
        return Err(Error::config(format!("client {} has no samples", data.client_id)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let mut params = params.clone();
    let mut state = AdamState::new(params.param_count(), cfg.adam)?;
    let mut rng = rng::rng_for(seed, &[]);
    let mut order: Vec<usize> = (0..data.samples.len()).collect();
    let mut grad = vec![0.0; params.param_count()];
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                params
                    .accumulate_grad(&data.samples[i], scale, &mut grad)
                    .map_err(|e| e.context(format!("client {} sample {i}", data.client_id)))?;
            }
            state.step(&mut params, &grad)?;
        }
    }
    let per_sample_losses = sample_losses(&params, &data.samples)
        .map_err(|e| e.context(format!("client {}", data.client_id)))?;
    let mean_loss = per_sample_losses.iter().sum::<f64>() / per_sample_losses.len() as f64;
    Ok(TrainOutcome {
        params,
        mean_loss,
        per_sample_losses,
        steps: state.step_count,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
}

pub fn evaluate(params: &ModelParams, test: &[Sample]) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::config("cannot evaluate on an empty test set"));
    }
    let mut correct = 0usize;
    let mut total_loss = 0.0;
    for s in test {
        let logits = params.forward(&s.features)?;
        if crate::model::argmax(&logits) == s.label {
            correct += 1;
        }
        total_loss += crate::model::loss(&logits, s.label)?;
    }
    let n = test.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        mean_loss: total_loss / n,
    })
}
