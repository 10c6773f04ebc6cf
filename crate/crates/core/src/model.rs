//! A small fully connected classifier with hand-written reverse-mode
//! differentiation. Hidden layers use ReLU, the output layer is linear and the
//! loss is softmax cross-entropy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// One labelled example. Features live in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

impl Sample {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Sample { features, label }
    }
}

/// Shape of one dense layer: `outputs x inputs` weights followed by `outputs`
/// biases in the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
}

impl LayerShape {
    pub fn weight_count(&self) -> usize {
        self.inputs * self.outputs
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.outputs
    }
}

/// Flat parameter vector plus the layer layout needed to interpret it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    values: Vec<f64>,
    layers: Vec<LayerShape>,
}

fn layers_from_dims(layer_dims: &[usize]) -> Result<Vec<LayerShape>> {
    if layer_dims.len() < 2 {
        return Err(Error::config(format!(
            "a model needs at least an input and an output width, got {layer_dims:?}"
        )));
    }
    if layer_dims.contains(&0) {
        return Err(Error::config(format!(
            "layer widths must be positive, got {layer_dims:?}"
        )));
    }
    Ok(layer_dims
        .windows(2)
        .map(|w| LayerShape {
            inputs: w[0],
            outputs: w[1],
        })
        .collect())
}

impl ModelParams {
    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        let layers = layers_from_dims(layer_dims)?;
        let count = layers.iter().map(LayerShape::param_count).sum();
        Ok(ModelParams {
            values: vec![0.0; count],
            layers,
        })
    }

    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        let mut params = Self::zeros(layer_dims)?;
        let mut rng = rng::rng_for(seed, &[tag::MODEL_INIT]);
        let mut offset = 0;
        for layer in &params.layers {
            let bound = 1.0 / (layer.inputs as f64).sqrt();
            for w in &mut params.values[offset..offset + layer.weight_count()] {
                *w = rng.random_range(-bound..=bound);
            }
            offset += layer.param_count();
        }
        Ok(params)
    }

    pub fn from_values(layer_dims: &[usize], values: Vec<f64>) -> Result<Self> {
        let mut params = Self::zeros(layer_dims)?;
        if values.len() != params.values.len() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                params.values.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("parameter {i} is not finite")));
        }
        params.values = values;
        Ok(params)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].inputs];
        dims.extend(self.layers.iter().map(|l| l.outputs));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.values.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.layers == other.layers
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check_input(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "model expects {} features, got {}",
                self.input_dim(),
                features.len()
            )));
        }
        Ok(())
    }

    /// Computes the layer outputs. `acts[0]` is the input, `acts[l + 1]` the
    /// (post-ReLU for hidden layers) output of layer `l`.
    fn forward_cached(&self, features: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(features.to_vec());
        let mut offset = 0;
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let weights = &self.values[offset..offset + layer.weight_count()];
            let biases = &self.values[offset + layer.weight_count()..offset + layer.param_count()];
            let input = &acts[l];
            let out: Vec<f64> = weights
                .chunks_exact(layer.inputs)
                .zip(biases)
                .map(|(row, b)| {
                    let z = row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b;
                    if l < last {
                        z.max(0.0)
                    } else {
                        z
                    }
                })
                .collect();
            acts.push(out);
            offset += layer.param_count();
        }
        acts
    }

    pub fn forward(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.check_input(features)?;
        Ok(self.forward_cached(features).pop().expect("at least one layer"))
    }

    /// Adds `scale * d loss / d params` for one sample into `grad` and returns
    /// the sample's loss.
    pub fn accumulate_grad(&self, sample: &Sample, scale: f64, grad: &mut [f64]) -> Result<f64> {
        self.check_input(&sample.features)?;
        if grad.len() != self.values.len() {
            return Err(Error::shape(format!(
                "gradient buffer has {} entries, model has {}",
                grad.len(),
                self.values.len()
            )));
        }
        let acts = self.forward_cached(&sample.features);
        let logits = acts.last().expect("at least one layer");
        let loss_value = loss(logits, sample.label)?;

        // d loss / d logits = softmax - onehot
        let mut delta = softmax(logits);
        delta[sample.label] -= 1.0;

        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut offset = 0;
        for layer in &self.layers {
            offsets.push(offset);
            offset += layer.param_count();
        }

        for (l, layer) in self.layers.iter().enumerate().rev() {
            let base = offsets[l];
            let input = &acts[l];
            let (w_grad, b_grad) =
                grad[base..base + layer.param_count()].split_at_mut(layer.weight_count());
            for (o, d) in delta.iter().enumerate() {
                let row = &mut w_grad[o * layer.inputs..(o + 1) * layer.inputs];
                for (g, x) in row.iter_mut().zip(input) {
                    *g += scale * d * x;
                }
                b_grad[o] += scale * d;
            }
            if l == 0 {
                break;
            }
            let weights = &self.values[base..base + layer.weight_count()];
            let mut prev = vec![0.0; layer.inputs];
            for (o, d) in delta.iter().enumerate() {
                let row = &weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += w * d;
                }
            }
            // ReLU derivative, taken as 0 at the kink.
            for (p, a) in prev.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
        if !loss_value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite loss or gradient".into()));
        }
        Ok(loss_value)
    }

    /// Gradient of the sample loss with respect to every parameter.
    pub fn per_sample_grad(&self, sample: &Sample) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.values.len()];
        self.accumulate_grad(sample, 1.0, &mut grad)?;
        Ok(grad)
    }

    pub fn sample_loss(&self, sample: &Sample) -> Result<f64> {
        let logits = self.forward(&sample.features)?;
        loss(&logits, sample.label)
    }

    /// Index of the largest logit; ties go to the lowest class.
    pub fn predict(&self, features: &[f64]) -> Result<usize> {
        let logits = self.forward(features)?;
        Ok(argmax(&logits))
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax cross-entropy, evaluated with the max-shifted log-sum-exp.
pub fn loss(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::shape(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let value = (lse - logits[label]).max(0.0);
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss for logits {logits:?}")));
    }
    Ok(value)
}

/// L2 norms of per-sample gradients over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerSampleGradStats {
    pub norms: Vec<f64>,
    pub mean_square: f64,
    pub count: usize,
}

impl PerSampleGradStats {
    pub fn from_norms(norms: Vec<f64>) -> Self {
        let count = norms.len();
        let mean_square = if count == 0 {
            0.0
        } else {
            norms.iter().map(|n| n * n).sum::<f64>() / count as f64
        };
        PerSampleGradStats {
            norms,
            mean_square,
            count,
        }
    }

    pub fn compute(params: &ModelParams, samples: &[Sample]) -> Result<Self> {
        let mut grad = vec![0.0; params.param_count()];
        let mut norms = Vec::with_capacity(samples.len());
        for (i, sample) in samples.iter().enumerate() {
            grad.iter_mut().for_each(|g| *g = 0.0);
            params
                .accumulate_grad(sample, 1.0, &mut grad)
                .map_err(|e| e.context(format!("sample {i}")))?;
            norms.push(grad.iter().map(|g| g * g).sum::<f64>().sqrt());
        }
        Ok(Self::from_norms(norms))
    }
}
