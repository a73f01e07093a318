//! Dense rectified network mapping input features to embeddings.
//!
//! Every layer is `z = x·Wᵀ + b`; all layers except the last are followed by
//! `max(z, 0)`. The final layer is linear so embeddings are unconstrained.

mod adam;
mod checkpoint;

pub use adam::{adam_step, learning_rate, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::EmbeddingBatch;

/// One affine layer. `weight` is `[out × in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::Config(format!(
                "layer weight has {} rows but bias has {} entries",
                weight.nrows(),
                bias.len()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }
}

/// Network parameters. The same shape is reused for gradients and Adam moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "checkpoint::ParamsRecord", try_from = "checkpoint::ParamsRecord")]
pub struct MlpParams {
    layers: Vec<Dense>,
}

impl MlpParams {
    /// Builds a network from explicit layers, checking that dimensions chain.
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::Config(format!(
                    "layer {i} outputs {} values but layer {} expects {}",
                    pair[0].outputs(),
                    i + 1,
                    pair[1].inputs()
                )));
            }
        }
        if layers.iter().any(|l| l.outputs() == 0 || l.inputs() == 0) {
            return Err(Error::Config("layer dimensions must be positive".into()));
        }
        Ok(Self { layers })
    }

    /// He-initialised network with the given layer widths, e.g. `[input, 256, 128]`.
    pub fn init<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(
                "network widths need an input and an output size".into(),
            ));
        }
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let gain = if i == last { 1.0 } else { 2.0 };
                let std = (gain / fan_in.max(1) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || normal.sample(rng));
                Dense {
                    weight,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs(), l.outputs()))
                .collect(),
        }
    }

    pub fn same_shape(&self, other: &MlpParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.dim() == b.weight.dim() && a.bias.len() == b.bias.len())
    }

    /// All parameters in a fixed order: per layer, weights row-major then bias.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }
}

/// Input feature rows with identity labels.
#[derive(Debug, Clone, PartialEq)]
pub struct InputBatch {
    pub rows: Array2<f64>,
    pub labels: Vec<usize>,
}

impl InputBatch {
    pub fn new(rows: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if rows.nrows() != labels.len() {
            return Err(Error::Structure(format!(
                "{} input rows but {} labels",
                rows.nrows(),
                labels.len()
            )));
        }
        Ok(Self { rows, labels })
    }
}

/// Intermediate values kept by the forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `layer_inputs[i]` is the input to layer `i`; `layer_inputs[0]` is the batch.
    pub layer_inputs: Vec<Array2<f64>>,
    /// Pre-activation output of every layer.
    pub pre_activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    /// Sign pattern of all hidden pre-activations; changes when a rectifier kink is crossed.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let hidden = self.pre_activations.len().saturating_sub(1);
        self.pre_activations[..hidden]
            .iter()
            .flat_map(|z| z.iter().map(|&v| v > 0.0))
            .collect()
    }
}

/// Runs the network over raw feature rows.
pub fn forward_rows(
    params: &MlpParams,
    rows: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, ForwardCache)> {
    if rows.ncols() != params.input_dim() {
        return Err(Error::Config(format!(
            "inputs have {} features but the network expects {}",
            rows.ncols(),
            params.input_dim()
        )));
    }
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite value in network input".into()));
    }
    let n_layers = params.layers.len();
    let mut layer_inputs = Vec::with_capacity(n_layers);
    let mut pre_activations = Vec::with_capacity(n_layers);
    let mut current = rows.to_owned();
    for (i, layer) in params.layers.iter().enumerate() {
        let z = current.dot(&layer.weight.t()) + &layer.bias;
        layer_inputs.push(current);
        current = if i + 1 < n_layers {
            z.mapv(|v| v.max(0.0))
        } else {
            z.clone()
        };
        pre_activations.push(z);
    }
    Ok((
        current,
        ForwardCache {
            layer_inputs,
            pre_activations,
        },
    ))
}

/// Embeds a labelled input batch.
pub fn mlp_forward(
    params: &MlpParams,
    inputs: &InputBatch,
) -> Result<(EmbeddingBatch, ForwardCache)> {
    let (embeddings, cache) = forward_rows(params, inputs.rows.view())?;
    let batch = EmbeddingBatch::new(embeddings, inputs.labels.clone())?;
    Ok((batch, cache))
}

/// Backpropagates `grad_embeddings` (∂loss/∂embedding) to every weight and bias.
///
/// The rectifier derivative is taken as 0 where the pre-activation is exactly 0.
pub fn mlp_backward(
    params: &MlpParams,
    cache: &ForwardCache,
    grad_embeddings: ArrayView2<'_, f64>,
) -> Result<MlpParams> {
    let n_layers = params.layers.len();
    if cache.pre_activations.len() != n_layers || cache.layer_inputs.len() != n_layers {
        return Err(Error::Config(
            "forward cache does not belong to this network".into(),
        ));
    }
    let out_shape = cache.pre_activations[n_layers - 1].dim();
    if grad_embeddings.dim() != out_shape {
        return Err(Error::Config(format!(
            "embedding gradient has shape {:?} but embeddings have shape {:?}",
            grad_embeddings.dim(),
            out_shape
        )));
    }

    let mut grads = Vec::with_capacity(n_layers);
    let mut upstream = grad_embeddings.to_owned();
    for i in (0..n_layers).rev() {
        if i + 1 < n_layers {
            upstream.zip_mut_with(&cache.pre_activations[i], |g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
        }
        let weight_grad = upstream.t().dot(&cache.layer_inputs[i]);
        let bias_grad = upstream.sum_axis(Axis(0));
        if i > 0 {
            upstream = upstream.dot(&params.layers[i].weight);
        }
        grads.push(Dense {
            weight: weight_grad,
            bias: bias_grad,
        });
    }
    grads.reverse();
    Ok(MlpParams { layers: grads })
}
