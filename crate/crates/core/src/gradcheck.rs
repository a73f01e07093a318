//! Central finite-difference checks of analytic gradients.
//!
//! Coordinates whose ±h perturbation changes a discrete choice of the loss
//! (hinge activity, hard-sample selection) or a rectifier sign are reported
//! as skipped rather than compared, since the loss is not differentiable
//! across those boundaries.

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::{EmbeddingBatch, LossResult};
use crate::nn::{forward_rows, mlp_backward, InputBatch, MlpParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, multiplied by
    /// `max(1, |loss|)`. Near-zero gradients are thereby compared on an
    /// absolute scale that tracks the roundoff of the differenced loss.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the coordinate with the largest error.
    pub worst_index: Option<usize>,
    /// Analytic and numeric values at `worst_index`.
    pub worst_pair: Option<(f64, f64)>,
    pub checked: usize,
    pub skipped: usize,
    pub pass: bool,
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            worst_index: None,
            worst_pair: None,
            checked: 0,
            skipped: 0,
            pass: true,
        }
    }

    fn record(&mut self, index: usize, analytic: f64, numeric: f64, floor: f64, cfg: &GradCheckConfig) {
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        let rel = (analytic - numeric).abs() / denom;
        self.checked += 1;
        if self.worst_index.is_none() || rel > self.max_rel_error {
            self.max_rel_error = rel;
            self.worst_index = Some(index);
            self.worst_pair = Some((analytic, numeric));
        }
        self.pass = self.max_rel_error < cfg.tolerance;
    }

    /// Combines two reports, keeping the worse error.
    pub fn merge(mut self, other: GradCheckReport) -> GradCheckReport {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst_index = other.worst_index;
            self.worst_pair = other.worst_pair;
        }
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.pass &= other.pass;
        self
    }
}

fn finite_value(result: &LossResult) -> Result<f64> {
    if result.value.is_finite() {
        Ok(result.value)
    } else {
        Err(Error::Data(format!("loss evaluated to {}", result.value)))
    }
}

/// Checks `∂loss/∂embedding` against central differences at every coordinate.
pub fn check_embedding_gradient<F>(
    loss_fn: F,
    batch: &EmbeddingBatch,
    config: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&EmbeddingBatch) -> Result<LossResult>,
{
    let base = loss_fn(batch)?;
    finite_value(&base)?;
    let key = base.diagnostics.selection_key();
    let floor = config.abs_floor * base.value.abs().max(1.0);
    let labels = batch.labels().to_vec();
    let mut report = GradCheckReport::new();
    let cols = batch.dim();
    for (flat, &analytic) in base.grad.iter().enumerate() {
        let at = (flat / cols, flat % cols);
        let eval = |delta: f64| -> Result<LossResult> {
            let mut shifted: Array2<f64> = batch.vectors().clone();
            shifted[at] += delta;
            let r = loss_fn(&EmbeddingBatch::new(shifted, labels.clone())?)?;
            finite_value(&r)?;
            Ok(r)
        };
        let plus = eval(config.step)?;
        let minus = eval(-config.step)?;
        if plus.diagnostics.selection_key() != key || minus.diagnostics.selection_key() != key {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * config.step);
        report.record(flat, analytic, numeric, floor, config);
    }
    Ok(report)
}

/// End-to-end check through the network: loss → embeddings → parameters.
pub fn gradcheck<F>(
    loss_fn: F,
    params: &MlpParams,
    inputs: &InputBatch,
    config: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&EmbeddingBatch) -> Result<LossResult>,
{
    let evaluate = |p: &MlpParams| -> Result<(LossResult, Vec<bool>, crate::nn::ForwardCache)> {
        let (emb, cache) = forward_rows(p, inputs.rows.view())?;
        let batch = EmbeddingBatch::new(emb, inputs.labels.clone())?;
        let r = loss_fn(&batch)?;
        finite_value(&r)?;
        let pattern = cache.relu_pattern();
        Ok((r, pattern, cache))
    };

    let (base, base_pattern, cache) = evaluate(params)?;
    let base_key = base.diagnostics.selection_key();
    let floor = config.abs_floor * base.value.abs().max(1.0);
    let analytic: Vec<f64> = mlp_backward(params, &cache, base.grad.view())?
        .values()
        .copied()
        .collect();

    let mut report = GradCheckReport::new();
    let mut probe = params.clone();
    for (idx, &a) in analytic.iter().enumerate() {
        let original = *params.values().nth(idx).expect("same shape");
        let mut shifted = |delta: f64| -> Result<(LossResult, Vec<bool>)> {
            *probe.values_mut().nth(idx).expect("same shape") = original + delta;
            let (r, pattern, _) = evaluate(&probe)?;
            Ok((r, pattern))
        };
        let (plus, plus_pattern) = shifted(config.step)?;
        let (minus, minus_pattern) = shifted(-config.step)?;
        *probe.values_mut().nth(idx).expect("same shape") = original;

        let crosses_kink = plus_pattern != base_pattern
            || minus_pattern != base_pattern
            || plus.diagnostics.selection_key() != base_key
            || minus.diagnostics.selection_key() != base_key;
        if crosses_kink {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * config.step);
        report.record(idx, a, numeric, floor, config);
    }
    Ok(report)
}
