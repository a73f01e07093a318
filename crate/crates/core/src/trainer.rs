//! Training loop: PK batch → forward → loss → backward → Adam.

use std::path::Path;
use std::time::Instant;

use ndarray::Axis;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::losses::{
    all_triplets, batch_hard_cluster_loss, batch_hard_triplet_loss, cluster_loss,
    indexed_triplet_loss, EmbeddingBatch, LossConfig, LossKind, LossResult, Triplet,
};
use crate::nn::{adam_step, forward_rows, mlp_backward, AdamConfig, AdamState, Checkpoint, MlpParams};
use crate::sampler::{draw_rng, pk_sample, DatasetIndex, SamplerConfig};

/// Draw counter reserved for weight initialisation; batch `t` uses counter `t`.
const INIT_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub loss_config: LossConfig,
    /// Batch shape. Its seed is replaced by `seed` during training.
    pub sampler: SamplerConfig,
    pub adam: AdamConfig,
    pub total_iters: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub seed: u64,
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    /// Upper bound on triplets drawn per batch for the plain triplet loss.
    pub triplet_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::BatchHardCluster,
            loss_config: LossConfig::default(),
            sampler: SamplerConfig::default(),
            adam: AdamConfig {
                learning_rate: 1e-3,
                decay_start: 1000,
                total_iters: 2000,
                ..AdamConfig::default()
            },
            total_iters: 2000,
            checkpoint_every: 500,
            seed: 0,
            hidden_dims: vec![256],
            embedding_dim: 16,
            triplet_cap: 512,
        }
    }
}

impl TrainConfig {
    /// Published full-scale hyperparameters: 16×16 batches, 128-d
    /// embeddings, 50000 iterations with decay after 25000.
    pub fn full_scale() -> Self {
        Self {
            sampler: SamplerConfig { p: 16, k: 16, seed: 0 },
            adam: AdamConfig::default(),
            total_iters: 50_000,
            checkpoint_every: 5_000,
            hidden_dims: vec![1024],
            embedding_dim: 128,
            ..Self::default()
        }
    }

    /// Sets the iteration budget and moves the decay window to its second half.
    pub fn with_iterations(mut self, iters: u64) -> Self {
        self.total_iters = iters;
        self.adam.total_iters = iters;
        self.adam.decay_start = iters / 2;
        self
    }

    /// Switches loss kind and resets the margin to that kind's default.
    pub fn with_loss(mut self, kind: LossKind) -> Self {
        self.loss = kind;
        self.loss_config.alpha = kind.default_config().alpha;
        self
    }

    pub fn validate(&self, index: &DatasetIndex) -> Result<()> {
        self.loss_config.validate()?;
        self.adam.validate()?;
        self.sampler.validate(index)?;
        if self.embedding_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.loss == LossKind::BatchHardTriplet && self.sampler.k < 2 {
            return Err(Error::Config("batch-hard triplet training needs K ≥ 2".into()));
        }
        if self.loss == LossKind::Triplet && (self.sampler.k < 2 || self.triplet_cap == 0) {
            return Err(Error::Config(
                "triplet training needs K ≥ 2 and a positive triplet cap".into(),
            ));
        }
        Ok(())
    }

    pub fn widths(&self, input_dim: usize) -> Vec<usize> {
        let mut w = vec![input_dim];
        w.extend(&self.hidden_dims);
        w.push(self.embedding_dim);
        w
    }

    /// Freshly initialised network for this configuration.
    pub fn init_params(&self, input_dim: usize) -> Result<MlpParams> {
        MlpParams::init(&self.widths(input_dim), &mut draw_rng(self.seed, INIT_STREAM))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iter: u64,
    pub loss: f64,
    pub lr: f64,
    pub active_hinges: usize,
    pub ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut text = String::from("iter,loss,lr,active_hinges,ms\n");
        for r in &self.records {
            text.push_str(&format!("{},{},{},{},{:.3}\n", r.iter, r.loss, r.lr, r.active_hinges, r.ms));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Trailing moving average of the loss over `window` iterations.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let window = window.max(1);
        let losses: Vec<f64> = self.records.iter().map(|r| r.loss).collect();
        (0..losses.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(window);
                losses[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: MlpParams,
    pub adam: AdamState,
    pub log: TrainLog,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.params.clone(), Some(self.adam.clone()))
    }
}

/// Evaluates `kind` on a batch. `triplets` is only read by the plain triplet loss.
pub fn evaluate_loss(
    kind: LossKind,
    batch: &EmbeddingBatch,
    config: &LossConfig,
    triplets: &[Triplet],
) -> Result<LossResult> {
    match kind {
        LossKind::Cluster => cluster_loss(batch, config),
        LossKind::BatchHardCluster => batch_hard_cluster_loss(batch, config),
        LossKind::Triplet => indexed_triplet_loss(batch.vectors().view(), triplets, config.alpha),
        LossKind::BatchHardTriplet => batch_hard_triplet_loss(batch, config.alpha),
    }
}

/// Trains from scratch without writing checkpoints.
pub fn train(config: &TrainConfig, dataset: &LabeledDataset) -> Result<(MlpParams, TrainLog)> {
    let out = train_with(config, dataset, None, |_| Ok(()))?;
    Ok((out.params, out.log))
}

/// Trains, optionally resuming from `resume`, calling `on_checkpoint` with
/// the initial state (fresh runs only), every `checkpoint_every` iterations,
/// and after the final iteration.
///
/// A non-finite loss, gradient or parameter aborts with
/// [`Error::Divergence`]; the state handed to `on_checkpoint` before that
/// point is the last good one.
pub fn train_with<F>(
    config: &TrainConfig,
    dataset: &LabeledDataset,
    resume: Option<Checkpoint>,
    mut on_checkpoint: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&Checkpoint) -> Result<()>,
{
    let index = DatasetIndex::from_labels(&dataset.labels);
    config.validate(&index)?;
    let sampler = SamplerConfig {
        seed: config.seed,
        ..config.sampler
    };

    let fresh = resume.is_none();
    let (mut params, mut adam) = match resume {
        Some(ckpt) => {
            let adam = ckpt
                .adam
                .ok_or_else(|| Error::Config("checkpoint has no optimiser state to resume".into()))?;
            (ckpt.params, adam)
        }
        None => {
            let params = config.init_params(dataset.input_dim())?;
            let adam = AdamState::new(config.adam, &params);
            (params, adam)
        }
    };
    if params.input_dim() != dataset.input_dim() {
        return Err(Error::Config(format!(
            "network expects {} input features but the dataset has {}",
            params.input_dim(),
            dataset.input_dim()
        )));
    }
    if fresh && config.total_iters > 0 {
        on_checkpoint(&Checkpoint::new(params.clone(), Some(adam.clone())))?;
    }

    let mut log = TrainLog::default();
    let start = adam.step_count;
    for iter in (start + 1)..=config.total_iters {
        let clock = Instant::now();
        let mut rng = draw_rng(sampler.seed, iter);
        let refs = pk_sample(&index, &sampler, &mut rng)?;
        let items: Vec<usize> = refs.iter().map(|r| r.item).collect();
        let labels: Vec<usize> = refs.iter().map(|r| r.label).collect();
        let rows = dataset.items.select(Axis(0), &items);

        let (embeddings, cache) = forward_rows(&params, rows.view())?;
        let diverged = |loss: f64| Error::Divergence {
            iteration: iter as usize,
            loss,
        };
        let batch = EmbeddingBatch::new(embeddings, labels).map_err(|_| diverged(f64::NAN))?;
        let triplets = if config.loss == LossKind::Triplet {
            let all = all_triplets(batch.labels());
            if all.len() > config.triplet_cap {
                index::sample(&mut rng, all.len(), config.triplet_cap)
                    .into_iter()
                    .map(|i| all[i])
                    .collect()
            } else {
                all
            }
        } else {
            Vec::new()
        };
        let result = evaluate_loss(config.loss, &batch, &config.loss_config, &triplets)?;
        if !result.value.is_finite() || result.grad.iter().any(|g| !g.is_finite()) {
            return Err(diverged(result.value));
        }
        let grads = mlp_backward(&params, &cache, result.grad.view())?;
        let mut next = params.clone();
        let lr = adam_step(&mut adam, &mut next, &grads)?;
        if !next.is_finite() {
            return Err(diverged(result.value));
        }
        params = next;

        log.records.push(TrainRecord {
            iter,
            loss: result.value,
            lr,
            active_hinges: result.diagnostics.active_count(),
            ms: clock.elapsed().as_secs_f64() * 1e3,
        });
        let periodic = config.checkpoint_every > 0 && iter % config.checkpoint_every == 0;
        if periodic || iter == config.total_iters {
            on_checkpoint(&Checkpoint::new(params.clone(), Some(adam.clone())))?;
        }
    }
    Ok(TrainOutcome { params, adam, log })
}
