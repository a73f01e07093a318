//! End-to-end experiment plumbing: dataset loading, held-out splits,
//! embedding, stream evaluation and ranking evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::datasets::{gen_synthetic, load_features_csv, load_idx, LabeledDataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::losses::EmbeddingBatch;
use crate::metrics::{cmc_map, RankingReport};
use crate::nn::{forward_rows, MlpParams};
use crate::sampler::{build_stream, draw_rng, DatasetIndex};
use crate::seqclust::{
    default_threshold_grid, run_stream, threshold_sweep, StreamRecord, StreamRun, SweepResult,
};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// Keep only the first `max_per_identity` items of each class.
        #[serde(default)]
        max_per_identity: Option<usize>,
    },
    Csv {
        path: PathBuf,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic(SyntheticSpec::default())
    }
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<LabeledDataset> {
    match spec {
        DatasetSpec::Synthetic(s) => gen_synthetic(s),
        DatasetSpec::Csv { path } => load_features_csv(path),
        DatasetSpec::Idx {
            images,
            labels,
            max_per_identity,
        } => {
            let full = load_idx(images, labels)?;
            match max_per_identity {
                None => Ok(full),
                Some(limit) => {
                    let mut taken: BTreeMap<usize, usize> = BTreeMap::new();
                    let keep: Vec<usize> = (0..full.len())
                        .filter(|&i| {
                            let n = taken.entry(full.labels[i]).or_default();
                            *n += 1;
                            *n <= *limit
                        })
                        .collect();
                    let name = full.metadata.name.clone();
                    full.subset(&keep, &name)
                }
            }
        }
    }
}

/// Held-out split and stream/ranking evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Items per identity withheld from training and used for evaluation.
    pub holdout_per_identity: usize,
    pub split_seed: u64,
    pub group_min: usize,
    pub group_max: usize,
    pub stream_seed: u64,
    pub report_every: usize,
    pub sweep_points: usize,
    pub sweep_sample: usize,
    pub max_rank: usize,
    pub query_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            holdout_per_identity: 10,
            split_seed: 1,
            group_min: 4,
            group_max: 6,
            stream_seed: 2,
            report_every: 1000,
            sweep_points: 24,
            sweep_sample: 800,
            max_rank: 10,
            query_seed: 3,
        }
    }
}

/// Everything one experiment needs; serialised as the run config JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Loads the dataset and returns `(train, held_out)`.
    pub fn splits(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        load_dataset(&self.dataset)?.split_holdout(self.eval.holdout_per_identity, self.eval.split_seed)
    }
}

/// Embeds every item of a dataset.
pub fn embed_dataset(params: &MlpParams, dataset: &LabeledDataset) -> Result<EmbeddingBatch> {
    let (emb, _) = forward_rows(params, dataset.items.view())?;
    EmbeddingBatch::new(emb, dataset.labels.clone())
}

/// Orders embeddings as a stream of shuffled identity groups.
pub fn stream_records(
    embeddings: &EmbeddingBatch,
    group_min: usize,
    group_max: usize,
    seed: u64,
) -> Result<Vec<StreamRecord>> {
    let index = DatasetIndex::from_labels(embeddings.labels());
    let order = build_stream(&index, group_min, group_max, &mut draw_rng(seed, 0))?;
    Ok(order
        .iter()
        .map(|r| StreamRecord {
            embedding: embeddings.vectors().row(r.item).to_vec(),
            true_label: r.label,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub enum ThresholdChoice {
    Fixed(f64),
    /// Sweep the given candidates, or the default grid when `None`.
    Sweep(Option<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamEvaluation {
    pub threshold: f64,
    pub run: StreamRun,
    pub sweep: Option<SweepResult>,
}

/// Clusters a stream at a fixed threshold or at the best swept one.
pub fn evaluate_stream(
    stream: &[StreamRecord],
    choice: &ThresholdChoice,
    eval: &EvalConfig,
) -> Result<StreamEvaluation> {
    let (threshold, sweep) = match choice {
        ThresholdChoice::Fixed(th) => (*th, None),
        ThresholdChoice::Sweep(candidates) => {
            let grid = match candidates {
                Some(c) => c.clone(),
                None => default_threshold_grid(stream, eval.sweep_points, eval.sweep_sample)?,
            };
            let sweep = threshold_sweep(stream, &grid)?;
            (sweep.best_row().th, Some(sweep))
        }
    };
    let run = run_stream(stream, threshold, eval.report_every)?;
    Ok(StreamEvaluation {
        threshold,
        run,
        sweep,
    })
}

/// One randomly chosen query per identity; everything else is gallery.
pub fn query_gallery_split(labels: &[usize], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let index = DatasetIndex::from_labels(labels);
    let mut rng = draw_rng(seed, 0);
    let mut queries = Vec::with_capacity(index.identity_count());
    for identity in index.identities() {
        let pick = rand::seq::index::sample(&mut rng, identity.items.len(), 1).index(0);
        queries.push(identity.items[pick]);
    }
    let mut is_query = vec![false; labels.len()];
    for &q in &queries {
        is_query[q] = true;
    }
    let gallery = (0..labels.len()).filter(|&i| !is_query[i]).collect();
    (queries, gallery)
}

/// CMC / mAP of `embeddings` under a one-query-per-identity split.
pub fn evaluate_rank(embeddings: &EmbeddingBatch, max_rank: usize, seed: u64) -> Result<RankingReport> {
    let (queries, gallery) = query_gallery_split(embeddings.labels(), seed);
    let pick = |rows: &[usize]| {
        EmbeddingBatch::new(
            embeddings.vectors().select(Axis(0), rows),
            rows.iter().map(|&i| embeddings.labels()[i]).collect(),
        )
    };
    cmc_map(&pick(&queries)?, &pick(&gallery)?, max_rank)
}

pub fn curve_csv(run: &StreamRun) -> String {
    let mut out = String::from("n_fed,C_q,rand_index\n");
    for r in &run.reports {
        let _ = writeln!(out, "{},{},{}", r.n_fed, r.cluster_quality, r.rand_index);
    }
    out
}

pub fn trace_csv(run: &StreamRun) -> String {
    let mut out = String::from("index,assigned_cluster,d_k,new_flag\n");
    for (i, t) in run.trace.iter().enumerate() {
        let _ = writeln!(out, "{},{},{},{}", i, t.assigned_cluster, t.d_k, t.new_cluster as u8);
    }
    out
}

pub fn sweep_csv(sweep: &SweepResult) -> String {
    let mut out = String::from("th,C_q,rand_index,clusters\n");
    for r in &sweep.rows {
        let _ = writeln!(out, "{},{},{},{}", r.th, r.cluster_quality, r.rand_index, r.clusters);
    }
    out
}
