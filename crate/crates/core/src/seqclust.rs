//! Online sequential clustering over a stream of embeddings.
//!
//! Each arriving embedding is compared with the running mean of every
//! existing cluster. If the smallest squared distance `d_k` is below the
//! threshold the record joins that cluster and its mean is updated;
//! otherwise (`d_k ≥ th`) the record opens a new cluster. Clusters are never
//! merged or removed. Thresholds are in squared-distance units.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{cluster_quality, rand_index, MetricsReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub mean: Vec<f64>,
    pub count: usize,
}

/// Live clusters; a cluster's id is its position (creation order).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    clusters: Vec<Cluster>,
}

/// Outcome of assigning one record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub assigned_cluster: usize,
    /// Distance to the nearest existing mean; infinite for the first record.
    pub d_k: f64,
    pub new_cluster: bool,
}

/// An embedding in the stream with its identity, which only the metrics read.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamRecord {
    pub embedding: Vec<f64>,
    pub true_label: usize,
}

fn validate_threshold(th: f64) -> Result<()> {
    if th.is_nan() || th <= 0.0 {
        return Err(Error::Config(format!("threshold must be positive, got {th}")));
    }
    Ok(())
}

impl ClusterState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    /// Assigns one embedding. Only the embedding is visible here.
    pub fn assign(&mut self, embedding: &[f64], th: f64) -> Result<TraceEntry> {
        validate_threshold(th)?;
        if embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite embedding in stream".into()));
        }
        if let Some(first) = self.clusters.first() {
            if first.mean.len() != embedding.len() {
                return Err(Error::Data(format!(
                    "stream embedding has dimension {} but clusters have {}",
                    embedding.len(),
                    first.mean.len()
                )));
            }
        }

        let mut nearest = None;
        let mut d_k = f64::INFINITY;
        for (id, c) in self.clusters.iter().enumerate() {
            let d: f64 = c
                .mean
                .iter()
                .zip(embedding)
                .map(|(m, f)| (m - f) * (m - f))
                .sum();
            if d < d_k {
                d_k = d;
                nearest = Some(id);
            }
        }

        match nearest {
            Some(id) if d_k < th => {
                let c = &mut self.clusters[id];
                let n = c.count as f64;
                for (m, &f) in c.mean.iter_mut().zip(embedding) {
                    *m = (n * *m + f) / (n + 1.0);
                }
                c.count += 1;
                Ok(TraceEntry {
                    assigned_cluster: id,
                    d_k,
                    new_cluster: false,
                })
            }
            _ => {
                self.clusters.push(Cluster {
                    mean: embedding.to_vec(),
                    count: 1,
                });
                Ok(TraceEntry {
                    assigned_cluster: self.clusters.len() - 1,
                    d_k,
                    new_cluster: true,
                })
            }
        }
    }
}

/// One step of the stream: assigns `record` and returns its trace entry.
pub fn seq_cluster_step(state: &mut ClusterState, record: &StreamRecord, th: f64) -> Result<TraceEntry> {
    state.assign(&record.embedding, th)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamRun {
    pub state: ClusterState,
    pub trace: Vec<TraceEntry>,
    /// Metrics every `report_every` records and after the last one.
    pub reports: Vec<MetricsReport>,
}

impl StreamRun {
    pub fn final_report(&self) -> MetricsReport {
        *self.reports.last().expect("a run over a non-empty stream reports at least once")
    }
}

fn report_at(assignments: &[usize], truths: &[usize]) -> Result<MetricsReport> {
    let n = assignments.len();
    Ok(MetricsReport {
        n_fed: n,
        cluster_quality: cluster_quality(assignments, truths)?,
        // a single record has no pairs to disagree on
        rand_index: if n < 2 { 1.0 } else { rand_index(assignments, truths)? },
    })
}

/// Clusters a whole stream, recording metrics after every `report_every`
/// records (metrics are taken after the step completes) and at the end.
pub fn run_stream(stream: &[StreamRecord], th: f64, report_every: usize) -> Result<StreamRun> {
    validate_threshold(th)?;
    if stream.is_empty() {
        return Err(Error::Data("cannot cluster an empty stream".into()));
    }
    if report_every == 0 {
        return Err(Error::Config("report interval must be at least 1".into()));
    }
    let mut state = ClusterState::new();
    let mut trace = Vec::with_capacity(stream.len());
    let mut assignments = Vec::with_capacity(stream.len());
    let truths: Vec<usize> = stream.iter().map(|r| r.true_label).collect();
    let mut reports = Vec::new();
    for (i, record) in stream.iter().enumerate() {
        let entry = seq_cluster_step(&mut state, record, th)?;
        assignments.push(entry.assigned_cluster);
        trace.push(entry);
        let fed = i + 1;
        if fed % report_every == 0 || fed == stream.len() {
            reports.push(report_at(&assignments, &truths[..fed])?);
        }
    }
    Ok(StreamRun {
        state,
        trace,
        reports,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub th: f64,
    pub cluster_quality: f64,
    pub rand_index: f64,
    pub clusters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Row with the highest final cluster quality (ties: smaller threshold).
    pub best: usize,
}

impl SweepResult {
    pub fn best_row(&self) -> &SweepRow {
        &self.rows[self.best]
    }
}

/// Runs the stream independently for every candidate threshold.
pub fn threshold_sweep(stream: &[StreamRecord], candidates: &[f64]) -> Result<SweepResult> {
    if candidates.is_empty() {
        return Err(Error::Config("threshold sweep needs at least one candidate".into()));
    }
    let rows = candidates
        .par_iter()
        .map(|&th| {
            let run = run_stream(stream, th, usize::MAX)?;
            let last = run.final_report();
            Ok(SweepRow {
                th,
                cluster_quality: last.cluster_quality,
                rand_index: last.rand_index,
                clusters: run.state.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = (0..rows.len())
        .reduce(|best, i| {
            let (a, b) = (&rows[best], &rows[i]);
            let better = b.cluster_quality > a.cluster_quality
                || (b.cluster_quality == a.cluster_quality && b.th < a.th);
            if better {
                i
            } else {
                best
            }
        })
        .expect("non-empty");
    Ok(SweepResult { rows, best })
}

/// Default candidates: `count` log-spaced thresholds between the 1st and
/// 99th percentile of squared pairwise distances over an evenly strided
/// sample of at most `sample_size` stream records.
pub fn default_threshold_grid(stream: &[StreamRecord], count: usize, sample_size: usize) -> Result<Vec<f64>> {
    if stream.len() < 2 || count == 0 || sample_size < 2 {
        return Err(Error::Data(
            "threshold grid needs at least 2 records, 2 samples and 1 candidate".into(),
        ));
    }
    let m = stream.len().min(sample_size);
    let picks: Vec<&StreamRecord> = (0..m).map(|i| &stream[i * stream.len() / m]).collect();
    let mut dists = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in (i + 1)..m {
            let d: f64 = picks[i]
                .embedding
                .iter()
                .zip(&picks[j].embedding)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dists.push(d);
        }
    }
    dists.sort_by(f64::total_cmp);
    let percentile = |q: f64| dists[((q * (dists.len() - 1) as f64).round()) as usize];
    let smallest_positive = dists.iter().copied().find(|&d| d > 0.0);
    let Some(floor) = smallest_positive else {
        return Err(Error::Data("all sampled stream embeddings coincide".into()));
    };
    let lo = percentile(0.01).max(floor);
    let hi = percentile(0.99).max(lo);
    if count == 1 {
        return Ok(vec![lo]);
    }
    let (log_lo, log_hi) = (lo.ln(), hi.ln());
    Ok((0..count)
        .map(|i| (log_lo + (log_hi - log_lo) * i as f64 / (count - 1) as f64).exp())
        .collect())
}
