//! Clustering and ranking evaluation.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::EmbeddingBatch;

/// Clustering metrics after `n_fed` stream records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_fed: usize,
    pub cluster_quality: f64,
    pub rand_index: f64,
}

fn check_aligned(assignments: &[usize], truths: &[usize]) -> Result<()> {
    if assignments.len() != truths.len() {
        return Err(Error::Structure(format!(
            "{} cluster assignments but {} true labels",
            assignments.len(),
            truths.len()
        )));
    }
    Ok(())
}

/// Position of the first record carrying each value.
fn first_seen(values: &[usize]) -> HashMap<usize, usize> {
    let mut seen = HashMap::new();
    for (i, &v) in values.iter().enumerate() {
        seen.entry(v).or_insert(i);
    }
    seen
}

/// Fraction of records that sit in a cluster tagged with their own identity.
///
/// A cluster is tagged with the identity holding most of its records. When
/// one identity tags several clusters, only the cluster holding the most
/// records of that identity keeps the tag; the others become untagged.
///
/// Ties are broken by stream order: between identities, the one whose first
/// record came earliest; between clusters, the one opened earliest. This keeps
/// the score unchanged under any renaming of cluster or identity ids.
pub fn cluster_quality(assignments: &[usize], truths: &[usize]) -> Result<f64> {
    check_aligned(assignments, truths)?;
    if assignments.is_empty() {
        return Err(Error::Structure("cluster quality of an empty stream".into()));
    }
    let identity_order = first_seen(truths);
    let cluster_order = first_seen(assignments);

    let mut counts: HashMap<usize, HashMap<usize, usize>> = HashMap::new();
    for (&c, &t) in assignments.iter().zip(truths) {
        *counts.entry(c).or_default().entry(t).or_default() += 1;
    }

    // identity -> (cluster, count of that identity in it)
    let mut keeper: HashMap<usize, (usize, usize)> = HashMap::new();
    for (&cluster, inside) in &counts {
        let (&tag, &count) = inside
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(identity_order[b.0].cmp(&identity_order[a.0])))
            .expect("cluster has records");
        keeper
            .entry(tag)
            .and_modify(|kept| {
                let better = count > kept.1
                    || (count == kept.1 && cluster_order[&cluster] < cluster_order[&kept.0]);
                if better {
                    *kept = (cluster, count);
                }
            })
            .or_insert((cluster, count));
    }
    let correct: usize = keeper.values().map(|&(_, count)| count).sum();
    Ok(correct as f64 / assignments.len() as f64)
}

fn pairs(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

/// Unadjusted Rand index: fraction of record pairs on which the two
/// partitions agree (together in both, or apart in both).
///
/// Computed from the contingency table in linear time.
pub fn rand_index(assignments: &[usize], truths: &[usize]) -> Result<f64> {
    check_aligned(assignments, truths)?;
    let n = assignments.len();
    if n < 2 {
        return Err(Error::Structure(format!("Rand index needs at least 2 records, got {n}")));
    }
    let mut joint: HashMap<(usize, usize), u64> = HashMap::new();
    let mut by_cluster: HashMap<usize, u64> = HashMap::new();
    let mut by_truth: HashMap<usize, u64> = HashMap::new();
    for (&c, &t) in assignments.iter().zip(truths) {
        *joint.entry((c, t)).or_default() += 1;
        *by_cluster.entry(c).or_default() += 1;
        *by_truth.entry(t).or_default() += 1;
    }
    let total = pairs(n as u64);
    let together_both: u64 = joint.values().map(|&c| pairs(c)).sum();
    let together_cluster: u64 = by_cluster.values().map(|&c| pairs(c)).sum();
    let together_truth: u64 = by_truth.values().map(|&c| pairs(c)).sum();
    let apart_both = total + together_both - together_cluster - together_truth;
    Ok((together_both + apart_both) as f64 / total as f64)
}

/// CMC curve and mean average precision over a query set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    /// `cmc[n - 1]` is the rank-n matching rate.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub queries_evaluated: usize,
    /// Queries with no correct match in the gallery.
    pub skipped_queries: Vec<usize>,
}

impl RankingReport {
    pub fn rank(&self, n: usize) -> Option<f64> {
        n.checked_sub(1).and_then(|i| self.cmc.get(i).copied())
    }
}

/// CMC and mAP with every gallery row eligible for every query.
pub fn cmc_map(
    query: &EmbeddingBatch,
    gallery: &EmbeddingBatch,
    max_rank: usize,
) -> Result<RankingReport> {
    cmc_map_excluding(query, gallery, max_rank, &vec![None; query.len()])
}

/// CMC and mAP where `same_item[q]` names the gallery row holding query `q`
/// itself, which is left out of that query's ranking.
///
/// The gallery is sorted by ascending squared distance, ties in gallery order.
pub fn cmc_map_excluding(
    query: &EmbeddingBatch,
    gallery: &EmbeddingBatch,
    max_rank: usize,
    same_item: &[Option<usize>],
) -> Result<RankingReport> {
    if max_rank == 0 {
        return Err(Error::Config("max_rank must be at least 1".into()));
    }
    if query.dim() != gallery.dim() {
        return Err(Error::Structure(format!(
            "query dimension {} differs from gallery dimension {}",
            query.dim(),
            gallery.dim()
        )));
    }
    if same_item.len() != query.len() {
        return Err(Error::Structure("one exclusion entry per query is required".into()));
    }

    let mut hits_at = vec![0usize; max_rank];
    let mut ap_sum = 0.0;
    let mut evaluated = 0;
    let mut skipped = Vec::new();
    let g = gallery.vectors();
    for (q, row) in query.vectors().rows().into_iter().enumerate() {
        let label = query.labels()[q];
        let mut ranked: Vec<(f64, usize)> = (0..gallery.len())
            .filter(|&j| Some(j) != same_item[q])
            .map(|j| {
                let d: f64 = row.iter().zip(g.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                (d, j)
            })
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        let mut found = 0usize;
        let mut precision_sum = 0.0;
        let mut first_hit = None;
        for (pos, &(_, j)) in ranked.iter().enumerate() {
            if gallery.labels()[j] == label {
                found += 1;
                precision_sum += found as f64 / (pos + 1) as f64;
                first_hit.get_or_insert(pos);
            }
        }
        let Some(first) = first_hit else {
            skipped.push(q);
            continue;
        };
        evaluated += 1;
        ap_sum += precision_sum / found as f64;
        for slot in hits_at.iter_mut().skip(first) {
            *slot += 1;
        }
    }
    if evaluated == 0 {
        return Err(Error::Data("no query has a matching gallery item".into()));
    }
    Ok(RankingReport {
        cmc: hits_at.iter().map(|&h| h as f64 / evaluated as f64).collect(),
        map: ap_sum / evaluated as f64,
        queries_evaluated: evaluated,
        skipped_queries: skipped,
    })
}
