//! Embedding losses and their gradients with respect to every embedding row.
//!
//! All distances are squared Euclidean. The cluster losses need a PK batch:
//! `P ≥ 2` identities each with exactly `K` rows. Identities are ordered by
//! their first row in the batch, and every arg-max / arg-min picks the lowest
//! index on ties.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `N × d` embeddings with one identity label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    vectors: Array2<f64>,
    labels: Vec<usize>,
}

/// Rows of one identity, in batch order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentityGroup {
    pub label: usize,
    pub rows: Vec<usize>,
}

impl EmbeddingBatch {
    pub fn new(vectors: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if vectors.nrows() != labels.len() {
            return Err(Error::Structure(format!(
                "{} embedding rows but {} labels",
                vectors.nrows(),
                labels.len()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite embedding value".into()));
        }
        Ok(Self { vectors, labels })
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn into_parts(self) -> (Array2<f64>, Vec<usize>) {
        (self.vectors, self.labels)
    }

    /// Identities in order of first appearance.
    pub fn identity_groups(&self) -> Vec<IdentityGroup> {
        let mut groups: Vec<IdentityGroup> = Vec::new();
        let mut slot = std::collections::HashMap::new();
        for (row, &label) in self.labels.iter().enumerate() {
            let idx = *slot.entry(label).or_insert_with(|| {
                groups.push(IdentityGroup {
                    label,
                    rows: Vec::new(),
                });
                groups.len() - 1
            });
            groups[idx].rows.push(row);
        }
        groups
    }

    /// Identity groups, requiring every identity to have the same member count.
    pub fn pk_groups(&self) -> Result<Vec<IdentityGroup>> {
        let groups = self.identity_groups();
        let Some(first) = groups.first() else {
            return Err(Error::Structure("empty batch".into()));
        };
        let k = first.rows.len();
        if let Some(bad) = groups.iter().find(|g| g.rows.len() != k) {
            return Err(Error::Structure(format!(
                "identity {} has {} rows but identity {} has {}; cluster losses need exactly K rows per identity",
                bad.label,
                bad.rows.len(),
                first.label,
                k
            )));
        }
        Ok(groups)
    }
}

/// Hyperparameters shared by the losses: margin `alpha`, normaliser `beta`
/// and denominator stabiliser `gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1e-8,
        }
    }
}

impl LossConfig {
    /// Defaults for the plain triplet loss (smaller margin).
    pub fn triplet_default() -> Self {
        Self {
            alpha: 0.2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be finite and ≥ 0, got {}", self.alpha)));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be finite and > 0, got {}", self.beta)));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be finite and ≥ 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Normaliser that balances the `P·K` intra terms against the `P·(P−1)` inter terms.
pub fn count_balanced_beta(p: usize, k: usize) -> f64 {
    (p * (p - 1)) as f64 / (p * k) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Cluster,
    BatchHardCluster,
    Triplet,
    BatchHardTriplet,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::Cluster,
        LossKind::BatchHardCluster,
        LossKind::Triplet,
        LossKind::BatchHardTriplet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Cluster => "cluster",
            LossKind::BatchHardCluster => "batch_hard_cluster",
            LossKind::Triplet => "triplet",
            LossKind::BatchHardTriplet => "batch_hard_triplet",
        }
    }

    /// Default hyperparameters for this kind.
    pub fn default_config(self) -> LossConfig {
        match self {
            LossKind::Triplet => LossConfig::triplet_default(),
            _ => LossConfig::default(),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss kind {s:?}")))
    }
}

/// Per-identity terms of the cluster losses.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityTerm {
    pub label: usize,
    pub d_intra: f64,
    pub d_inter: f64,
    /// Whether the hinge is strictly positive (batch-hard form only).
    pub active: bool,
    /// Row of the member farthest from its mean (batch-hard form only).
    pub hardest_member: Option<usize>,
    /// Position (in identity order) of the closest other mean (batch-hard form only).
    pub nearest_identity: Option<usize>,
}

/// One triplet term: anchor, positive and negative rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTerm {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub d_pos: f64,
    pub d_neg: f64,
    pub active: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    pub identities: Vec<IdentityTerm>,
    pub anchors: Vec<AnchorTerm>,
}

impl Diagnostics {
    pub fn active_count(&self) -> usize {
        self.identities.iter().filter(|t| t.active).count()
            + self.anchors.iter().filter(|t| t.active).count()
    }

    /// Every discrete choice the loss made. Two evaluations with equal keys
    /// lie on the same smooth piece of the loss.
    pub fn selection_key(&self) -> Vec<usize> {
        let mut key = Vec::new();
        for t in &self.identities {
            key.push(t.active as usize);
            key.push(t.hardest_member.map_or(usize::MAX, |v| v));
            key.push(t.nearest_identity.map_or(usize::MAX, |v| v));
        }
        for t in &self.anchors {
            key.extend([t.active as usize, t.positive, t.negative]);
        }
        key
    }
}

/// Loss value, gradient with respect to every embedding row, and diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad: Array2<f64>,
    pub diagnostics: Diagnostics,
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared Euclidean distances between all rows.
///
/// Each entry is a direct sum of squared differences, so the result is exactly
/// symmetric, non-negative and zero on the diagonal.
pub fn pairwise_sq_dists(vectors: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = vectors.nrows();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let d = sq_dist(vectors.row(i), vectors.row(j));
            out[[i, j]] = d;
            out[[j, i]] = d;
        }
    }
    out
}

fn means_of(vectors: &Array2<f64>, groups: &[IdentityGroup]) -> Array2<f64> {
    let mut means = Array2::zeros((groups.len(), vectors.ncols()));
    for (g, mut mean) in groups.iter().zip(means.rows_mut()) {
        for &r in &g.rows {
            mean += &vectors.row(r);
        }
        mean /= g.rows.len() as f64;
    }
    means
}

/// Per-identity mean embeddings, identities ordered by first appearance.
pub fn class_means(batch: &EmbeddingBatch) -> Result<Array2<f64>> {
    let groups = batch.pk_groups()?;
    Ok(means_of(&batch.vectors, &groups))
}

/// Sum over each identity's members of the squared distance to its mean.
pub fn intra_dists(batch: &EmbeddingBatch, means: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    let groups = batch.pk_groups()?;
    if means.nrows() != groups.len() || means.ncols() != batch.dim() {
        return Err(Error::Structure(format!(
            "expected {} means of dimension {}, got {:?}",
            groups.len(),
            batch.dim(),
            means.dim()
        )));
    }
    Ok(groups
        .iter()
        .zip(means.rows())
        .map(|(g, m)| g.rows.iter().map(|&r| sq_dist(batch.vectors.row(r), m)).sum())
        .collect())
}

/// For each mean, the sum of squared distances to all other means.
pub fn inter_dists(means: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    let p = means.nrows();
    if p < 2 {
        return Err(Error::Structure(format!(
            "inter-class distances need at least 2 identities, got {p}"
        )));
    }
    let d = pairwise_sq_dists(means);
    Ok(d.rows().into_iter().map(|row| row.sum()).collect())
}

fn require_two_identities(groups: &[IdentityGroup]) -> Result<()> {
    if groups.len() < 2 {
        return Err(Error::Structure(format!(
            "cluster losses need at least 2 identities per batch, got {}",
            groups.len()
        )));
    }
    Ok(())
}

/// Ratio-form cluster loss `β·Σ d_intra / (γ + Σ d_inter)` with the sum-form distances.
pub fn cluster_loss(batch: &EmbeddingBatch, config: &LossConfig) -> Result<LossResult> {
    config.validate()?;
    let groups = batch.pk_groups()?;
    require_two_identities(&groups)?;
    let x = &batch.vectors;
    let p = groups.len();
    let k = groups[0].rows.len() as f64;
    let means = means_of(x, &groups);
    let intra = intra_dists(batch, means.view())?;
    let inter = inter_dists(means.view())?;
    let numer: f64 = intra.iter().sum();
    let denom = config.gamma + inter.iter().sum::<f64>();
    if denom.is_nan() || denom <= 0.0 {
        return Err(Error::DivisionByZero(
            "all class means coincide and gamma is 0".into(),
        ));
    }
    let value = config.beta * numer / denom;

    // ∂Σd_intra/∂x_k = 2(x_k − m_i); ∂Σd_inter/∂x_k = (4/K)·(P·m_i − Σ_j m_j)
    let mean_sum = means.sum_axis(Axis(0));
    let mut grad = Array2::zeros(x.dim());
    for (i, g) in groups.iter().enumerate() {
        let m_i = means.row(i);
        let inter_grad: Array1<f64> = (&m_i * p as f64 - &mean_sum) * (4.0 / k);
        for &r in &g.rows {
            let intra_grad = (&x.row(r) - &m_i) * 2.0;
            let row = (intra_grad * denom - &inter_grad * numer) * (config.beta / (denom * denom));
            grad.row_mut(r).assign(&row);
        }
    }

    let identities = groups
        .iter()
        .zip(intra.iter().zip(&inter))
        .map(|(g, (&d_intra, &d_inter))| IdentityTerm {
            label: g.label,
            d_intra,
            d_inter,
            active: false,
            hardest_member: None,
            nearest_identity: None,
        })
        .collect();
    Ok(LossResult {
        value,
        grad,
        diagnostics: Diagnostics {
            identities,
            anchors: Vec::new(),
        },
    })
}

/// Batch-hard cluster loss: per identity, the farthest member from its mean
/// against the closest other mean, summed through a hinge with margin `α`.
///
/// The gradient reaches the hard member directly and all members of the two
/// involved identities through their means.
pub fn batch_hard_cluster_loss(batch: &EmbeddingBatch, config: &LossConfig) -> Result<LossResult> {
    config.validate()?;
    let groups = batch.pk_groups()?;
    require_two_identities(&groups)?;
    let x = &batch.vectors;
    let k = groups[0].rows.len() as f64;
    let means = means_of(x, &groups);
    let mean_dists = pairwise_sq_dists(means.view());

    let mut value = 0.0;
    let mut grad = Array2::zeros(x.dim());
    let mut identities = Vec::with_capacity(groups.len());
    for (i, g) in groups.iter().enumerate() {
        let m_i = means.row(i);
        let (mut hard, mut d_intra) = (g.rows[0], f64::NEG_INFINITY);
        for &r in &g.rows {
            let d = sq_dist(x.row(r), m_i);
            if d > d_intra {
                hard = r;
                d_intra = d;
            }
        }
        let (mut nearest, mut d_inter) = (usize::MAX, f64::INFINITY);
        for (j, &d) in mean_dists.row(i).iter().enumerate() {
            if j != i && d < d_inter {
                nearest = j;
                d_inter = d;
            }
        }
        let hinge = d_intra - d_inter + config.alpha;
        let active = hinge > 0.0;
        if active {
            value += hinge;
            let m_j = means.row(nearest);
            let to_hard = &x.row(hard) - &m_i;
            let between = &m_i - &m_j;
            let shared = (&to_hard + &between) * (-2.0 / k);
            for &r in &g.rows {
                let mut row = grad.row_mut(r);
                row += &shared;
            }
            let mut hard_row = grad.row_mut(hard);
            hard_row.scaled_add(2.0, &to_hard);
            for &r in &groups[nearest].rows {
                let mut row = grad.row_mut(r);
                row.scaled_add(2.0 / k, &between);
            }
        }
        identities.push(IdentityTerm {
            label: g.label,
            d_intra,
            d_inter,
            active,
            hardest_member: Some(hard),
            nearest_identity: Some(nearest),
        });
    }
    Ok(LossResult {
        value,
        grad,
        diagnostics: Diagnostics {
            identities,
            anchors: Vec::new(),
        },
    })
}

/// Row indices of one (anchor, positive, negative) triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Every valid triplet of a labelled batch, in (anchor, positive, negative) row order.
pub fn all_triplets(labels: &[usize]) -> Vec<Triplet> {
    let n = labels.len();
    let mut out = Vec::new();
    for a in 0..n {
        for p in (0..n).filter(|&p| p != a && labels[p] == labels[a]) {
            for negative in (0..n).filter(|&q| labels[q] != labels[a]) {
                out.push(Triplet {
                    anchor: a,
                    positive: p,
                    negative,
                });
            }
        }
    }
    out
}

fn accumulate_triplet(
    x: ArrayView2<'_, f64>,
    grad: &mut Array2<f64>,
    t: Triplet,
    d_pos: f64,
    d_neg: f64,
    alpha: f64,
) -> (f64, bool) {
    let hinge = d_pos - d_neg + alpha;
    if hinge <= 0.0 {
        return (0.0, false);
    }
    let ap = &x.row(t.anchor) - &x.row(t.positive);
    let an = &x.row(t.anchor) - &x.row(t.negative);
    grad.row_mut(t.anchor).scaled_add(2.0, &(&ap - &an));
    grad.row_mut(t.positive).scaled_add(-2.0, &ap);
    grad.row_mut(t.negative).scaled_add(2.0, &an);
    (hinge, true)
}

/// Hinged triplet loss over index triplets into `vectors`.
pub fn indexed_triplet_loss(
    vectors: ArrayView2<'_, f64>,
    triplets: &[Triplet],
    alpha: f64,
) -> Result<LossResult> {
    LossConfig { alpha, ..LossConfig::default() }.validate()?;
    let n = vectors.nrows();
    if let Some(t) = triplets
        .iter()
        .find(|t| t.anchor >= n || t.positive >= n || t.negative >= n)
    {
        return Err(Error::Structure(format!("triplet {t:?} indexes past {n} rows")));
    }
    let mut value = 0.0;
    let mut grad = Array2::zeros(vectors.dim());
    let mut anchors = Vec::with_capacity(triplets.len());
    for &t in triplets {
        let d_pos = sq_dist(vectors.row(t.anchor), vectors.row(t.positive));
        let d_neg = sq_dist(vectors.row(t.anchor), vectors.row(t.negative));
        let (term, active) = accumulate_triplet(vectors, &mut grad, t, d_pos, d_neg, alpha);
        value += term;
        anchors.push(AnchorTerm {
            anchor: t.anchor,
            positive: t.positive,
            negative: t.negative,
            d_pos,
            d_neg,
            active,
        });
    }
    Ok(LossResult {
        value,
        grad,
        diagnostics: Diagnostics {
            identities: Vec::new(),
            anchors,
        },
    })
}

/// Triplet loss `Σ [‖a−p‖² − ‖a−n‖² + α]₊` over aligned lists.
///
/// The gradient has `3T` rows: anchors, then positives, then negatives.
pub fn triplet_loss(
    anchors: ArrayView2<'_, f64>,
    positives: ArrayView2<'_, f64>,
    negatives: ArrayView2<'_, f64>,
    alpha: f64,
) -> Result<LossResult> {
    let t = anchors.nrows();
    if positives.dim() != anchors.dim() || negatives.dim() != anchors.dim() {
        return Err(Error::Structure(format!(
            "triplet lists differ in shape: {:?}, {:?}, {:?}",
            anchors.dim(),
            positives.dim(),
            negatives.dim()
        )));
    }
    let stacked = ndarray::concatenate(Axis(0), &[anchors, positives, negatives])
        .expect("shapes checked above");
    let triplets: Vec<Triplet> = (0..t)
        .map(|i| Triplet {
            anchor: i,
            positive: t + i,
            negative: 2 * t + i,
        })
        .collect();
    indexed_triplet_loss(stacked.view(), &triplets, alpha)
}

/// Batch-hard triplet loss: every row is an anchor paired with its farthest
/// positive and closest negative in the batch.
pub fn batch_hard_triplet_loss(batch: &EmbeddingBatch, alpha: f64) -> Result<LossResult> {
    LossConfig { alpha, ..LossConfig::default() }.validate()?;
    let groups = batch.pk_groups()?;
    require_two_identities(&groups)?;
    if groups[0].rows.len() < 2 {
        return Err(Error::Structure(
            "batch-hard triplet loss needs K ≥ 2 rows per identity".into(),
        ));
    }
    let x = batch.vectors.view();
    let labels = &batch.labels;
    let dists = pairwise_sq_dists(x);
    let mut value = 0.0;
    let mut grad = Array2::zeros(x.dim());
    let mut anchors = Vec::with_capacity(batch.len());
    for a in 0..batch.len() {
        let (mut pos, mut d_pos) = (usize::MAX, f64::NEG_INFINITY);
        let (mut neg, mut d_neg) = (usize::MAX, f64::INFINITY);
        for (j, &d) in dists.row(a).iter().enumerate() {
            if labels[j] == labels[a] {
                if j != a && d > d_pos {
                    pos = j;
                    d_pos = d;
                }
            } else if d < d_neg {
                neg = j;
                d_neg = d;
            }
        }
        let t = Triplet {
            anchor: a,
            positive: pos,
            negative: neg,
        };
        let (term, active) = accumulate_triplet(x, &mut grad, t, d_pos, d_neg, alpha);
        value += term;
        anchors.push(AnchorTerm {
            anchor: a,
            positive: pos,
            negative: neg,
            d_pos,
            d_neg,
            active,
        });
    }
    Ok(LossResult {
        value,
        grad,
        diagnostics: Diagnostics {
            identities: Vec::new(),
            anchors,
        },
    })
}
