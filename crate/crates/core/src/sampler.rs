//! PK training batches and identity-group streams.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentityItems {
    pub label: usize,
    pub items: Vec<usize>,
}

/// Item indices grouped by identity, identities in ascending label order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    identities: Vec<IdentityItems>,
    total: usize,
}

impl DatasetIndex {
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (item, &label) in labels.iter().enumerate() {
            by_label.entry(label).or_default().push(item);
        }
        Self {
            identities: by_label
                .into_iter()
                .map(|(label, items)| IdentityItems { label, items })
                .collect(),
            total: labels.len(),
        }
    }

    pub fn identities(&self) -> &[IdentityItems] {
        &self.identities
    }

    pub fn identity_count(&self) -> usize {
        self.identities.len()
    }

    pub fn total_items(&self) -> usize {
        self.total
    }
}

/// Identities per batch (`p`), items per identity (`k`) and RNG seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub p: usize,
    pub k: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { p: 8, k: 4, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self, index: &DatasetIndex) -> Result<()> {
        if self.p < 2 || self.k < 1 {
            return Err(Error::Config(format!(
                "sampler needs P ≥ 2 and K ≥ 1, got P={} K={}",
                self.p, self.k
            )));
        }
        if self.p > index.identity_count() {
            return Err(Error::Config(format!(
                "sampler asks for P={} identities but the dataset has only {}",
                self.p,
                index.identity_count()
            )));
        }
        Ok(())
    }
}

/// One sampled item with its identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ItemRef {
    pub item: usize,
    pub label: usize,
}

/// Generator for draw number `counter` of an experiment seeded with `seed`.
///
/// Every draw gets its own ChaCha stream, so a draw can be reproduced without
/// replaying the ones before it.
pub fn draw_rng(seed: u64, counter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(counter);
    rng
}

/// Draws `P` distinct identities and `K` items from each.
///
/// Items are drawn without replacement when an identity has at least `K`
/// of them and with replacement otherwise. Rows come grouped by identity.
pub fn pk_sample<R: Rng + ?Sized>(
    index: &DatasetIndex,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<ItemRef>> {
    config.validate(index)?;
    let mut out = Vec::with_capacity(config.p * config.k);
    for id in index::sample(rng, index.identity_count(), config.p) {
        let identity = &index.identities[id];
        let n = identity.items.len();
        if n >= config.k {
            for pick in index::sample(rng, n, config.k) {
                out.push(ItemRef {
                    item: identity.items[pick],
                    label: identity.label,
                });
            }
        } else {
            for _ in 0..config.k {
                out.push(ItemRef {
                    item: identity.items[rng.random_range(0..n)],
                    label: identity.label,
                });
            }
        }
    }
    Ok(out)
}

/// Orders the whole dataset as a stream of identity groups.
///
/// Each group takes a uniformly drawn number of identities in
/// `[group_min, group_max]` from those not yet used (the last group may be
/// smaller); all items of the group are shuffled together and appended.
pub fn build_stream<R: Rng + ?Sized>(
    index: &DatasetIndex,
    group_min: usize,
    group_max: usize,
    rng: &mut R,
) -> Result<Vec<ItemRef>> {
    if index.identity_count() == 0 {
        return Err(Error::Data("cannot build a stream from an empty dataset".into()));
    }
    if group_min < 2 || group_min > group_max || group_max > index.identity_count() {
        return Err(Error::Config(format!(
            "stream groups need 2 ≤ min ≤ max ≤ {} identities, got [{group_min}, {group_max}]",
            index.identity_count()
        )));
    }
    let mut order: Vec<usize> = (0..index.identity_count()).collect();
    order.shuffle(rng);
    let mut stream = Vec::with_capacity(index.total_items());
    let mut remaining = &order[..];
    while !remaining.is_empty() {
        let size = rng.random_range(group_min..=group_max).min(remaining.len());
        let (group, rest) = remaining.split_at(size);
        let mut items: Vec<ItemRef> = group
            .iter()
            .flat_map(|&id| {
                let identity = &index.identities[id];
                identity.items.iter().map(|&item| ItemRef {
                    item,
                    label: identity.label,
                })
            })
            .collect();
        items.shuffle(rng);
        stream.extend(items);
        remaining = rest;
    }
    Ok(stream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeSet, HashMap};

    #[test]
    fn pk_sample_structure_without_duplicates() {
        let index = DatasetIndex::from_labels(&[0, 0, 0, 0, 1, 1, 1, 1]);
        let cfg = SamplerConfig { p: 2, k: 2, seed: 0 };
        let batch = pk_sample(&index, &cfg, &mut draw_rng(0, 0)).unwrap();
        assert_eq!(batch.len(), 4);
        let unique: BTreeSet<usize> = batch.iter().map(|r| r.item).collect();
        assert_eq!(unique.len(), 4);
        let mut per: HashMap<usize, usize> = HashMap::new();
        for r in &batch {
            *per.entry(r.label).or_default() += 1;
        }
        assert_eq!(per.values().copied().collect::<Vec<_>>(), vec![2, 2]);
    }

    #[test]
    fn small_identity_is_sampled_with_replacement() {
        let index = DatasetIndex::from_labels(&[0, 1, 1, 1]);
        let cfg = SamplerConfig { p: 2, k: 3, seed: 0 };
        let batch = pk_sample(&index, &cfg, &mut draw_rng(4, 0)).unwrap();
        let singles: Vec<usize> = batch.iter().filter(|r| r.label == 0).map(|r| r.item).collect();
        assert_eq!(singles, vec![0, 0, 0]);
    }

    #[test]
    fn pk_sample_is_deterministic() {
        let labels: Vec<usize> = (0..60).map(|i| i % 12).collect();
        let index = DatasetIndex::from_labels(&labels);
        let cfg = SamplerConfig { p: 4, k: 3, seed: 9 };
        let run = || {
            (0..5)
                .map(|t| pk_sample(&index, &cfg, &mut draw_rng(cfg.seed, t)).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn too_many_identities_is_a_config_error() {
        let index = DatasetIndex::from_labels(&[0, 1, 2]);
        let cfg = SamplerConfig { p: 4, k: 1, seed: 0 };
        assert!(matches!(
            pk_sample(&index, &cfg, &mut draw_rng(0, 0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn stream_groups_partition_identities() {
        let labels: Vec<usize> = (0..20).map(|i| i / 5).collect();
        let index = DatasetIndex::from_labels(&labels);
        let stream = build_stream(&index, 2, 2, &mut draw_rng(1, 0)).unwrap();
        assert_eq!(stream.len(), 20);
        for segment in stream.chunks(10) {
            let ids: BTreeSet<usize> = segment.iter().map(|r| r.label).collect();
            assert_eq!(ids.len(), 2);
        }
        let first: BTreeSet<usize> = stream[..10].iter().map(|r| r.label).collect();
        let second: BTreeSet<usize> = stream[10..].iter().map(|r| r.label).collect();
        assert!(first.is_disjoint(&second));
    }

    #[test]
    fn stream_with_all_identities_in_one_group() {
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let index = DatasetIndex::from_labels(&labels);
        let stream = build_stream(&index, 3, 3, &mut draw_rng(2, 0)).unwrap();
        let mut items: Vec<usize> = stream.iter().map(|r| r.item).collect();
        items.sort_unstable();
        assert_eq!(items, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn stream_is_deterministic_and_validated() {
        let labels: Vec<usize> = (0..40).map(|i| i % 8).collect();
        let index = DatasetIndex::from_labels(&labels);
        let a = build_stream(&index, 2, 3, &mut draw_rng(5, 0)).unwrap();
        let b = build_stream(&index, 2, 3, &mut draw_rng(5, 0)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            build_stream(&index, 1, 3, &mut draw_rng(5, 0)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_stream(&DatasetIndex::from_labels(&[]), 2, 2, &mut draw_rng(5, 0)),
            Err(Error::Data(_))
        ));
    }
}
