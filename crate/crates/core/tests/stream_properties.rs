use std::collections::BTreeSet;

use embedforge::sampler::{build_stream, draw_rng, pk_sample, DatasetIndex, SamplerConfig};
use embedforge::seqclust::{run_stream, threshold_sweep, StreamRecord};
use proptest::prelude::*;

fn stream() -> impl Strategy<Value = Vec<StreamRecord>> {
    (1usize..4).prop_flat_map(|dim| {
        prop::collection::vec(
            (prop::collection::vec(-3.0f64..3.0, dim), 0usize..5),
            1..80,
        )
        .prop_map(|rows| {
            rows.into_iter()
                .map(|(embedding, true_label)| StreamRecord { embedding, true_label })
                .collect()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn running_means_replay_their_members(records in stream(), th in 0.01f64..20.0) {
        let run = run_stream(&records, th, 10).unwrap();
        let clusters = run.state.clusters();
        let mut members = vec![Vec::new(); clusters.len()];
        for (r, t) in records.iter().zip(&run.trace) {
            members[t.assigned_cluster].push(r);
        }
        for (c, rows) in clusters.iter().zip(&members) {
            prop_assert_eq!(c.count, rows.len());
            for (axis, &m) in c.mean.iter().enumerate() {
                let direct = rows.iter().map(|r| r.embedding[axis]).sum::<f64>() / rows.len() as f64;
                prop_assert!((m - direct).abs() <= 1e-9, "{} vs {}", m, direct);
            }
        }
        prop_assert_eq!(clusters.iter().map(|c| c.count).sum::<usize>(), records.len());
    }

    #[test]
    fn clusters_only_ever_open(records in stream(), th in 0.01f64..20.0) {
        let run = run_stream(&records, th, 1).unwrap();
        let mut open = 0usize;
        for t in &run.trace {
            if t.new_cluster {
                prop_assert_eq!(t.assigned_cluster, open);
                prop_assert!(t.d_k >= th);
                open += 1;
            } else {
                prop_assert!(t.d_k < th);
                prop_assert!(t.assigned_cluster < open);
            }
        }
        prop_assert_eq!(open, run.state.len());
        let fed: Vec<usize> = run.reports.iter().map(|r| r.n_fed).collect();
        prop_assert!(fed.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(fed.last().copied(), Some(records.len()));
        for r in &run.reports {
            prop_assert!((0.0..=1.0).contains(&r.cluster_quality));
            prop_assert!((0.0..=1.0).contains(&r.rand_index));
        }
    }

    #[test]
    fn sweep_rows_equal_single_runs(records in stream(), a in 0.1f64..5.0, b in 5.0f64..30.0) {
        let sweep = threshold_sweep(&records, &[a, b]).unwrap();
        for row in &sweep.rows {
            let single = run_stream(&records, row.th, usize::MAX).unwrap().final_report();
            prop_assert_eq!(row.cluster_quality, single.cluster_quality);
            prop_assert_eq!(row.rand_index, single.rand_index);
        }
        let best = sweep.best_row();
        prop_assert!(sweep.rows.iter().all(|r| r.cluster_quality <= best.cluster_quality));
    }

    #[test]
    fn pk_batches_have_the_requested_shape(
        sizes in prop::collection::vec(1usize..8, 2..10),
        k in 1usize..5,
        seed in any::<u64>(),
        counter in any::<u64>(),
    ) {
        let labels: Vec<usize> = sizes.iter().enumerate().flat_map(|(id, &n)| std::iter::repeat_n(id, n)).collect();
        let index = DatasetIndex::from_labels(&labels);
        let p = 2.min(index.identity_count());
        let cfg = SamplerConfig { p, k, seed };
        let batch = pk_sample(&index, &cfg, &mut draw_rng(seed, counter)).unwrap();
        prop_assert_eq!(batch.len(), p * k);
        for chunk in batch.chunks(k) {
            let label = chunk[0].label;
            prop_assert!(chunk.iter().all(|r| r.label == label && labels[r.item] == label));
            let distinct: BTreeSet<usize> = chunk.iter().map(|r| r.item).collect();
            if sizes[label] >= k {
                prop_assert_eq!(distinct.len(), k);
            }
        }
        let ids: BTreeSet<usize> = batch.iter().map(|r| r.label).collect();
        prop_assert_eq!(ids.len(), p);
        prop_assert_eq!(batch, pk_sample(&index, &cfg, &mut draw_rng(seed, counter)).unwrap());
    }

    #[test]
    fn streams_cover_every_item_once_in_identity_groups(
        sizes in prop::collection::vec(1usize..6, 4..12),
        seed in any::<u64>(),
    ) {
        let labels: Vec<usize> = sizes.iter().enumerate().flat_map(|(id, &n)| std::iter::repeat_n(id, n)).collect();
        let index = DatasetIndex::from_labels(&labels);
        let stream = build_stream(&index, 2, 3, &mut draw_rng(seed, 0)).unwrap();
        let mut items: Vec<usize> = stream.iter().map(|r| r.item).collect();
        items.sort_unstable();
        prop_assert_eq!(items, (0..labels.len()).collect::<Vec<_>>());
        // once an identity's run ends it never reappears
        let mut finished = BTreeSet::new();
        let mut current: BTreeSet<usize> = BTreeSet::new();
        let mut remaining = sizes.clone();
        for r in &stream {
            prop_assert!(!finished.contains(&r.label));
            current.insert(r.label);
            remaining[r.label] -= 1;
            if current.iter().all(|&id| remaining[id] == 0) {
                finished.extend(current.iter().copied());
                current.clear();
            }
        }
    }
}
