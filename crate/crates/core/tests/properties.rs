use std::sync::Arc;

use proptest::prelude::*;
use spart::data::{BBox, CellHistogram, GridSpec};
use spart::env::{encode_state, mask_from_state, valid_mask, StateVector};
use spart::partition::PartitionSet;
use spart::replay::{batch_split, EpisodeStep, NStepBuilder, SumTree};

/// Plays `picks` as indices into the valid-action list until `m` rects.
fn random_partition(g: usize, m: usize, picks: &[usize]) -> PartitionSet {
    let grid = GridSpec::new(BBox::unit(), g).unwrap();
    let mut ps = PartitionSet::init_single(grid);
    for &k in picks {
        if ps.len() == m {
            break;
        }
        let valid = ps.enumerate_valid_actions();
        if valid.is_empty() {
            break;
        }
        ps.apply_cut_mut(&valid[k % valid.len()]).unwrap();
    }
    ps
}

proptest! {
    #[test]
    fn rects_tile_the_grid(g in 2usize..9, m in 2usize..12, picks in prop::collection::vec(any::<usize>(), 12)) {
        let ps = random_partition(g, m, &picks);
        let mut covered = vec![0u32; g * g];
        for r in ps.rects() {
            prop_assert!(r.cells() > 0);
            for row in r.top..r.bottom {
                for col in r.left..r.right {
                    covered[row * g + col] += 1;
                }
            }
        }
        prop_assert!(covered.iter().all(|&c| c == 1));
        // rebuilding from rects gives the same boundary bits
        let again = PartitionSet::from_rects(*ps.grid(), ps.rects().to_vec()).unwrap();
        prop_assert_eq!(again.bounds(), ps.bounds());
    }

    #[test]
    fn every_valid_cut_adds_exactly_one_rect(g in 2usize..9, picks in prop::collection::vec(any::<usize>(), 6)) {
        let ps = random_partition(g, 7, &picks);
        for a in ps.enumerate_valid_actions() {
            let next = ps.apply_cut(&a).unwrap();
            prop_assert_eq!(next.len(), ps.len() + 1);
        }
    }

    #[test]
    fn state_mask_matches_partition_mask(g in 2usize..8, picks in prop::collection::vec(any::<usize>(), 5)) {
        let ps = random_partition(g, 6, &picks);
        let hist = CellHistogram::from_counts(g, (0..g * g).map(|k| (k % 5) as u64).collect()).unwrap();
        let s = encode_state(&ps, &hist);
        prop_assert_eq!(mask_from_state(&s, g), valid_mask(&ps));
        let p_sum: f64 = (0..g).flat_map(|i| (0..g).map(move |j| (i, j))).map(|(i, j)| s.p(g, i, j) as f64).sum();
        // sum over rects of (n_r / N)^2, at most 1
        prop_assert!(p_sum <= 1.0 + 1e-5);
    }

    #[test]
    fn sum_tree_root_is_leaf_sum(values in prop::collection::vec(0.0f64..10.0, 1..64), updates in prop::collection::vec((any::<usize>(), 0.0f64..10.0), 0..32)) {
        let mut t = SumTree::new(values.len());
        let mut shadow = values.clone();
        for (k, v) in values.iter().enumerate() {
            t.set(k, *v);
        }
        for (k, v) in updates {
            let k = k % shadow.len();
            t.set(k, v);
            shadow[k] = v;
        }
        let sum: f64 = shadow.iter().sum();
        prop_assert!((t.total() - sum).abs() <= 1e-9 * sum.max(1.0));
        if sum > 0.0 {
            let leaf = t.find(sum * 0.5);
            prop_assert!(shadow[leaf] > 0.0);
        }
    }

    #[test]
    fn batch_split_fills_the_batch(batch in 1usize..64, rho in 0.0f64..=1.0, demo in 0usize..50, agent in 0usize..50) {
        let (d, a) = batch_split(batch, rho, demo, agent);
        if demo + agent > 0 {
            prop_assert_eq!(d + a, batch);
        }
        prop_assert!(demo > 0 || d == 0);
        prop_assert!(agent > 0 || a == 0);
    }

    #[test]
    fn n_step_returns_are_discounted_final_reward(len in 1usize..10, n in 1usize..5, reward in 0.0f64..4.0) {
        let steps: Vec<EpisodeStep> = (0..len)
            .map(|t| EpisodeStep {
                state: Arc::new(StateVector(vec![t as f32])),
                action: t,
                reward: if t + 1 == len { reward } else { 0.0 },
            })
            .collect();
        let last = Arc::new(StateVector(vec![len as f32]));
        let gamma = 0.9;
        let ts = NStepBuilder { n, gamma }.build(&steps, &last, false);
        prop_assert_eq!(ts.len(), len);
        for (t, tr) in ts.iter().enumerate() {
            let to_end = len - t;
            prop_assert_eq!(tr.steps, to_end.min(n));
            prop_assert_eq!(tr.terminal, to_end <= n);
            let expect = if to_end <= n { gamma.powi(to_end as i32 - 1) * reward } else { 0.0 };
            prop_assert!((tr.ret - expect).abs() < 1e-12);
        }
    }
}
