#![allow(clippy::needless_range_loop)]

use std::collections::HashSet;
use std::fs;

use gpcl_core::dataset::{load_dataset, sample_batch, write_dataset, InteractionDataset, Split, BI_FILE, SIZE_FILE, UB_TEST_FILE, UB_TRAIN_FILE, UB_TUNE_FILE, UI_FILE};
use gpcl_core::eval::{ndcg_at_n, recall_at_n, report_from_rankings, rank_with, top_n};
use gpcl_core::graph::BipartiteGraph;
use gpcl_core::objectives::ViewEmbeddings;
use gpcl_core::dataset::EntityCounts;
use gpcl_core::{Error, Matrix};
use proptest::collection::{btree_set, vec};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn write_fixture(dir: &std::path::Path, size: &str, files: &[(&str, &str)]) {
    fs::write(dir.join(SIZE_FILE), size).unwrap();
    for name in [UB_TRAIN_FILE, UB_TUNE_FILE, UB_TEST_FILE, UI_FILE, BI_FILE] {
        let body = files.iter().find(|f| f.0 == name).map_or("", |f| f.1);
        fs::write(dir.join(name), body).unwrap();
    }
}

#[test]
fn fixture_directory_loads() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(
        dir.path(),
        "3\t2\t4\n",
        &[
            (UB_TRAIN_FILE, "0\t0\n1\t1\n2\t0\n"),
            (UB_TUNE_FILE, "0\t1\n"),
            (UB_TEST_FILE, "1\t0\n"),
            (UI_FILE, "0\t3\n2\t1\n"),
            (BI_FILE, "0\t0\n0\t1\n1\t2\n"),
        ],
    );
    let ds = load_dataset(dir.path()).unwrap();
    assert_eq!(
        (ds.counts.num_users, ds.counts.num_bundles, ds.counts.num_items),
        (3, 2, 4)
    );
    assert_eq!(ds.ub_train.len(), 3);
    assert_eq!(ds.bi.len(), 3);
}

#[test]
fn malformed_and_out_of_range_lines_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), "3\t2\t4\n", &[(UI_FILE, "0\n")]);
    assert!(matches!(load_dataset(dir.path()), Err(Error::MalformedLine { .. })));
    write_fixture(dir.path(), "3\t2\t4\n", &[(UB_TRAIN_FILE, "5\t0\n")]);
    assert!(matches!(load_dataset(dir.path()), Err(Error::IdOutOfRange { .. })));
    write_fixture(dir.path(), "3\t2\t4\n", &[(UB_TRAIN_FILE, "1\t0\n1\t0\n")]);
    assert!(matches!(load_dataset(dir.path()), Err(Error::DuplicatePair { .. })));
    write_fixture(dir.path(), "3\t2\t4\n", &[]);
    fs::remove_file(dir.path().join(BI_FILE)).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::MissingFile(_))));
}

fn dataset_strategy() -> impl Strategy<Value = InteractionDataset> {
    (2usize..8, 2usize..8, 1usize..6).prop_flat_map(|(m, o, n)| {
        let ub = btree_set((0..m, 0..o), 1..=(m * o));
        let ui = btree_set((0..m, 0..n), 0..=(m * n));
        let bi = btree_set((0..o, 0..n), 0..=(o * n));
        (Just((m, o, n)), ub, ui, bi, any::<u64>()).prop_map(|((m, o, n), ub, ui, bi, seed)| {
            // deal the user-bundle pairs into three disjoint splits
            let mut splits = [vec![], vec![], vec![]];
            for (k, p) in ub.into_iter().enumerate() {
                splits[((k as u64).wrapping_mul(seed | 1) >> 3) as usize % 3].push(p);
            }
            let [train, tune, test] = splits;
            InteractionDataset::new(
                EntityCounts::new(m, o, n).unwrap(),
                train,
                tune,
                test,
                ui.into_iter().collect(),
                bi.into_iter().collect(),
            )
            .unwrap()
        })
    })
}

fn file_bytes(dir: &std::path::Path) -> Vec<Vec<u8>> {
    [SIZE_FILE, UB_TRAIN_FILE, UB_TUNE_FILE, UB_TEST_FILE, UI_FILE, BI_FILE]
        .iter()
        .map(|f| fs::read(dir.join(f)).unwrap())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn write_load_round_trip_is_byte_identical(ds in dataset_strategy()) {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_dataset(&ds, a.path()).unwrap();
        let back = load_dataset(a.path()).unwrap();
        write_dataset(&back, b.path()).unwrap();
        prop_assert_eq!(file_bytes(a.path()), file_bytes(b.path()));
    }

    #[test]
    fn batches_pair_train_positives_with_true_negatives(ds in dataset_strategy(), seed in any::<u64>(), size in 1usize..40) {
        let train: HashSet<(usize, usize)> = ds.ub_train.pairs.iter().copied().collect();
        prop_assume!(!train.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match sample_batch(&ds, size, &mut rng) {
            Ok(batch) => {
                prop_assert!(batch.len() <= size);
                for (u, p, n) in batch.triples {
                    prop_assert!(train.contains(&(u, p)));
                    prop_assert!(!train.contains(&(u, n)));
                }
            }
            Err(Error::NoNegativeAvailable(u)) => prop_assert_eq!(ds.train_bundles(u).len(), ds.counts.num_bundles),
            Err(e) => prop_assert!(false, "{e}"),
        }
    }

    #[test]
    fn propagation_matches_dense_normalized_adjacency(
        (l, r, pairs, x, y, c) in (1usize..16, 1usize..16).prop_flat_map(|(l, r)| (
            Just(l),
            Just(r),
            btree_set((0..l, 0..r), 0..=(l * r)),
            vec(-5.0f64..5.0, r * 3),
            vec(-5.0f64..5.0, r * 3),
            -3.0f64..3.0,
        ))
    ) {
        let pairs: Vec<(usize, usize)> = pairs.into_iter().collect();
        let g = BipartiteGraph::<f64>::from_pairs(l, r, &pairs);
        let mut dl = vec![0.0; l];
        let mut dr = vec![0.0; r];
        for &(a, b) in &pairs {
            dl[a] += 1.0;
            dr[b] += 1.0;
        }
        let mut adj = vec![vec![0.0; r]; l];
        for &(a, b) in &pairs {
            adj[a][b] = 1.0 / (dl[a] * dr[b] as f64).sqrt();
        }
        let xm = Matrix::from_vec(r, 3, x.clone()).unwrap();
        let ym = Matrix::from_vec(r, 3, y.clone()).unwrap();
        let out = g.propagate(&xm).unwrap();
        for i in 0..l {
            for d in 0..3 {
                let want: f64 = (0..r).map(|j| adj[i][j] * x[j * 3 + d]).sum();
                prop_assert!((out.get(i, d) - want).abs() <= 1e-12);
            }
            // norm bound: ‖out_i‖ ≤ Σ_j w(i,j) · max_j ‖x_j‖
            let max_norm = (0..r).map(|j| xm.row(j).iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max);
            let wsum: f64 = adj[i].iter().sum();
            let norm = out.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(norm <= wsum * max_norm + 1e-12);
        }
        let back = g.propagate_to_right(&out).unwrap();
        for j in 0..r {
            for d in 0..3 {
                let want: f64 = (0..l).map(|i| adj[i][j] * out.get(i, d)).sum();
                prop_assert!((back.get(j, d) - want).abs() <= 1e-12);
            }
        }
        let combo = xm.zip_map(&ym, |a, b| a + c * b);
        let lhs = g.propagate(&combo).unwrap();
        let rhs = out.zip_map(&g.propagate(&ym).unwrap(), |a, b| a + c * b);
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn metrics_bounded_and_monotone_in_n(
        scores in vec(-3.0f64..3.0, 1..40),
        gt_mask in vec(any::<bool>(), 40),
        n in 1usize..15,
    ) {
        let o = scores.len();
        let mut gt: Vec<usize> = (0..o).filter(|&b| gt_mask[b]).collect();
        if gt.is_empty() {
            gt.push(0);
        }
        let ranked = vec![top_n(&scores, &[], o).0];
        let gts = vec![gt];
        let (r1, r2) = (recall_at_n(&ranked, &gts, n).unwrap(), recall_at_n(&ranked, &gts, n + 1).unwrap());
        let (d1, d2) = (ndcg_at_n(&ranked, &gts, n).unwrap(), ndcg_at_n(&ranked, &gts, n + 1).unwrap());
        for v in [r1, r2, d1, d2] {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        }
        prop_assert!(r2 >= r1);
        // the ideal DCG also grows until n reaches |gt|, so NDCG is monotone only past that point
        if n >= gts[0].len() {
            prop_assert!(d2 >= d1 - 1e-15);
        }
    }

    #[test]
    fn ranking_respects_mask_and_is_shift_invariant(
        scores in vec(-3.0f64..3.0, 1..40),
        mask_bits in vec(any::<bool>(), 40),
        shift in -100.0f64..100.0,
        n in 1usize..15,
    ) {
        let masked: Vec<usize> = (0..scores.len()).filter(|&b| mask_bits[b]).collect();
        let (ids, s) = top_n(&scores, &masked, n);
        prop_assert!(ids.iter().all(|b| !masked.contains(b)));
        prop_assert!(s.windows(2).all(|w| w[0] >= w[1]));
        // dyadic scores and shift keep every sum exact so ties survive the shift
        let shift = (shift * 4.0).round() / 4.0;
        let coarse: Vec<f64> = scores.iter().map(|x| (x * 4.0).round() / 4.0).collect();
        let shifted: Vec<f64> = coarse.iter().map(|x| x + shift).collect();
        prop_assert_eq!(top_n(&coarse, &masked, n).0, top_n(&shifted, &masked, n).0);
    }

    #[test]
    fn scores_scale_quadratically(c in -3.0f64..3.0, vals in vec(-2.0f64..2.0, 4 * 2 * 3)) {
        let m = |k: usize| Matrix::from_vec(2, 3, vals[k * 6..(k + 1) * 6].to_vec()).unwrap();
        let v = ViewEmbeddings {
            user_bundle_view: m(0),
            bundle_bundle_view: m(1),
            user_item_view: m(2),
            bundle_item_view: m(3),
        };
        let scaled = ViewEmbeddings {
            user_bundle_view: m(0).scaled(c),
            bundle_bundle_view: m(1).scaled(c),
            user_item_view: m(2).scaled(c),
            bundle_item_view: m(3).scaled(c),
        };
        for u in 0..2 {
            for b in 0..2 {
                prop_assert!((scaled.score(u, b) - c * c * v.score(u, b)).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn masked_ranking_of_dataset_never_emits_seen_bundles() {
    let ds = gpcl_core::trainer::micro_dataset();
    for split in [Split::Tune, Split::Test] {
        let seen = gpcl_core::eval::seen_bundles(&ds, split);
        let r = rank_with(&ds, split, 6, true, |u| (0..6).map(|b| ((u * 7 + b * 3) % 5) as f64).collect());
        for res in r {
            assert!(res.bundles.iter().all(|b| !seen[res.user].contains(b)));
        }
    }
}

/// A model that memorizes the test split ranks every held-out bundle first.
#[test]
fn memorizing_scorer_reaches_full_recall() {
    let ds = gpcl_core::trainer::micro_dataset();
    let o = ds.counts.num_bundles;
    let test = ds.ub_test.adjacency(ds.counts.num_users);
    let r = rank_with(&ds, Split::Test, o, true, |u| {
        (0..o).map(|b| if test[u].contains(&b) { 1.0 } else { 0.0 }).collect()
    });
    let report = report_from_rankings(&ds, Split::Test, &r, &[o]).unwrap();
    assert_eq!(report.recall_at(o), Some(1.0));
    assert_eq!(report.ndcg_at(o), Some(1.0));
}

#[test]
fn ndcg_can_drop_before_the_ideal_saturates() {
    let ranked = vec![vec![0, 5, 1]];
    let gt = vec![vec![0, 1]];
    assert_eq!(ndcg_at_n(&ranked, &gt, 1).unwrap(), 1.0);
    assert!(ndcg_at_n(&ranked, &gt, 2).unwrap() < 1.0);
}
