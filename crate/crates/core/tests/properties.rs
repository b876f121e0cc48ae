//! Property tests for the pipeline invariants, with independent brute-force
//! oracles where the behavior is numeric.

use proptest::prelude::*;

use fcd_core::data::{
    assign_splits, derive_image_label, normalize_bands, tile_scene, BandStats, Scene, TileOptions,
};
use fcd_core::eval::{confusion, f1_accuracy, Confusion};
use fcd_core::mask::{
    binarize, difference_map, select_threshold_maps, stitch_masks, DifferenceMap, ScoredMap,
};

// ---- normalization ----

proptest! {
    #[test]
    fn normalize_monotone_and_bounded(
        values in proptest::collection::vec(-50.0f32..150.0, 4..64),
        lo in -10.0f32..10.0,
        span in 0.5f32..100.0,
    ) {
        let w = values.len();
        let scene = Scene::new("p".into(), None, 1, 1, w, values.clone(), None, None).unwrap();
        let stats = BandStats(vec![(lo, lo + span)]);
        let out = normalize_bands(&scene, &stats).unwrap();
        for v in &out.bands {
            prop_assert!((-1.0..=1.0).contains(v));
        }
        // monotone: sort inputs, outputs must sort the same way
        let mut idx: Vec<usize> = (0..w).collect();
        idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
        for pair in idx.windows(2) {
            prop_assert!(out.bands[pair[0]] <= out.bands[pair[1]]);
        }
    }
}

// ---- difference maps and binarization ----

proptest! {
    #[test]
    fn difference_map_sign_symmetric_and_zero_iff_equal(
        x in proptest::collection::vec(-1.0f32..1.0, 2 * 16),
        y in proptest::collection::vec(-1.0f32..1.0, 2 * 16),
    ) {
        let a = difference_map(&x, &y, 2, 4, "p").unwrap();
        let b = difference_map(&y, &x, 2, 4, "p").unwrap();
        prop_assert_eq!(&a.values, &b.values);
        let self_dm = difference_map(&x, &x, 2, 4, "p").unwrap();
        prop_assert!(self_dm.values.iter().all(|&v| v == 0.0));
        // zero entries appear exactly where all channels agree
        for i in 0..16 {
            let equal = (0..2).all(|c| x[c * 16 + i] == y[c * 16 + i]);
            prop_assert_eq!(a.values[i] == 0.0, equal);
        }
    }

    #[test]
    fn binarize_monotone_in_threshold(
        values in proptest::collection::vec(0.0f32..1.0, 36),
        t1 in 0.0f32..1.0,
        t2 in 0.0f32..1.0,
    ) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let dm = DifferenceMap { values, size: 6, source: "p".into() };
        let coarse = binarize(&dm, hi);
        let fine = binarize(&dm, lo);
        for (c, f) in coarse.iter().zip(&fine) {
            prop_assert!(c <= f);
        }
    }
}

// ---- threshold sweep vs brute force ----

/// Fully independent sweep: recompute per-pixel counts and F1 at every grid
/// point, scanning ascending and keeping strict improvements.
fn brute_force_sweep(maps: &[(Vec<f32>, Vec<u8>)], grid: &[f32]) -> (f32, f64, Vec<(f32, f64)>) {
    let mut best_t = grid[0];
    let mut best_f1 = -1.0f64;
    let mut sweep = Vec::new();
    for &t in grid {
        let mut tp = 0u64;
        let mut fp = 0u64;
        let mut fneg = 0u64;
        for (scores, truth) in maps {
            for (s, &gt) in scores.iter().zip(truth) {
                let pred = *s > t;
                match (pred, gt != 0) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    (false, false) => {}
                }
            }
        }
        let denom = 2 * tp + fp + fneg;
        let f1 = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
        sweep.push((t, f1));
        if f1 > best_f1 {
            best_f1 = f1;
            best_t = t;
        }
    }
    (best_t, best_f1, sweep)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn threshold_selection_equals_brute_force(
        seed in 0u64..1000,
        n_maps in 1usize..4,
        grid_points in 1usize..40,
    ) {
        let mut rng = fcd_tensor::rng::Rng::seed_from(seed);
        let maps: Vec<(Vec<f32>, Vec<u8>)> = (0..n_maps)
            .map(|_| {
                let scores: Vec<f32> = (0..64).map(|_| rng.uniform_f32()).collect();
                // truth correlated with scores so sweeps are non-degenerate
                let truth: Vec<u8> = scores
                    .iter()
                    .map(|&s| u8::from(s + 0.3 * (rng.uniform_f32() - 0.5) > 0.5))
                    .collect();
                (scores, truth)
            })
            .collect();
        let max = maps
            .iter()
            .flat_map(|(s, _)| s.iter())
            .cloned()
            .fold(0.0f32, f32::max);
        let grid = fcd_core::mask::uniform_grid(max, grid_points);

        let scored: Vec<ScoredMap<'_>> = maps
            .iter()
            .map(|(s, t)| ScoredMap { scores: s, truth: t })
            .collect();
        let got = select_threshold_maps(&scored, &grid).unwrap();
        let (want_t, want_f1, want_sweep) = brute_force_sweep(&maps, &grid);
        prop_assert_eq!(got.threshold, want_t, "tie-break or argmax mismatch");
        prop_assert_eq!(got.f1, want_f1);
        prop_assert_eq!(got.sweep.len(), want_sweep.len());
        for ((gt, gf), (wt, wf)) in got.sweep.iter().zip(&want_sweep) {
            prop_assert_eq!(gt, wt);
            prop_assert_eq!(gf, wf);
        }
    }
}

// ---- stitching round trip ----

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn stitch_of_tiling_recovers_mask(
        h in 16usize..70,
        w in 16usize..70,
        seed in 0u64..1000,
    ) {
        let patch = 16usize;
        let mut rng = fcd_tensor::rng::Rng::seed_from(seed);
        let raw: Vec<u8> = (0..h * w).map(|_| if rng.uniform() < 0.4 { 2 } else { 0 }).collect();
        let scene = Scene::new(
            "m".into(), None, 1, h, w,
            vec![0.0; h * w],
            Some(raw),
            None,
        ).unwrap();
        let truth = scene.pixel_labels.clone().unwrap();

        let tiling = tile_scene(&scene, patch, TileOptions { drop_nodata_over: None }).unwrap();
        let tiles: Vec<((usize, usize), &[u8])> = tiling
            .patches
            .iter()
            .map(|p| (p.origin, p.pixel_mask.as_deref().unwrap()))
            .collect();
        let stitched = stitch_masks(&tiles, patch, h, w).unwrap();
        prop_assert_eq!(stitched.values, truth);
        prop_assert_eq!((stitched.height, stitched.width), (h, w));
    }

    #[test]
    fn tiled_patch_labels_match_their_masks(
        h in 16usize..48,
        w in 16usize..48,
        seed in 0u64..1000,
    ) {
        let mut rng = fcd_tensor::rng::Rng::seed_from(seed);
        let raw: Vec<u8> = (0..h * w).map(|_| if rng.uniform() < 0.05 { 2 } else { 0 }).collect();
        let scene = Scene::new("m".into(), None, 1, h, w, vec![0.0; h * w], Some(raw), None).unwrap();
        for p in tile_scene(&scene, 16, TileOptions::default()).unwrap().patches {
            prop_assert_eq!(p.image_label, derive_image_label(p.pixel_mask.as_ref().unwrap()));
        }
    }
}

// ---- metrics ----

proptest! {
    #[test]
    fn confusion_matches_per_pixel_enumeration(
        pred in proptest::collection::vec(0u8..2, 1..200),
        seed in 0u64..100,
    ) {
        let mut rng = fcd_tensor::rng::Rng::seed_from(seed);
        let truth: Vec<u8> = pred.iter().map(|_| rng.below(2) as u8).collect();
        let c = confusion(&pred, &truth, None).unwrap();
        let mut want = Confusion::default();
        for i in 0..pred.len() {
            match (pred[i] != 0, truth[i] != 0) {
                (true, true) => want.true_pos += 1,
                (true, false) => want.false_pos += 1,
                (false, true) => want.false_neg += 1,
                (false, false) => want.true_neg += 1,
            }
        }
        prop_assert_eq!(c, want);
        prop_assert_eq!(c.total() as usize, pred.len());
    }

    #[test]
    fn micro_pooling_sums_confusions(
        pred_a in proptest::collection::vec(0u8..2, 1..100),
        pred_b in proptest::collection::vec(0u8..2, 1..100),
        seed in 0u64..100,
    ) {
        let mut rng = fcd_tensor::rng::Rng::seed_from(seed);
        let truth_a: Vec<u8> = pred_a.iter().map(|_| rng.below(2) as u8).collect();
        let truth_b: Vec<u8> = pred_b.iter().map(|_| rng.below(2) as u8).collect();
        let mut pooled = confusion(&pred_a, &truth_a, None).unwrap();
        pooled.merge(&confusion(&pred_b, &truth_b, None).unwrap());
        // pooling must equal confusion over the concatenation
        let concat_pred: Vec<u8> = pred_a.iter().chain(&pred_b).cloned().collect();
        let concat_truth: Vec<u8> = truth_a.iter().chain(&truth_b).cloned().collect();
        let whole = confusion(&concat_pred, &concat_truth, None).unwrap();
        prop_assert_eq!(pooled, whole);
        prop_assert_eq!(f1_accuracy(&pooled).unwrap(), f1_accuracy(&whole).unwrap());
    }
}

// ---- splits ----

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn splits_partition_the_scene_set(
        n_biomes in 1usize..5,
        per_biome in 1usize..20,
        seed in 0u64..1000,
    ) {
        let scenes: Vec<(String, Option<String>)> = (0..n_biomes)
            .flat_map(|b| (0..per_biome).map(move |i| (format!("b{b}s{i}"), Some(format!("b{b}")))))
            .collect();
        let s = assign_splits(&scenes, (6, 2, 4), seed).unwrap();
        let mut all: Vec<&String> = s.train.iter().chain(&s.val).chain(&s.test).collect();
        prop_assert_eq!(all.len(), scenes.len());
        all.sort();
        all.dedup();
        prop_assert_eq!(all.len(), scenes.len(), "splits must be disjoint");
        if per_biome == 12 {
            prop_assert_eq!(s.train.len(), 6 * n_biomes);
            prop_assert_eq!(s.val.len(), 2 * n_biomes);
            prop_assert_eq!(s.test.len(), 4 * n_biomes);
        }
    }
}
