//! Randomized invariants.

use fat_core::attention::{window_partition, window_reverse, RelPosBias, WindowConfig};
use fat_core::metrics::{eq7_accuracy, mse_per_trait, weighted_f1};
use fat_core::patching::{merge_patches, partition_patches, patchify_segmap, ChunkLayout, SegMap};
use fat_core::{Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid_and_window() -> impl Strategy<Value = ([usize; 3], [usize; 3], bool)> {
    (1usize..=2, 1usize..=3, 1usize..=3, 1usize..=2, 1usize..=2, 1usize..=2, any::<bool>())
        .prop_map(|(wd, wh, ww, md, mh, mw, shift)| ([wd * md, wh * mh, ww * mw], [wd, wh, ww], shift))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn patch_partition_round_trips(c in 1usize..3, d in 1usize..3, rows in 1usize..4, cols in 1usize..4, p in 1usize..4, seed: u64) {
        let shape = [c, d, rows * p, cols * p];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::from_fn(&shape, |_| rng.random::<f64>());
        let grid = partition_patches(&x, p).unwrap();
        prop_assert_eq!(grid.patches.len(), rows * cols);
        let back = merge_patches(&grid).unwrap();
        prop_assert_eq!(back.data(), x.data());
    }

    #[test]
    fn window_partition_is_a_bijection((grid, window, shift) in grid_and_window(), width in 1usize..3) {
        let mut cfg = WindowConfig::new(window, 1, width).unwrap();
        if shift {
            cfg = cfg.shifted();
        }
        let l: usize = grid.iter().product();
        let x = Tensor::<f64>::from_fn(&[l, width], |i| i as f64);
        let (w, plan) = window_partition(&x, grid, &cfg).unwrap();
        let mut seen: Vec<f64> = w.data().to_vec();
        seen.sort_by(f64::total_cmp);
        prop_assert_eq!(&seen, x.data());
        let back = window_reverse(&w, &plan).unwrap();
        prop_assert_eq!(back.data(), x.data());
    }

    #[test]
    fn relative_bias_index_depends_only_on_offset(
        window in (1usize..4, 1usize..4, 1usize..4),
        seed: u64,
    ) {
        let window = [window.0, window.1, window.2];
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rel = RelPosBias::new(&mut store, &mut rng, "r", window, 1);
        let pick = |rng: &mut ChaCha8Rng| [0, 1, 2].map(|k| rng.random_range(0..window[k]));
        let (a, b) = (pick(&mut rng), pick(&mut rng));
        // Translate both points by the same offset while staying inside the window.
        let mut a2 = a;
        let mut b2 = b;
        for k in 0..3 {
            let lo = -(a[k].min(b[k]) as i64);
            let hi = (window[k] - 1 - a[k].max(b[k])) as i64;
            let t = rng.random_range(lo..=hi);
            a2[k] = (a[k] as i64 + t) as usize;
            b2[k] = (b[k] as i64 + t) as usize;
        }
        prop_assert_eq!(rel.index(a, b), rel.index(a2, b2));
        prop_assert!(rel.index(a, b) < RelPosBias::table_len(window));
        if a != b {
            prop_assert_ne!(rel.index(a, b), rel.index(a, a));
        }
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..7, scale in 0.1f64..200.0, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::from_fn(&[rows, cols], |_| (rng.random::<f64>() - 0.5) * scale);
        let mut g = Graph::<f64>::new();
        let v = g.constant(x);
        let s = g.softmax(v, 1).unwrap();
        for row in g.value(s).data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn patchify_flags_match_any_pixel_rule(rows in 1usize..4, cols in 1usize..4, ch in 1usize..4, cw in 1usize..4, seed: u64) {
        let (h, w) = (rows * ch, cols * cw);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.2)).collect();
        let seg = SegMap::new(h, w, mask.clone()).unwrap();
        let m = patchify_segmap(&seg, ChunkLayout::spatial(rows, cols), 3, 0.0).unwrap();
        for r in 0..rows {
            for c in 0..cols {
                let any = (r * ch..(r + 1) * ch).any(|y| (c * cw..(c + 1) * cw).any(|x| mask[y * w + x]));
                prop_assert_eq!(m.flags()[r * cols + c], any);
            }
        }
        let mat = m.matrix::<f64>();
        for row in mat.data().chunks(3) {
            prop_assert!(row.iter().all(|&v| v == row[0]));
        }

        // Adding foreground never clears a chunk.
        let mut more = seg.clone();
        more.set(0, rng.random_range(0..h), rng.random_range(0..w), true);
        let m2 = patchify_segmap(&more, ChunkLayout::spatial(rows, cols), 3, 0.0).unwrap();
        for (a, b) in m.flags().iter().zip(m2.flags()) {
            prop_assert!(!a || *b);
        }
    }

    #[test]
    fn eq7_is_one_minus_mean_absolute_error(pairs in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..20)) {
        let (t, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let mae = t.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum::<f64>() / t.len() as f64;
        let acc = eq7_accuracy(&t, &p).unwrap();
        prop_assert!((acc - (1.0 - mae)).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn weighted_f1_ignores_label_names(labels in prop::collection::vec((0usize..4, 0usize..4), 1..40), perm_seed: u64) {
        let mut perm: Vec<usize> = (0..4).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
        for i in (1..4).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let (t, p): (Vec<usize>, Vec<usize>) = labels.iter().copied().unzip();
        let t2: Vec<usize> = t.iter().map(|&c| perm[c]).collect();
        let p2: Vec<usize> = p.iter().map(|&c| perm[c]).collect();
        let a = weighted_f1(&t, &p, 4).unwrap();
        prop_assert!((a - weighted_f1(&t2, &p2, 4).unwrap()).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((weighted_f1(&t, &t, 4).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn mean_trait_mse_is_the_flat_mean(n in 1usize..10, k in 1usize..6, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t: Vec<f64> = (0..n * k).map(|_| rng.random()).collect();
        let p: Vec<f64> = (0..n * k).map(|_| rng.random()).collect();
        let (per, mean) = mse_per_trait(&t, &p, k).unwrap();
        prop_assert_eq!(per.len(), k);
        let flat = t.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (n * k) as f64;
        prop_assert!((mean - flat).abs() <= 1e-12);
        prop_assert!((per.iter().sum::<f64>() / k as f64 - flat).abs() <= 1e-12);
    }
}
