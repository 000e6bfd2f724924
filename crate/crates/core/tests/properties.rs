use image::RgbImage;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cellprompt::cdn::{cdn_group_mask, gen_noised_annotations, NoiseConfig};
use cellprompt::data::{augment, crop, dedup_by_radius, hflip, vflip, AugmentConfig, PadMode, SliceSpec};
use cellprompt::dpm::{build_visibility_mask, tokenize, EOS, SOS};
use cellprompt::matching::{hungarian, match_within_radius, CostMatrix};
use cellprompt::metrics::{evaluate, Prediction};
use cellprompt::nn::MASK_VALUE;
use cellprompt::{AnnotatedSample, CategoryRegistry, DatasetDescriptor, Point};

fn matrix() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..9, 1usize..9).prop_flat_map(|(n, m)| {
        (Just(n), Just(m), prop::collection::vec(-100.0f64..100.0, n * m))
    })
}

fn points(max: usize) -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.0f64..64.0, 0.0f64..64.0), 0..max)
}

fn sample(pts: &[(f64, f64)], size: u32) -> AnnotatedSample {
    AnnotatedSample {
        image: RgbImage::from_fn(size, size, |x, y| image::Rgb([x as u8, y as u8, 7])),
        dataset_id: 0,
        centroids: pts.iter().map(|&(u, v)| Point::new(u, v)).collect(),
        classes: (0..pts.len()).map(|i| i % 3).collect(),
    }
}

proptest! {
    #[test]
    fn assignment_is_a_maximal_injection((n, m, values) in matrix()) {
        let cost = CostMatrix::new(n, m, values).unwrap();
        let a = hungarian(&cost);
        prop_assert_eq!(a.pairs.len(), n.min(m));
        prop_assert_eq!(a.pairs.len() + a.unmatched_rows.len(), n);
        prop_assert_eq!(a.pairs.len() + a.unmatched_cols.len(), m);
        let mut cols: Vec<usize> = a.pairs.iter().map(|p| p.1).collect();
        cols.sort_unstable();
        cols.dedup();
        prop_assert_eq!(cols.len(), a.pairs.len());
    }

    #[test]
    fn transpose_keeps_the_optimum((n, m, values) in matrix()) {
        let cost = CostMatrix::new(n, m, values).unwrap();
        let a = hungarian(&cost).total_cost(&cost);
        let t = cost.transpose();
        let b = hungarian(&t).total_cost(&t);
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn never_worse_than_the_diagonal((n, m, values) in matrix()) {
        let cost = CostMatrix::new(n, m, values).unwrap();
        let diag: f64 = (0..n.min(m)).map(|i| cost.get(i, i)).sum();
        prop_assert!(hungarian(&cost).total_cost(&cost) <= diag + 1e-9);
    }

    #[test]
    fn row_shift_moves_total_by_the_shift((n, m, values) in matrix(), shift in -50.0f64..50.0) {
        // every row is matched when n <= m
        prop_assume!(n <= m);
        let cost = CostMatrix::new(n, m, values.clone()).unwrap();
        let mut shifted = values;
        for v in &mut shifted[..m] {
            *v += shift;
        }
        let shifted = CostMatrix::new(n, m, shifted).unwrap();
        let a = hungarian(&cost).total_cost(&cost);
        let b = hungarian(&shifted).total_cost(&shifted);
        prop_assert!((b - a - shift).abs() < 1e-9);
    }

    #[test]
    fn counts_partition_points(p in points(12), g in points(12), radius in 1.0f64..20.0) {
        let preds: Vec<Point> = p.iter().map(|&(u, v)| Point::new(u, v)).collect();
        let gts: Vec<Point> = g.iter().map(|&(u, v)| Point::new(u, v)).collect();
        let m = match_within_radius(&preds, &gts, radius);
        prop_assert_eq!(m.pairs.len() + m.false_positives.len(), preds.len());
        prop_assert_eq!(m.pairs.len() + m.false_negatives.len(), gts.len());
        for &(a, b) in &m.pairs {
            prop_assert!(preds[a].dist(&gts[b]) < radius);
        }
    }

    #[test]
    fn scores_are_bounded_and_order_free(
        p in points(8), g in points(8), cls in prop::collection::vec(0usize..3, 16), seed in any::<u64>()
    ) {
        let reg = CategoryRegistry::build(vec![DatasetDescriptor::new("x", &["a", "b", "c"], 6.0)]).unwrap();
        let preds: Vec<Prediction> = p.iter().enumerate()
            .map(|(i, &(u, v))| Prediction { u, v, class: cls[i], confidence: 0.5 })
            .collect();
        let gts: Vec<(Point, usize)> = g.iter().enumerate().map(|(i, &(u, v))| (Point::new(u, v), cls[8 + i])).collect();
        let r = evaluate(&preds, &gts, &reg, 0).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.f_d));
        prop_assert!((0.0..=1.0).contains(&r.mean_f_c));
        let matched: u64 = r.classes.iter().map(|c| c.tp + c.fp).sum();
        prop_assert_eq!(matched, r.detection.tp);
        let mut shuffled = preds.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let s = evaluate(&shuffled, &gts, &reg, 0).unwrap();
        prop_assert_eq!(s.detection, r.detection);
    }

    #[test]
    fn noise_respects_bounds(
        p in prop::collection::vec((0.0f64..200.0, 0.0f64..200.0), 1..8),
        l1 in 0.5f64..6.0, extra in 0.5f64..6.0, gamma in 0.0f64..1.0, groups in 1usize..4, seed in any::<u64>()
    ) {
        let pts: Vec<Point> = p.iter().map(|&(u, v)| Point::new(u, v)).collect();
        let classes: Vec<usize> = (0..pts.len()).map(|i| i % 3).collect();
        let cfg = NoiseConfig { enabled: true, lambda1: l1, lambda2: l1 + extra, gamma, n_groups: groups };
        let set = gen_noised_annotations(&pts, &classes, 3, (200.0, 200.0), &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(set.queries().count(), 2 * pts.len() * groups);
        for g in &set.groups {
            for q in &g.positives {
                prop_assert!(q.offset.0.abs() < l1 && q.offset.1.abs() < l1);
            }
            for q in &g.negatives {
                for d in [q.offset.0.abs(), q.offset.1.abs()] {
                    prop_assert!(d > l1 && d < l1 + extra);
                }
            }
            for q in g.positives.iter().chain(&g.negatives) {
                prop_assert!((0.0..200.0).contains(&q.point.u) && (0.0..200.0).contains(&q.point.v));
                prop_assert!(q.class < 3);
            }
        }
    }

    #[test]
    fn group_mask_is_block_diagonal(per in 1usize..5, groups in 1usize..4, content in 0usize..5) {
        let mask = cdn_group_mask(per, groups, content);
        let n = per * groups + content;
        let block = |i: usize| if i < per * groups { i / per } else { usize::MAX };
        for i in 0..n {
            for j in 0..n {
                let open = mask[i * n + j] == 0.0;
                prop_assert_eq!(open, block(i) == block(j));
            }
        }
    }

    #[test]
    fn visibility_mask_opens_visible_rows(seq_len in 1usize..6, which in 0usize..2) {
        let reg = CategoryRegistry::build(vec![
            DatasetDescriptor::new("a", &["tumor", "stroma"], 6.0),
            DatasetDescriptor::new("b", &["stroma", "plasma", "lymphocyte"], 6.0),
        ]).unwrap();
        let mask = build_visibility_mask(&reg, which, seq_len);
        prop_assert_eq!(mask.len(), reg.num_categories() * seq_len);
        let open = mask.iter().filter(|&&m| m == 0.0).count();
        prop_assert_eq!(open, reg.visible(which).len() * seq_len);
        prop_assert!(mask.iter().all(|&m| m == 0.0 || m == MASK_VALUE));
    }

    #[test]
    fn token_sequences_have_fixed_shape(word in "[a-z]{1,12}( [a-z]{1,12}){0,3}", len in 4usize..40) {
        let t = tokenize(&word, len);
        prop_assert_eq!(t.ids.len(), len);
        prop_assert_eq!(t.ids[0], SOS);
        prop_assert!(t.ids.contains(&EOS));
        prop_assert_eq!(t.ids[t.content_len() - 1], EOS);
    }

    #[test]
    fn double_flip_is_identity(p in prop::collection::vec((0.0f64..=63.0, 0.0f64..=63.0), 0..10)) {
        let s = sample(&p, 64);
        for twice in [hflip(&hflip(&s)), vflip(&vflip(&s))] {
            prop_assert_eq!(&twice.image, &s.image);
            prop_assert_eq!(&twice.classes, &s.classes);
            for (a, b) in twice.centroids.iter().zip(&s.centroids) {
                prop_assert!(a.dist(b) < 1e-9);
            }
        }
    }

    #[test]
    fn flips_stay_in_frame(p in points(10)) {
        let s = sample(&p, 64);
        for f in [hflip(&s), vflip(&s)] {
            for q in &f.centroids {
                prop_assert!(q.u >= 0.0 && q.v >= 0.0 && q.u < 64.0 && q.v < 64.0);
            }
        }
    }

    #[test]
    fn crops_keep_points_inside(p in points(10), x in 0u32..32, y in 0u32..32, side in 8u32..32) {
        let s = sample(&p, 64);
        let c = crop(&s, x, y, side, side);
        prop_assert_eq!(c.centroids.len(), c.classes.len());
        for q in &c.centroids {
            prop_assert!(q.u >= 0.0 && q.v >= 0.0 && q.u < side as f64 && q.v < side as f64);
        }
    }

    #[test]
    fn augmentation_keeps_annotations_in_frame(p in points(10), seed in any::<u64>()) {
        let s = sample(&p, 64);
        let cfg = AugmentConfig { sizes: vec![32, 64, 96], ..AugmentConfig::default() };
        let a = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(cfg.sizes.contains(&a.width()));
        for q in &a.centroids {
            prop_assert!(q.u >= 0.0 && q.v >= 0.0 && q.u < a.width() as f64 && q.v < a.height() as f64);
        }
    }

    #[test]
    fn slices_cover_the_axis(len in 1u32..500, patch in 8u32..128, overlap in 0.0f64..0.9) {
        let spec = SliceSpec { patch_size: patch, overlap, pad_mode: PadMode::Zero };
        let offs = spec.offsets(len);
        prop_assert_eq!(offs[0], 0);
        prop_assert!(offs[offs.len() - 1] + patch >= len);
        for w in offs.windows(2) {
            prop_assert!(w[1] > w[0] && w[1] <= w[0] + patch);
        }
    }

    #[test]
    fn dedup_is_idempotent_and_sparse(p in points(20), radius in 1.0f64..10.0) {
        let preds: Vec<Prediction> = p.iter().enumerate()
            .map(|(i, &(u, v))| Prediction { u, v, class: 0, confidence: (i % 7) as f64 / 7.0 })
            .collect();
        let once = dedup_by_radius(&preds, radius);
        prop_assert_eq!(&dedup_by_radius(&once, radius), &once);
        for (i, a) in once.iter().enumerate() {
            for b in &once[i + 1..] {
                prop_assert!((a.u - b.u).hypot(a.v - b.v) >= radius);
            }
        }
    }
}
