use std::collections::{BTreeMap, BTreeSet};

use fp_volseg::data::{split_model_wise, CaseRecord};
use fp_volseg::focused::{build_epoch_plan, classify, otsu_threshold, LossRegistry, PatchId};
use fp_volseg::inference::{dilate, erode, postprocess_open};
use fp_volseg::loss::{bce, combined_loss, dice_loss, soft_dice_loss, tversky_loss, LossWeights, TverskyParams};
use fp_volseg::metrics::{connected_components, dice_coefficient, fnv, fpv, Connectivity};
use fp_volseg::patch::{compute_grid, extract_volume_patch, fuse_patches, WeightMap};
use fp_volseg::train::lr_for_epoch;
use fp_volseg::volume::{decode_volume, encode_volume, normalize_zscore, FlipAxes};
use fp_volseg::{Shape, Volume3D, VolumeKind};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SPACING: [f64; 3] = [1.5, 1.5, 2.0];

fn shape_strategy(max: usize) -> impl Strategy<Value = Shape> {
    [1..=max, 1..=max, 1..=max]
}

fn image(max: usize) -> impl Strategy<Value = Volume3D> {
    shape_strategy(max).prop_flat_map(|s| {
        prop::collection::vec(-100.0f32..100.0, s.iter().product::<usize>())
            .prop_map(move |d| Volume3D::new(s, SPACING, d, VolumeKind::Image).unwrap())
    })
}

fn mask_of(shape: Shape) -> impl Strategy<Value = Volume3D> {
    prop::collection::vec(prop::bool::weighted(0.35), shape.iter().product::<usize>()).prop_map(move |bits| {
        let d = bits.into_iter().map(|b| b as u8 as f32).collect();
        Volume3D::new(shape, SPACING, d, VolumeKind::Mask).unwrap()
    })
}

fn mask(max: usize) -> impl Strategy<Value = Volume3D> {
    shape_strategy(max).prop_flat_map(mask_of)
}

fn mask_pair(max: usize) -> impl Strategy<Value = (Volume3D, Volume3D)> {
    shape_strategy(max).prop_flat_map(|s| (mask_of(s), mask_of(s)))
}

fn connectivity() -> impl Strategy<Value = Connectivity> {
    prop_oneof![Just(6u32), Just(18), Just(26)].prop_map(|n| Connectivity::from_count(n).unwrap())
}

fn prob_target(max_len: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1..=max_len).prop_flat_map(|n| {
        (
            prop::collection::vec(0.0f64..=1.0, n),
            prop::collection::vec(prop::bool::ANY.prop_map(|b| b as u8 as f64), n),
        )
    })
}

fn subset(a: &Volume3D, b: &Volume3D) -> bool {
    a.data().iter().zip(b.data()).all(|(&x, &y)| x <= y)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zscore_has_zero_mean_unit_std(v in image(8)) {
        let lo = v.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = v.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        prop_assume!(hi - lo > 1e-2);
        let z = normalize_zscore(&v).unwrap();
        let n = z.len() as f64;
        let mean = z.data().iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = z.data().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-4, "mean {}", mean);
        prop_assert!((var.sqrt() - 1.0).abs() < 1e-4, "std {}", var.sqrt());
    }

    #[test]
    fn flips_are_involutions(v in image(7), axes in [any::<bool>(), any::<bool>(), any::<bool>()]) {
        let f = FlipAxes(axes);
        prop_assert_eq!(f.apply(&f.apply(&v)), v);
    }

    #[test]
    fn fpvol_round_trips(v in image(6), m in mask(6)) {
        prop_assert_eq!(decode_volume(&encode_volume(&v)).unwrap(), v);
        prop_assert_eq!(decode_volume(&encode_volume(&m)).unwrap(), m);
    }

    #[test]
    fn fusion_reconstructs_any_positive_weighting(
        shape in shape_strategy(14),
        patch in shape_strategy(6),
        overlap in 0.0f64..0.9,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..shape.iter().product::<usize>()).map(|_| rng.random()).collect();
        let v = Volume3D::new(shape, SPACING, data, VolumeKind::Probability).unwrap();
        let weights = (0..patch.iter().product::<usize>()).map(|_| rng.random_range(1e-3..1.0)).collect();
        let wmap = WeightMap::from_weights(patch, weights).unwrap();
        let grid = compute_grid(shape, patch, overlap).unwrap();
        let preds: Vec<_> = grid.origins().iter().map(|&o| (o, extract_volume_patch(&v, o, patch).unwrap())).collect();
        let fused = fuse_patches(&preds, shape, SPACING, &wmap).unwrap();
        for (a, b) in fused.data().iter().zip(v.data()) {
            prop_assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn fusion_is_a_convex_combination(
        shape in shape_strategy(12),
        patch in shape_strategy(5),
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = compute_grid(shape, patch, 0.5).unwrap();
        let consts: Vec<f32> = grid.origins().iter().map(|_| rng.random()).collect();
        let n = patch.iter().product::<usize>();
        let preds: Vec<_> = grid.origins().iter().zip(&consts).map(|(&o, &c)| (o, vec![c; n])).collect();
        let weights = (0..n).map(|_| rng.random_range(1e-3..1.0)).collect();
        let fused = fuse_patches(&preds, shape, SPACING, &WeightMap::from_weights(patch, weights).unwrap()).unwrap();
        let lo = consts.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = consts.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        prop_assert!(fused.data().iter().all(|&x| x >= lo - 1e-6 && x <= hi + 1e-6));
    }

    #[test]
    fn overlap_losses_stay_in_unit_range((p, g) in prob_target(64)) {
        let tv = TverskyParams::default();
        for l in [
            dice_loss(&p, &g, 1e-5).unwrap().loss,
            soft_dice_loss(&p, &g, 1e-5).unwrap().loss,
            tversky_loss(&p, &g, &tv).unwrap().loss,
        ] {
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&l), "{}", l);
        }
        prop_assert!(bce(&p, &g).unwrap().loss >= 0.0);
    }

    #[test]
    fn combined_gradient_matches_finite_differences(
        (p, g) in prob_target(24),
        w in (0.0f64..2.0, 0.0f64..2.0, 0.1f64..2.0),
    ) {
        let p: Vec<f64> = p.into_iter().map(|x| 0.05 + 0.9 * x).collect();
        let weights = LossWeights::new(w.0, w.1, w.2).unwrap();
        let tv = TverskyParams::default();
        let f = |x: &[f64]| combined_loss(x, &g, &weights, &tv).unwrap().loss;
        let grad = combined_loss(&p, &g, &weights, &tv).unwrap().grad;
        let h = 1e-5;
        for i in 0..p.len() {
            let (mut up, mut dn) = (p.clone(), p.clone());
            up[i] += h;
            dn[i] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            prop_assert!((grad[i] - fd).abs() <= 1e-4 * fd.abs().max(1e-6), "i={} {} vs {}", i, grad[i], fd);
        }
    }

    #[test]
    fn perfect_prediction_has_lowest_dice_loss((p, g) in prob_target(40)) {
        prop_assume!(g.iter().any(|&x| x > 0.0));
        let perfect = dice_loss(&g, &g, 1e-5).unwrap().loss;
        prop_assert!(perfect <= dice_loss(&p, &g, 1e-5).unwrap().loss + 1e-12);
    }

    #[test]
    fn lr_schedule_strictly_decreases(a in 0.0f64..100.0, b in 0.0f64..100.0) {
        prop_assume!(a < b);
        prop_assert!(lr_for_epoch(3e-5, b).unwrap() < lr_for_epoch(3e-5, a).unwrap());
    }

    #[test]
    fn erosion_and_dilation_bracket_the_mask(m in mask(9), r in 1usize..3) {
        let e = erode(&m, r).unwrap();
        let d = dilate(&m, r).unwrap();
        prop_assert!(subset(&e, &m));
        prop_assert!(subset(&m, &d));
    }

    #[test]
    fn opening_is_idempotent_and_anti_extensive(m in mask(9), r in 1usize..3) {
        let o = postprocess_open(&m, r).unwrap();
        prop_assert!(subset(&o, &m));
        prop_assert_eq!(postprocess_open(&o, r).unwrap(), o);
    }

    #[test]
    fn lesion_volume_duality((a, b) in mask_pair(10), c in connectivity()) {
        prop_assert_eq!(fpv(&a, &b, c).unwrap(), fnv(&b, &a, c).unwrap());
        prop_assert_eq!(fpv(&a, &a, c).unwrap(), 0.0);
    }

    #[test]
    fn dice_is_symmetric((a, b) in mask_pair(10)) {
        let (x, y) = (dice_coefficient(&a, &b).unwrap(), dice_coefficient(&b, &a).unwrap());
        prop_assert_eq!(x, y);
        prop_assert!((0.0..=1.0).contains(&x));
    }

    #[test]
    fn components_partition_the_foreground(m in mask(10), c in connectivity()) {
        let lab = connected_components(&m, c).unwrap();
        prop_assert_eq!(lab.sizes().iter().sum::<usize>(), m.count_nonzero());
        prop_assert!(lab.sizes().iter().all(|&s| s > 0));
        // coarser neighbourhoods can only merge components
        let coarser = connected_components(&m, Connectivity::TwentySix).unwrap();
        prop_assert!(coarser.num_components <= lab.num_components);
    }

    #[test]
    fn otsu_separates_the_classes(v in prop::collection::vec(0.0f64..10.0, 1..80)) {
        let s = otsu_threshold(&v).unwrap();
        let mut sorted = v.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assert!(s.split_index >= 1 && s.split_index <= v.len());
        if s.split_index < v.len() {
            prop_assert!(sorted[s.split_index - 1] <= s.threshold && s.threshold <= sorted[s.split_index]);
        }
    }

    #[test]
    fn epoch_plan_multiset_is_consistent(
        losses in prop::collection::vec(0.0f64..5.0, 1..60),
        factor in 1usize..4,
        frac in 0.0f64..0.9,
        seed in any::<u64>(),
    ) {
        let mut reg = LossRegistry::new();
        for (i, &l) in losses.iter().enumerate() {
            reg.record_loss(PatchId(i as u32 * 3), l).unwrap();
        }
        let plan = build_epoch_plan(&reg, factor, frac, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut counted: BTreeMap<PatchId, usize> = BTreeMap::new();
        for id in &plan.entries {
            *counted.entry(*id).or_default() += 1;
        }
        prop_assert_eq!(&counted, &plan.counts);
        prop_assert!(plan.entries.iter().all(|id| !plan.excluded.contains(id)));
        for id in reg.entries().keys() {
            prop_assert!(plan.counts.contains_key(id) != plan.excluded.contains(id));
        }
        let cls = classify(&reg).unwrap();
        prop_assert_eq!(plan.excluded.len(), (frac * cls.hard.len() as f64).floor() as usize);
        for id in &cls.easy {
            prop_assert_eq!(plan.counts[id], 1);
        }
        for id in cls.hard.iter().filter(|id| !plan.excluded.contains(id)) {
            prop_assert_eq!(plan.counts[id], factor);
        }
        let again = build_epoch_plan(&reg, factor, frac, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(again.entries, plan.entries);
    }

    #[test]
    fn model_wise_sets_are_disjoint(
        n_lesion_cases in 6usize..40,
        n_normal_cases in 4usize..30,
        k in 1usize..4,
        seed in any::<u64>(),
    ) {
        let cases: Vec<CaseRecord> = (0..n_lesion_cases + n_normal_cases)
            .map(|i| CaseRecord { case_id: format!("c{i}"), has_lesion: i < n_lesion_cases })
            .collect();
        let (nl, nn) = (n_lesion_cases / k, n_normal_cases / k);
        prop_assume!(nl + nn > 0);
        let s = split_model_wise(&cases, k, nl, nn, seed).unwrap();
        let mut seen = BTreeSet::new();
        for set in &s.val_sets {
            prop_assert_eq!(set.len(), nl + nn);
            for id in set {
                prop_assert!(seen.insert(id.clone()), "{} appears twice", id);
            }
        }
        for id in &s.train_pool {
            prop_assert!(seen.insert(id.clone()));
        }
        prop_assert_eq!(seen.len(), cases.len());
    }
}
