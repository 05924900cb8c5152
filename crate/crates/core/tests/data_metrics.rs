use cmscan::data::{
    augment, class_frequencies, class_weights, cm_update, generate_scene, generate_scenes,
    iou_from_cm, load_dataset, resize_nearest, write_split, AugmentPolicy, ClassAppearance,
    ConfusionMatrix, LabelMap, SamplePair, SceneSpec,
};
use cmscan::model::weighted_cross_entropy;
use cmscan::numerics::{Rng, Tensor};
use cmscan::Error;
use proptest::prelude::*;

fn labels(h: usize, w: usize, data: &[u8]) -> LabelMap {
    LabelMap::new(h, w, data.to_vec()).unwrap()
}

fn cm_from(k: usize, gt: &[u8], pred: &[u8]) -> ConfusionMatrix {
    let n = gt.len();
    cm_update(
        ConfusionMatrix::new(k),
        &labels(1, n, pred),
        &labels(1, n, gt),
    )
    .unwrap()
}

// scene generation

#[test]
fn generation_is_deterministic_per_seed() {
    let spec = SceneSpec::default();
    let a = generate_scene(&spec, &mut Rng::new(7)).unwrap();
    let b = generate_scene(&spec, &mut Rng::new(7)).unwrap();
    let c = generate_scene(&spec, &mut Rng::new(8)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let xs = generate_scenes(&spec, &Rng::new(3), 4).unwrap();
    assert_eq!(xs, generate_scenes(&spec, &Rng::new(3), 4).unwrap());
    assert_ne!(xs[0], xs[1]);
}

#[test]
fn generated_sample_respects_type_invariants() {
    let spec = SceneSpec::default();
    for s in generate_scenes(&spec, &Rng::new(1), 8).unwrap() {
        assert_eq!(s.rgb.shape(), &[3, 64, 64]);
        assert_eq!(s.thermal.shape(), &[3, 64, 64]);
        assert!(s
            .rgb
            .data()
            .iter()
            .chain(s.thermal.data())
            .all(|&v| (0.0..=1.0).contains(&v)));
        assert!(s
            .labels
            .data
            .iter()
            .all(|&l| (l as usize) < spec.num_classes));
        let hw = 64 * 64;
        let t = s.thermal.data();
        assert!((0..hw).all(|i| t[i] == t[hw + i] && t[i] == t[2 * hw + i]));
    }
}

#[test]
fn zero_shapes_give_background_only() {
    let spec = SceneSpec {
        min_shapes: 0,
        max_shapes: 0,
        ..SceneSpec::default()
    };
    let s = generate_scene(&spec, &mut Rng::new(0)).unwrap();
    assert!(s.labels.data.iter().all(|&l| l == 0));
}

#[test]
fn ambiguous_pair_has_identical_noise_free_rgb() {
    let spec = SceneSpec {
        rgb_noise: 0.0,
        thermal_noise: 0.0,
        min_shapes: 8,
        max_shapes: 8,
        ..SceneSpec::default()
    };
    let hw = 64 * 64;
    let mut seen = [None::<[u32; 3]>; 6];
    let mut thermal = [None::<f32>; 6];
    for s in generate_scenes(&spec, &Rng::new(2), 6).unwrap() {
        for (p, &l) in s.labels.data.iter().enumerate() {
            let rgb = [0, 1, 2].map(|c| s.rgb.data()[c * hw + p].to_bits());
            assert_eq!(*seen[l as usize].get_or_insert(rgb), rgb);
            thermal[l as usize] = Some(s.thermal.data()[p]);
        }
    }
    for (a, b) in [(1, 2), (3, 4)] {
        assert_eq!(seen[a].unwrap(), seen[b].unwrap());
        assert!((thermal[a].unwrap() - thermal[b].unwrap()).abs() >= 0.3 - 1e-6);
    }
}

#[test]
fn spec_validation_rejects_bad_specs() {
    let bad = [
        SceneSpec {
            height: 48,
            ..SceneSpec::default()
        },
        SceneSpec {
            ambiguous_pairs: vec![(1, 3)],
            ..SceneSpec::default()
        },
        SceneSpec {
            ambiguous_pairs: vec![(2, 2)],
            ..SceneSpec::default()
        },
        SceneSpec {
            num_classes: 5,
            ..SceneSpec::default()
        },
        SceneSpec {
            min_shapes: 4,
            max_shapes: 2,
            ..SceneSpec::default()
        },
        SceneSpec {
            rgb_noise: -0.1,
            ..SceneSpec::default()
        },
    ];
    for spec in bad {
        let err = generate_scene(&spec, &mut Rng::new(0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }
    let mut close = SceneSpec::default();
    close.classes[2] = ClassAppearance {
        rgb: close.classes[1].rgb,
        thermal: close.classes[1].thermal + 0.29,
    };
    assert!(close.validate().is_err());
    close.classes[2].thermal = close.classes[1].thermal + 0.31;
    close.validate().unwrap();
}

/// An rgb-only nearest-color rule on ambiguous pixels is no better than a coin flip,
/// while the thermal level separates the same pixels.
#[test]
fn rgb_nearest_color_cannot_separate_ambiguous_pixels() {
    let spec = SceneSpec::default();
    let hw = spec.height * spec.width;
    let mut pixels: Vec<(u8, [f64; 3], f64)> = Vec::new();
    let mut per_class = [0usize; 2];
    let mut i = 0;
    while per_class.iter().any(|&n| n < 500) {
        let s = generate_scene(&spec, &mut Rng::new(100).split(i)).unwrap();
        i += 1;
        for (p, &l) in s.labels.data.iter().enumerate() {
            let slot = match l {
                1 => 0,
                2 => 1,
                _ => continue,
            };
            if per_class[slot] < 500 {
                per_class[slot] += 1;
                let rgb = [0, 1, 2].map(|c| s.rgb.data()[c * hw + p] as f64);
                pixels.push((l, rgb, s.thermal.data()[p] as f64));
            }
        }
    }
    assert_eq!(pixels.len(), 1000);
    let classes = &spec.classes;
    let mut rgb_hits = 0;
    let mut thermal_hits = 0;
    for &(l, rgb, t) in &pixels {
        let by_rgb = argmin(
            classes
                .iter()
                .map(|a| a.rgb.iter().zip(rgb).map(|(m, v)| (m - v).powi(2)).sum()),
        );
        // thermal decides within the pair
        let by_thermal = 1 + argmin(classes[1..3].iter().map(|a| (a.thermal - t).abs()));
        rgb_hits += (by_rgb == l as usize) as usize;
        thermal_hits += (by_thermal == l as usize) as usize;
    }
    let rgb_acc = rgb_hits as f64 / 1000.0;
    assert!(rgb_acc <= 0.5, "rgb-only accuracy {rgb_acc}");
    assert!(thermal_hits as f64 / 1000.0 > 0.95);
}

/// First index of the smallest value; ties go to the lower class id.
fn argmin(xs: impl Iterator<Item = f64>) -> usize {
    xs.enumerate()
        .fold(
            (0, f64::INFINITY),
            |b, (i, d)| if d < b.1 { (i, d) } else { b },
        )
        .0
}

// dataset loading

fn small_sample(h: usize, w: usize, seed: u64) -> SamplePair {
    let spec = SceneSpec {
        height: 32,
        width: 32,
        ..SceneSpec::default()
    };
    let s = generate_scene(&spec, &mut Rng::new(seed)).unwrap();
    if (h, w) == (32, 32) {
        s
    } else {
        SamplePair::new(
            Tensor::from_fn(&[3, h, w], |i| s.rgb.data()[i % s.rgb.len()]),
            Tensor::from_fn(&[3, h, w], |i| s.thermal.data()[i % s.thermal.len()]),
            LabelMap::filled(h, w, 1),
        )
        .unwrap()
    }
}

#[test]
fn written_split_loads_back_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let samples = vec![small_sample(32, 32, 0), small_sample(32, 32, 1)];
    write_split(dir.path(), "train", &samples).unwrap();
    let index = load_dataset(dir.path(), "train").unwrap();
    assert_eq!(index.len(), 2);
    assert_eq!(index.entries[0].stem, "00000");
    assert_eq!(index.load_all().unwrap(), samples);
}

#[test]
fn empty_split_is_an_empty_index() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("val")).unwrap();
    assert!(load_dataset(dir.path(), "val").unwrap().is_empty());
    write_split(dir.path(), "test", &[]).unwrap();
    assert!(load_dataset(dir.path(), "test").unwrap().is_empty());
}

#[test]
fn single_triple_gives_index_of_one() {
    let dir = tempfile::tempdir().unwrap();
    write_split(dir.path(), "train", &[small_sample(32, 32, 4)]).unwrap();
    assert_eq!(load_dataset(dir.path(), "train").unwrap().len(), 1);
}

#[test]
fn missing_counterpart_names_the_stem() {
    let dir = tempfile::tempdir().unwrap();
    write_split(
        dir.path(),
        "train",
        &[small_sample(32, 32, 0), small_sample(32, 32, 1)],
    )
    .unwrap();
    std::fs::remove_file(dir.path().join("train/thermal/00001.png")).unwrap();
    match load_dataset(dir.path(), "train").unwrap_err() {
        Error::Dataset(m) => assert!(m.contains("00001") && m.contains("thermal"), "{m}"),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn size_mismatch_within_a_triple_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_split(dir.path(), "train", &[small_sample(64, 64, 0)]).unwrap();
    let other = tempfile::tempdir().unwrap();
    write_split(other.path(), "train", &[small_sample(32, 32, 0)]).unwrap();
    std::fs::copy(
        other.path().join("train/labels/00000.png"),
        dir.path().join("train/labels/00000.png"),
    )
    .unwrap();
    match load_dataset(dir.path(), "train").unwrap_err() {
        Error::Dataset(m) => assert!(m.contains("size mismatch"), "{m}"),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn missing_root_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_dataset(&dir.path().join("absent"), "train").unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
}

// augmentation

/// Every pixel carries its source index in all three modalities.
fn tagged(h: usize, w: usize) -> SamplePair {
    let n = h * w;
    SamplePair::new(
        Tensor::from_fn(&[3, h, w], |i| (i % n) as f32),
        Tensor::from_fn(&[3, h, w], |i| (i % n) as f32 + 0.5),
        LabelMap::new(h, w, (0..n).map(|i| (i % 251) as u8).collect()).unwrap(),
    )
    .unwrap()
}

#[test]
fn identity_policy_is_identity() {
    let s = tagged(8, 12);
    let policy = AugmentPolicy {
        crop: Some([8, 12]),
        ..AugmentPolicy::identity()
    };
    assert_eq!(augment(&s, &mut Rng::new(0), &policy).unwrap(), s);
    assert_eq!(
        augment(&s, &mut Rng::new(0), &AugmentPolicy::identity()).unwrap(),
        s
    );
}

#[test]
fn hflip_reverses_label_columns_exactly() {
    let s = tagged(4, 6);
    let policy = AugmentPolicy {
        hflip_p: 1.0,
        ..AugmentPolicy::identity()
    };
    let f = augment(&s, &mut Rng::new(0), &policy).unwrap();
    for y in 0..4 {
        for x in 0..6 {
            assert_eq!(f.labels.data[y * 6 + x], s.labels.data[y * 6 + 5 - x]);
        }
    }
}

#[test]
fn crop_offsets_are_reproducible_per_seed() {
    let s = tagged(32, 32);
    let policy = AugmentPolicy {
        crop: Some([16, 16]),
        hflip_p: 0.5,
        ..AugmentPolicy::identity()
    };
    let a = augment(&s, &mut Rng::new(5), &policy).unwrap();
    assert_eq!(a, augment(&s, &mut Rng::new(5), &policy).unwrap());
    let distinct = (0..8).any(|seed| augment(&s, &mut Rng::new(seed), &policy).unwrap() != a);
    assert!(distinct);
}

#[test]
fn oversized_crop_is_rejected() {
    let policy = AugmentPolicy {
        crop: Some([9, 4]),
        ..AugmentPolicy::identity()
    };
    assert!(augment(&tagged(8, 8), &mut Rng::new(0), &policy).is_err());
}

#[test]
fn nearest_label_resize_replicates_blocks() {
    let l = labels(2, 2, &[1, 2, 3, 4]);
    let up = resize_nearest(&l, 4, 4);
    assert_eq!(
        up.data,
        vec![1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4]
    );
    assert_eq!(resize_nearest(&up, 2, 2), l);
}

proptest! {
    #[test]
    fn augmentation_keeps_modalities_aligned(seed in 0u64..1000, ch in 1usize..=12, cw in 1usize..=10, p in 0.0f64..=1.0) {
        let (h, w) = (12, 10);
        let s = tagged(h, w);
        let policy = AugmentPolicy { crop: Some([ch, cw]), hflip_p: p, resize: None };
        let a = augment(&s, &mut Rng::new(seed), &policy).unwrap();
        let n = ch * cw;
        prop_assert_eq!(a.rgb.shape(), &[3, ch, cw]);
        for i in 0..n {
            let src = a.rgb.data()[i];
            prop_assert!(src.fract() == 0.0 && (src as usize) < h * w);
            for c in 1..3 {
                prop_assert_eq!(a.rgb.data()[c * n + i], src);
            }
            for c in 0..3 {
                prop_assert_eq!(a.thermal.data()[c * n + i], src + 0.5);
            }
            prop_assert_eq!(a.labels.data[i] as usize, src as usize % 251);
        }
        // neighbours stay neighbours: the transform is a rigid crop plus optional mirror
        for y in 0..ch {
            for x in 1..cw {
                let d = a.rgb.data()[y * cw + x] - a.rgb.data()[y * cw + x - 1];
                prop_assert!(d == 1.0 || d == -1.0);
            }
        }
    }
}

// metrics

#[test]
fn confusion_update_hand_example() {
    let cm = cm_from(2, &[0, 0, 1, 1], &[0, 1, 1, 1]);
    assert_eq!(cm.counts, vec![1, 1, 0, 2]);
}

#[test]
fn perfect_prediction_grows_only_the_diagonal() {
    let gt = [0, 2, 1, 1, 2, 0, 2];
    let cm = cm_from(3, &gt, &gt);
    for g in 0..3 {
        for p in 0..3 {
            if g != p {
                assert_eq!(cm.get(g, p), 0);
            }
        }
    }
    assert_eq!(cm.total(), 7);
}

#[test]
fn fully_ignored_ground_truth_leaves_counts_unchanged() {
    let before = cm_from(2, &[0, 1], &[1, 1]);
    let after = cm_update(
        before.clone(),
        &labels(1, 3, &[0, 1, 0]),
        &labels(1, 3, &[255, 255, 255]),
    )
    .unwrap();
    assert_eq!(after, before);
}

#[test]
fn invalid_predictions_are_rejected() {
    for bad in [255u8, 2] {
        let err = cm_update(
            ConfusionMatrix::new(2),
            &labels(1, 2, &[0, bad]),
            &labels(1, 2, &[0, 1]),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidLabel { value, .. } if value == bad));
    }
    let err = cm_update(
        ConfusionMatrix::new(2),
        &labels(1, 2, &[0, 1]),
        &labels(2, 1, &[0, 1]),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Dimension { .. }));
}

#[test]
fn iou_hand_example() {
    let r = iou_from_cm(&cm_from(2, &[0, 0, 1, 1], &[0, 1, 1, 1])).unwrap();
    assert_eq!(r.per_class, vec![Some(0.5), Some(2.0 / 3.0)]);
    assert_eq!(r.miou, (0.5 + 2.0 / 3.0) / 2.0);
    assert!((r.miou - 0.5833).abs() < 1e-4);
}

#[test]
fn identity_confusion_has_unit_iou() {
    let r = iou_from_cm(&cm_from(3, &[0, 1, 2, 2], &[0, 1, 2, 2])).unwrap();
    assert_eq!(r.per_class, vec![Some(1.0); 3]);
    assert_eq!(r.miou, 1.0);
}

#[test]
fn absent_class_is_excluded_from_the_mean() {
    let r = iou_from_cm(&cm_from(3, &[0, 0, 1, 1], &[0, 1, 1, 1])).unwrap();
    assert_eq!(r.per_class[2], None);
    assert_eq!(r.miou, (0.5 + 2.0 / 3.0) / 2.0);
}

#[test]
fn empty_confusion_matrix_is_an_error() {
    assert!(matches!(
        iou_from_cm(&ConfusionMatrix::new(4)),
        Err(Error::EmptyMetrics(_))
    ));
}

#[test]
fn class_weight_examples() {
    let uniform = class_weights(&[0.1; 10]);
    assert!(uniform.iter().all(|&w| w == uniform[0]));
    // reference values evaluated independently in double precision
    assert!((uniform[0] - 8.823891297168379).abs() < 1e-12);
    let w = class_weights(&[0.0, 1.0]);
    assert!((w[0] - 50.4983497918439).abs() < 1e-10);
    assert!((w[1] - 1.4222778260019158).abs() < 1e-12);
}

#[test]
fn class_frequencies_skip_ignored_pixels() {
    let maps = [labels(1, 4, &[0, 0, 1, 255]), labels(1, 2, &[2, 255])];
    assert_eq!(class_frequencies(&maps, 3).unwrap(), vec![0.5, 0.25, 0.25]);
    assert!(class_frequencies(&[labels(1, 1, &[3])], 3).is_err());
    assert!(matches!(
        class_frequencies(&[labels(1, 1, &[255])], 3),
        Err(Error::EmptyMetrics(_))
    ));
}

#[test]
fn weighted_ce_at_uniform_logits_is_ln_k() {
    let mut rng = Rng::new(9);
    for k in [2usize, 6, 10] {
        let logits = Tensor::<f64>::from_fn(&[2, k, 4, 4], |_| 0.3);
        let lab: Vec<u8> = (0..32)
            .map(|i| {
                if i % 7 == 0 {
                    255
                } else {
                    rng.int_inclusive(0, k - 1) as u8
                }
            })
            .collect();
        let weights: Vec<f64> = (0..k).map(|_| rng.uniform_range(0.5, 3.0)).collect();
        let (loss, _) = weighted_cross_entropy(&logits, &lab, &weights).unwrap();
        assert!((loss - (k as f64).ln()).abs() < 1e-6, "K={k}: {loss}");
    }
}

proptest! {
    #[test]
    fn confusion_total_counts_scored_pixels(data in prop::collection::vec((0u8..4, prop_oneof![0u8..4, Just(255u8)]), 0..200)) {
        let (pred, gt): (Vec<u8>, Vec<u8>) = data.into_iter().unzip();
        let n = pred.len();
        let cm = cm_update(ConfusionMatrix::new(4), &labels(1, n, &pred), &labels(1, n, &gt)).unwrap();
        prop_assert_eq!(cm.total() as usize, gt.iter().filter(|&&g| g != 255).count());
        let mut merged = ConfusionMatrix::new(4);
        merged.merge(&cm).unwrap();
        merged.merge(&cm).unwrap();
        prop_assert_eq!(merged.total(), 2 * cm.total());
    }

    #[test]
    fn iou_lies_in_unit_interval(data in prop::collection::vec((0u8..3, 0u8..3), 1..100)) {
        let (pred, gt): (Vec<u8>, Vec<u8>) = data.into_iter().unzip();
        let r = iou_from_cm(&cm_from(3, &gt, &pred)).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.miou));
        prop_assert!(r.per_class.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }
}
