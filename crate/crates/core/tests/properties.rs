use std::fs;
use std::path::Path;

use proptest::prelude::*;

use pointseg_core::data::{
    apply_augmentation, decode_pgm, encode_pgm, load_dataset, quantize_intensity, synth_generate, write_dataset,
    AugmentOp, Greymap, LabelMask, Sample, SynthSpec,
};
use pointseg_core::grid::{softmax, Grid, Image, LogitField};
use pointseg_core::invariance::check_instance;
use pointseg_core::losses::{ms_data_term, partial_cross_entropy, tv_term, Point, PointAnnotation};
use pointseg_core::metrics::{boundary_distances, dsc, hd95};
use pointseg_core::train::poly_lr;

fn mask_pair(max_side: usize) -> impl Strategy<Value = (LabelMask, LabelMask)> {
    (2..=max_side, 2..=max_side).prop_flat_map(|(h, w)| {
        (prop::collection::vec(0u8..3, h * w), prop::collection::vec(0u8..3, h * w))
            .prop_map(move |(a, b)| (LabelMask::new(h, w, a).unwrap(), LabelMask::new(h, w, b).unwrap()))
    })
}

fn square_mask_pair(max_side: usize) -> impl Strategy<Value = (LabelMask, LabelMask)> {
    (2..=max_side).prop_flat_map(|n| {
        (prop::collection::vec(0u8..3, n * n), prop::collection::vec(0u8..3, n * n))
            .prop_map(move |(a, b)| (LabelMask::new(n, n, a).unwrap(), LabelMask::new(n, n, b).unwrap()))
    })
}

fn transform(mask: &LabelMask, op: AugmentOp) -> LabelMask {
    let (h, w) = (mask.height(), mask.width());
    let (oh, ow) = op.output_dims(h, w);
    let mut out = LabelMask::filled(oh, ow, 0);
    for r in 0..h {
        for c in 0..w {
            let (tr, tc) = op.map_point(r, c, h, w);
            out.set(tr, tc, mask.get(r, c) as u8);
        }
    }
    out
}

fn ops() -> impl Strategy<Value = AugmentOp> {
    (any::<bool>(), 0u8..4).prop_map(|(flip, quarter_turns)| AugmentOp { flip, quarter_turns })
}

fn logits(classes: usize, h: usize, w: usize, scale: f64) -> impl Strategy<Value = LogitField> {
    prop::collection::vec(-scale..scale, classes * h * w)
        .prop_map(move |v| LogitField::new(Grid::from_vec(&[classes, h, w], v).unwrap()).unwrap())
}

fn file_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_on_the_simplex(field in (2usize..5, 1usize..9, 1usize..9).prop_flat_map(|(k, h, w)| logits(k, h, w, 1e4))) {
        let p = softmax(&field).unwrap();
        for r in 0..p.height() {
            for c in 0..p.width() {
                let total: f64 = (0..p.classes()).map(|k| p.prob(k, r, c)).sum();
                prop_assert!((total - 1.0).abs() <= 1e-9);
                for k in 0..p.classes() {
                    prop_assert!(p.prob(k, r, c) >= 0.0);
                }
            }
        }
    }

    #[test]
    fn losses_are_symmetric(seed in any::<u64>(), trial in 0u64..1000) {
        let d = check_instance(seed, trial).unwrap();
        prop_assert!(d.flip <= 1e-9, "{:?}", d);
        prop_assert!(d.intensity_shift <= 1e-9, "{:?}", d);
        prop_assert!(d.permutation <= 1e-9, "{:?}", d);
        prop_assert!(d.softmax_shift <= 1e-12, "{:?}", d);
    }

    #[test]
    fn losses_are_nonnegative_and_pce_is_local(
        field in (2usize..4, 2usize..7, 2usize..7).prop_flat_map(|(k, h, w)| logits(k, h, w, 3.0)),
        pixels in prop::collection::vec(any::<f64>(), 64),
        picks in prop::collection::vec(any::<prop::sample::Index>(), 3),
    ) {
        let (k, h, w) = (field.classes(), field.height(), field.width());
        let image = Image::new(h, w, pixels[..h * w].iter().map(|v| v.abs().fract()).collect()).unwrap();
        let mut taken = Vec::new();
        let mut points = Vec::new();
        for (class, pick) in picks.iter().enumerate().take(k) {
            let i = pick.index(h * w);
            if !taken.contains(&i) {
                taken.push(i);
                points.push(Point { row: i / w, col: i % w, class });
            }
        }
        let ann = PointAnnotation::new(k, points).unwrap();
        let p = softmax(&field).unwrap();
        let pce = partial_cross_entropy(&p, &ann).unwrap();
        prop_assert!(pce.value >= 0.0);
        for class in 0..k {
            for r in 0..h {
                for c in 0..w {
                    if !taken.contains(&(r * w + c)) {
                        prop_assert_eq!(pce.grad.get(&[class, r, c]), 0.0);
                    }
                }
            }
        }
        prop_assert!(ms_data_term(&image, &p, false).unwrap().value >= 0.0);
        prop_assert!(tv_term(&p).value >= 0.0);
    }

    #[test]
    fn dsc_is_symmetric((a, b) in mask_pair(12), k in 0usize..3) {
        prop_assert_eq!(dsc(&a, &b, k), dsc(&b, &a, k));
    }

    #[test]
    fn metrics_are_invariant_under_symmetries((a, b) in square_mask_pair(12), op in ops(), k in 1usize..3) {
        let (ta, tb) = (transform(&a, op), transform(&b, op));
        prop_assert!((dsc(&a, &b, k) - dsc(&ta, &tb, k)).abs() <= 1e-12);
        prop_assert!((hd95(&a, &b, k) - hd95(&ta, &tb, k)).abs() <= 1e-9);
    }

    #[test]
    fn hd95_is_at_most_the_hausdorff_distance((a, b) in mask_pair(12), k in 1usize..3) {
        if let Some(d) = boundary_distances(&a, &b, k) {
            let full = d.iter().cloned().fold(0.0, f64::max);
            prop_assert!(hd95(&a, &b, k) <= full + 1e-12);
        }
    }

    #[test]
    fn augmentation_keeps_points_on_their_class(
        mask in (2usize..10, 2usize..10).prop_flat_map(|(h, w)| prop::collection::vec(0u8..3, h * w).prop_map(move |l| LabelMask::new(h, w, l).unwrap())),
        op in ops(),
        seed in any::<u64>(),
    ) {
        let (h, w) = (mask.height(), mask.width());
        let base = Sample {
            id: "s".into(),
            image: Image::new(h, w, (0..h * w).map(|i| i as f64 / (h * w) as f64).collect()).unwrap(),
            mask: Some(mask),
            annotation: None,
        };
        let ann = pointseg_core::data::annotate_sample(&base, 3, seed).unwrap();
        let sample = Sample { annotation: Some(ann), ..base };
        let out = apply_augmentation(&sample, op).unwrap();
        let mask = out.mask.as_ref().unwrap();
        for p in out.annotation.as_ref().unwrap().points() {
            prop_assert_eq!(mask.get(p.row, p.col), p.class);
        }
    }

    #[test]
    fn pgm_round_trips(h in 1usize..20, w in 1usize..20, maxval in 1u16..=65535, raw in prop::collection::vec(any::<u16>(), 400)) {
        let samples = raw[..h * w].iter().map(|&s| (u32::from(s) % (u32::from(maxval) + 1)) as u16).collect();
        let map = Greymap { width: w, height: h, maxval, samples };
        prop_assert_eq!(decode_pgm(&encode_pgm(&map)).unwrap(), map);
    }

    #[test]
    fn poly_lr_decreases(lr0 in 1e-4f64..1.0, total in 1u64..500, t in 0u64..500) {
        let t = t % total;
        prop_assert!(poly_lr(lr0, t + 1, total, 0.9) <= poly_lr(lr0, t, total, 0.9));
        prop_assert!(poly_lr(lr0, t, total, 0.9) <= lr0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn dataset_round_trips(
        h in 2usize..8,
        w in 2usize..8,
        values in prop::collection::vec(0.0f64..=1.0, 2 * 64),
        labels in prop::collection::vec(0u8..3, 2 * 64),
        seed in any::<u64>(),
    ) {
        let plane = h * w;
        let samples: Vec<Sample> = (0..2)
            .map(|n| {
                let base = Sample {
                    id: format!("img_{n}"),
                    image: Image::new(h, w, values[n * 64..n * 64 + plane].iter().map(|&v| quantize_intensity(v)).collect()).unwrap(),
                    mask: Some(LabelMask::new(h, w, labels[n * 64..n * 64 + plane].to_vec()).unwrap()),
                    annotation: None,
                };
                let ann = pointseg_core::data::annotate_sample(&base, 3, seed).unwrap();
                Sample { annotation: Some(ann), ..base }
            })
            .collect();
        let manifest = pointseg_core::data::DatasetManifest {
            classes: 3,
            height: h,
            width: w,
            train: vec!["img_0".into()],
            test: vec!["img_1".into()],
        };
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &manifest, &samples).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        prop_assert_eq!(loaded.manifest, Some(manifest));
        prop_assert_eq!(loaded.samples, samples);
    }

    #[test]
    fn generator_output_is_byte_identical(seed in any::<u64>(), sigma in 0.0f64..0.1) {
        let spec = SynthSpec { height: 16, width: 16, train: 2, test: 1, seed, sigma, ..Default::default() };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for dir in [&a, &b] {
            let out = synth_generate(&spec).unwrap();
            write_dataset(dir.path(), &out.manifest, &out.all_samples()).unwrap();
        }
        prop_assert_eq!(file_bytes(a.path()), file_bytes(b.path()));
    }
}
