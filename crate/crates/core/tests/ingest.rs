use image::{GrayImage, Luma, Rgb, RgbImage};
use mshvit_core::geometry::GeometryConfig;
use mshvit_core::ingest::*;
use mshvit_core::synth::{synth_slide_with, SynthConfig};
use mshvit_core::CoreError;
use proptest::prelude::*;

const PINK: Rgb<u8> = Rgb([220, 150, 200]);
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);

/// Small geometry: 32 px stacks of 2×2 patches.
fn small_geometry() -> GeometryConfig {
    GeometryConfig {
        stack_px: 32,
        grid: 2,
        slide_grid: 6,
        ..GeometryConfig::toy()
    }
}

#[test]
fn foreground_rule_examples() {
    assert_eq!(foreground_mask(&RgbImage::from_pixel(40, 30, WHITE)).count(), 0);
    assert_eq!(foreground_mask(&RgbImage::from_pixel(40, 30, PINK)).fraction(), 1.0);
    let half = RgbImage::from_fn(101, 64, |x, _| if x < 50 { WHITE } else { PINK });
    let oracle = (0..101).filter(|&x| x >= 50).count() as f64 / 101.0;
    let f = foreground_mask(&half).fraction();
    assert!((f - 0.5).abs() <= 0.01, "{f}");
    assert_eq!(f, oracle);
}

#[test]
fn all_white_slide_gives_no_stacks() {
    let g = GeometryConfig::toy();
    let slide = RgbImage::from_pixel(768, 512, WHITE);
    let stacks = tile_slide(&slide, &GrayImage::new(768, 512), &g).unwrap();
    assert!(stacks.is_empty());
}

#[test]
fn single_full_stack() {
    let g = GeometryConfig::toy();
    let slide = RgbImage::from_pixel(256, 256, PINK);
    let ann = GrayImage::from_fn(256, 256, |x, _| Luma([if x < 128 { 2 } else { 0 }]));
    let stacks = tile_slide(&slide, &ann, &g).unwrap();
    assert_eq!(stacks.len(), 1);
    let s = &stacks[0];
    assert_eq!(s.origin, (0, 0));
    assert_eq!(s.foreground_fraction, 1.0);
    assert_eq!(s.pixels.dimensions(), (256, 256));
    // left half of every patch row is class 2, background counts as NFD
    let expect: Vec<u8> = (0..64).map(|i| if i % 8 < 4 { 2 } else { 0 }).collect();
    assert_eq!(s.labels, expect);
    assert!(s.patch_foreground.iter().all(|&f| f == 1.0));
}

#[test]
fn slide_smaller_than_stack_is_a_geometry_error() {
    let g = GeometryConfig::toy();
    let r = tile_slide(&RgbImage::new(255, 400), &GrayImage::new(255, 400), &g);
    assert!(matches!(r, Err(CoreError::Geometry(_))));
}

/// 10×15 windows of 32 px, window i painted to a distinct-ish foreground share ≥ 0.3.
fn graded_slide() -> (RgbImage, Vec<((usize, usize), f64)>) {
    let (rows, cols, s) = (10usize, 15usize, 32usize);
    let mut img = RgbImage::from_pixel((cols * s) as u32, (rows * s) as u32, WHITE);
    let mut painted = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            // 10..=32 painted rows; repeats give ties at equal shares
            let n = 10 + (i * 37) % 23;
            for y in 0..n {
                for x in 0..s {
                    img.put_pixel((c * s + x) as u32, (r * s + y) as u32, PINK);
                }
            }
            painted.push(((r * s, c * s), n as f64 / s as f64));
        }
    }
    (img, painted)
}

#[test]
fn keeps_exactly_max_stacks_by_foreground() {
    let g = small_geometry();
    let (img, painted) = graded_slide();
    assert_eq!(candidate_windows(img.width() as usize, img.height() as usize, &g).len(), 150);
    let ann = GrayImage::new(img.width(), img.height());
    let stacks = tile_slide(&img, &ann, &g).unwrap();
    assert_eq!(stacks.len(), 100);

    // oracle: stable sort by share descending over row-major windows
    let mut order = painted.clone();
    order.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let hundredth = order[99].1;
    let mut expected: Vec<(usize, usize)> = order[..100].iter().map(|w| (w.0 .0 / 16, w.0 .1 / 16)).collect();
    expected.sort();
    let got: Vec<(usize, usize)> = stacks.iter().map(|s| s.origin).collect();
    assert_eq!(got, expected);
    for s in &stacks {
        assert!(s.foreground_fraction >= hundredth && s.foreground_fraction >= 0.3);
    }
}

#[test]
fn overlap_moves_the_stride() {
    let g = GeometryConfig {
        overlap_px: 16,
        ..small_geometry()
    };
    let w = candidate_windows(64, 32, &g);
    assert_eq!(w, vec![(0, 0), (0, 16), (0, 32)]);
}

#[test]
fn stain_fixed_point() {
    let s = synth_slide_with(&SynthConfig::default(), 1, 5, 256).unwrap();
    let own = lab_stats(&s.image, None).unwrap();
    let out = stain_normalize(&s.image, &own).unwrap();
    let worst = s
        .image
        .as_raw()
        .iter()
        .zip(out.as_raw())
        .map(|(&a, &b)| (a as i32 - b as i32).abs())
        .max()
        .unwrap();
    assert!(worst <= 1, "max deviation {worst}");
}

#[test]
fn constant_image_maps_to_reference_mean() {
    let reference = LabStats::reference();
    let out = stain_normalize(&RgbImage::from_pixel(16, 16, Rgb([120, 80, 160])), &reference).unwrap();
    let target = lab_to_rgb(reference.mean);
    assert!(out.pixels().all(|p| p.0 == target));
}

fn channel_means(img: &RgbImage, mask: &Mask) -> [f64; 3] {
    let mut sum = [0.0; 3];
    let (w, _) = img.dimensions();
    for (i, p) in img.pixels().enumerate() {
        if mask.get(i % w as usize, i / w as usize) {
            for c in 0..3 {
                sum[c] += p.0[c] as f64;
            }
        }
    }
    sum.map(|v| v / mask.count() as f64)
}

#[test]
fn tinted_copies_agree_after_normalization() {
    let cfg = SynthConfig {
        tint: 0.0,
        ..SynthConfig::default()
    };
    let base = synth_slide_with(&cfg, 2, 21, 512).unwrap().image;
    let mask = foreground_mask(&base);
    let tinted = |t: [f64; 3]| {
        RgbImage::from_fn(base.width(), base.height(), |x, y| {
            let p = base.get_pixel(x, y).0;
            if !mask.get(x as usize, y as usize) {
                return Rgb(p);
            }
            Rgb([0, 1, 2].map(|c| (255.0 - (255.0 - p[c] as f64) * t[c]).round().clamp(0.0, 255.0) as u8))
        })
    };
    let reference = LabStats::reference();
    let a = stain_normalize_masked(&tinted([1.06, 0.95, 1.0]), &mask, &reference).unwrap();
    let b = stain_normalize_masked(&tinted([0.94, 1.05, 1.03]), &mask, &reference).unwrap();
    let (ma, mb) = (channel_means(&a, &mask), channel_means(&b, &mask));
    for c in 0..3 {
        assert!((ma[c] - mb[c]).abs() <= 2.0, "channel {c}: {} vs {}", ma[c], mb[c]);
    }
}

#[test]
fn zero_reference_std_rejected() {
    let mut r = LabStats::reference();
    r.std[1] = 0.0;
    assert!(stain_normalize(&RgbImage::new(4, 4), &r).is_err());
}

fn patterned_stack(seed: u32) -> PatchStack {
    let side = 64u32;
    let pixels = RgbImage::from_fn(side, side, |x, y| Rgb([(x * 4 + seed) as u8, (y * 4) as u8, ((x ^ y) * 3) as u8]));
    PatchStack {
        pixels,
        origin: (3, 5),
        labels: (0..16).map(|i| (i % 5) as u8).collect(),
        patch_foreground: (0..16).map(|i| i as f32 / 16.0).collect(),
        foreground_fraction: 0.5,
    }
}

#[test]
fn zero_probability_policy_is_identity() {
    let st = patterned_stack(0);
    for seed in 0..8 {
        let out = augment(&st, seed, &AugmentPolicy::identity()).unwrap();
        assert_eq!(out, st);
    }
}

#[test]
fn half_turn_twice_is_identity() {
    let st = patterned_stack(3);
    let g = GeometricDraw {
        k: 2,
        ..GeometricDraw::IDENTITY
    };
    let twice = apply_geometric(&apply_geometric(&st, &g), &g);
    assert_eq!(twice, st);
    // a quarter turn alone is not
    let q = GeometricDraw {
        k: 1,
        ..GeometricDraw::IDENTITY
    };
    assert_ne!(apply_geometric(&st, &q).pixels, st.pixels);
}

#[test]
fn augmentation_reruns_bit_identically() {
    let st = patterned_stack(1);
    let p = AugmentPolicy::default();
    for seed in [0u64, 1, 99, u64::MAX] {
        assert_eq!(augment(&st, seed, &p).unwrap(), augment(&st, seed, &p).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Labels painted into the pixels move exactly with the label grid.
    #[test]
    fn geometric_transforms_commute_with_labels(k in 0u8..4, h in any::<bool>(), v in any::<bool>(), scale in 0.9f64..1.1) {
        let grid = 4usize;
        let p = 16u32;
        let labels: Vec<u8> = (0..16).map(|i| ((i * 7) % 5) as u8).collect();
        let code = |l: u8| Rgb([l * 40, 0, 255 - l * 40]);
        let pixels = RgbImage::from_fn(p * 4, p * 4, |x, y| code(labels[(y / p) as usize * grid + (x / p) as usize]));
        let st = PatchStack { pixels, origin: (0, 0), labels, patch_foreground: vec![1.0; 16], foreground_fraction: 1.0 };
        let out = apply_geometric(&st, &GeometricDraw { k, hflip: h, vflip: v, scale });
        for r in 0..grid {
            for c in 0..grid {
                let center = out.pixels.get_pixel(c as u32 * p + p / 2, r as u32 * p + p / 2);
                let l = out.labels[r * grid + c];
                if out.patch_foreground[r * grid + c] > 0.0 {
                    prop_assert_eq!(*center, code(l));
                } else {
                    prop_assert_eq!(l, 0);
                }
            }
        }
    }

    #[test]
    fn stacks_meet_foreground_floor(seed in 0u64..1000, class in 0usize..5) {
        let s = synth_slide_with(&SynthConfig::default(), class, seed, 512).unwrap();
        let g = GeometryConfig::toy();
        let a = tile_slide(&s.image, &s.annotation, &g).unwrap();
        let b = tile_slide(&s.image, &s.annotation, &g).unwrap();
        prop_assert_eq!(&a, &b);
        for st in &a {
            prop_assert!(st.foreground_fraction >= g.min_foreground_fraction);
            prop_assert_eq!(st.labels.len(), g.patches_per_stack());
        }
    }
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut records = Vec::new();
    for (i, split) in [Split::Train, Split::Val, Split::Test].into_iter().enumerate() {
        let slide = dir.path().join(format!("s{i}.png"));
        let ann = dir.path().join(format!("s{i}_ann.png"));
        std::fs::write(&slide, b"x").unwrap();
        std::fs::write(&ann, b"x").unwrap();
        records.push(ManifestRecord {
            slide_path: slide,
            annotation_path: ann,
            slide_label: i + 2,
            split,
            mpp: 0.485 * (i + 1) as f64,
        });
    }
    let path = dir.path().join("m.jsonl");
    write_manifest(&records, &path).unwrap();
    assert_eq!(load_manifest(&path).unwrap().records, records);
    let bytes = std::fs::read(&path).unwrap();
    write_manifest(&load_manifest(&path).unwrap().records, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}

#[test]
fn empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    write_manifest(&[], &path).unwrap();
    assert!(load_manifest(&path).unwrap().records.is_empty());
}

#[test]
fn unknown_class_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    for n in ["a.png", "b.png"] {
        std::fs::write(dir.path().join(n), b"x").unwrap();
    }
    let good = r#"{"slide_path":"a.png","annotation_path":"b.png","slide_label":1,"split":"train","mpp":0.485}"#;
    let bad = good.replace("\"slide_label\":1", "\"slide_label\":7");
    let path = dir.path().join("m.jsonl");
    std::fs::write(&path, format!("{good}\n{good}\n{bad}\n")).unwrap();
    match load_manifest(&path) {
        Err(CoreError::Parse { line, message, .. }) => {
            assert_eq!(line, 3);
            assert!(message.contains('7'), "{message}");
        }
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn missing_slide_file_fails() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    std::fs::write(&path, r#"{"slide_path":"gone.png","annotation_path":"gone2.png","slide_label":0,"split":"test","mpp":0.485}"#).unwrap();
    assert!(load_manifest(&path).is_err());
    assert!(load_manifest(&dir.path().join("absent.jsonl")).is_err());
}
