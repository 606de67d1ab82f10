use mshvit_core::ingest::{foreground_mask, load_manifest};
use mshvit_core::synth::{synth_dataset, synth_slide, DatasetSpec};
use mshvit_core::{CoreError, NUM_CLASSES};
use proptest::prelude::*;

#[test]
fn nfd_slides_carry_no_lesion_labels() {
    for seed in 0..6 {
        let s = synth_slide(0, seed, 256).unwrap();
        assert!(s.annotation.pixels().all(|p| p.0[0] == 0), "seed {seed}");
        assert_eq!(s.slide_label, 0);
    }
}

#[test]
fn deterministic_rasters() {
    let a = synth_slide(2, 11, 384).unwrap();
    let b = synth_slide(2, 11, 384).unwrap();
    assert_eq!(a.image.as_raw(), b.image.as_raw());
    assert_eq!(a.annotation.as_raw(), b.annotation.as_raw());
    let c = synth_slide(2, 12, 384).unwrap();
    assert_ne!(a.image.as_raw(), c.image.as_raw());
}

#[test]
fn undiff_ca_foreground_fraction() {
    let s = synth_slide(3, 7, 1024).unwrap();
    let f = foreground_mask(&s.image).fraction();
    assert!((0.2..=0.8).contains(&f), "foreground fraction {f}");
}

#[test]
fn extent_below_one_stack_rejected() {
    assert!(matches!(synth_slide(1, 0, 255), Err(CoreError::Geometry(_))));
    assert!(synth_slide(5, 0, 256).is_err());
}

fn histogram_of(dir: &std::path::Path) -> [usize; NUM_CLASSES] {
    load_manifest(&dir.join("manifest.jsonl")).unwrap().class_histogram()
}

#[test]
fn dataset_counts() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_dataset(&DatasetSpec::new([2; 5], 256), 1, dir.path()).unwrap();
    assert_eq!(m.records.len(), 10);
    assert_eq!(histogram_of(dir.path()), [2; 5]);
    assert!(m.records.iter().all(|r| r.slide_path.exists() && r.annotation_path.exists()));
}

#[test]
fn empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_dataset(&DatasetSpec::new([0; 5], 256), 1, dir.path()).unwrap();
    assert!(m.records.is_empty());
    assert!(load_manifest(&dir.path().join("manifest.jsonl")).unwrap().records.is_empty());
}

#[test]
fn scaled_reference_distribution() {
    // Slide counts per class of a reference training set, reduced 50-fold.
    let reference = [263.0, 160.0, 175.0, 180.0, 68.0f64];
    let counts = reference.map(|c: f64| (c / 50.0).round() as usize);
    assert_eq!(counts, [5, 3, 4, 4, 1]);
    let dir = tempfile::tempdir().unwrap();
    synth_dataset(&DatasetSpec::new(counts, 256), 3, dir.path()).unwrap();
    assert_eq!(histogram_of(dir.path()), counts);
}

#[test]
fn dataset_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = DatasetSpec::new([1, 1, 0, 1, 0], 256);
    synth_dataset(&spec, 9, a.path()).unwrap();
    synth_dataset(&spec, 9, b.path()).unwrap();
    for name in ["manifest.jsonl", "slide_0000.png", "slide_0001_ann.png", "slide_0002.png"] {
        assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap(), "{name}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn label_is_dominant_lesion_class(class in 0usize..5, seed in any::<u64>()) {
        let s = synth_slide(class, seed, 256).unwrap();
        let mut hist = [0usize; NUM_CLASSES];
        for p in s.annotation.pixels() {
            hist[p.0[0] as usize] += 1;
        }
        let dominant = (1..NUM_CLASSES).filter(|&c| hist[c] > 0).max_by_key(|&c| (hist[c], std::cmp::Reverse(c)));
        prop_assert_eq!(s.slide_label, dominant.unwrap_or(0));
        prop_assert_eq!(s.image.dimensions(), s.annotation.dimensions());
        // Lesion labels only on painted tissue.
        let mask = foreground_mask(&s.image);
        let (w, _) = s.image.dimensions();
        for (i, p) in s.annotation.pixels().enumerate() {
            if p.0[0] != 0 {
                prop_assert!(mask.get(i % w as usize, i / w as usize));
            }
        }
    }
}
