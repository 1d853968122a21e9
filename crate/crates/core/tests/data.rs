mod common;

use std::fs;
use std::path::Path;

use cact::data::*;
use common::*;

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for e in walk(dir) {
        out.push((e.strip_prefix(dir).unwrap().display().to_string(), fs::read(&e).unwrap()));
    }
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut v = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            v.extend(walk(&p));
        } else {
            v.push(p);
        }
    }
    v
}

#[test]
fn generation_is_byte_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate(&small_synthetic(5, 9), a.path()).unwrap();
    generate(&small_synthetic(5, 9), b.path()).unwrap();
    let fa = files(a.path());
    assert!(fa.len() > 40);
    assert_eq!(fa, files(b.path()));
    let c = tempfile::tempdir().unwrap();
    generate(&small_synthetic(5, 10), c.path()).unwrap();
    assert_ne!(fa, files(c.path()));
}

#[test]
fn default_dataset_is_ambiguous_per_patch_and_split_three_one_one() {
    let dir = tempfile::tempdir().unwrap();
    let report = generate(&SyntheticSpec::default(), dir.path()).unwrap();
    assert!(report.passes(), "{report:?}");
    let ds = Dataset::open(dir.path(), 56).unwrap();
    assert_eq!(ds.class_histogram(), [25; 4]);
    assert_eq!((ds.indices("train").len(), ds.indices("val").len(), ds.indices("test").len()), (60, 20, 20));
    let img = ds.load(0).unwrap();
    assert_eq!(img.pixels.shape(), &[1, 448, 448]);
    assert_eq!((img.mask.rows, img.mask.cols), (8, 8));
}

#[test]
fn per_class_counts_set_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    generate(&small_synthetic(10, 1), dir.path()).unwrap();
    let rows = read_manifest(dir.path()).unwrap();
    assert_eq!(rows.len(), 40);
    for name in CLASS_NAMES {
        assert_eq!(rows.iter().filter(|r| r.label == name).count(), 10);
    }
    assert!(dir.path().join("synthetic.json").exists());
}

#[test]
fn missing_images_are_reported_by_id() {
    let dir = tempfile::tempdir().unwrap();
    generate(&small_synthetic(5, 1), dir.path()).unwrap();
    let rows = read_manifest(dir.path()).unwrap();
    fs::remove_file(dir.path().join(&rows[3].path)).unwrap();
    match Dataset::open(dir.path(), 16) {
        Err(cact::Error::Validation(issues)) => {
            assert_eq!(issues.len(), 1);
            assert!(issues[0].starts_with(&rows[3].id), "{issues:?}");
        }
        other => panic!("expected a validation error, got {other:?}"),
    }
    assert!(validate(dir.path(), 32).unwrap().len() > 1, "mask grid must match the patch size");
}

#[test]
fn patches_are_labelled_by_their_mask_cell() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path(), 10, 2);
    let images = ds.load_all().unwrap();
    let all = derive_patch_dataset(&images, 16, None, 0).unwrap();
    assert_eq!(all.len(), 40 * 64);
    let cells: usize = images.iter().map(|i| i.mask.cells.iter().filter(|&&c| c == 2).count()).sum();
    assert_eq!(all.class_histogram(4)[2], cells);
    let capped = derive_patch_dataset(&images, 16, Some(100), 0).unwrap();
    assert_eq!(capped.class_histogram(4), vec![100; 4]);
    let generous = derive_patch_dataset(&images, 16, Some(100_000), 0).unwrap();
    assert_eq!(generous.len(), all.len());
}

#[test]
fn grade_dependent_brightness_breaks_the_ambiguity_gate() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        hyperchromasia: 0.8,
        ..small_synthetic(5, 1)
    };
    assert!(matches!(generate(&spec, dir.path()), Err(cact::Error::Generation(_))));
    assert!(!dir.path().join(MANIFEST).exists());
}

#[test]
fn folds_need_every_class_in_every_fold() {
    let labels: Vec<usize> = (0..139).map(|i| i % 3).collect();
    let folds = stratified_folds(&labels, 3).unwrap();
    for f in 0..3 {
        for c in 0..3 {
            assert!((0..139).any(|i| folds[i] == f && labels[i] == c));
        }
    }
    assert!(stratified_folds(&[0, 1, 1, 1], 2).is_err());
    assert!(stratified_folds(&labels, 1).is_err());
}
