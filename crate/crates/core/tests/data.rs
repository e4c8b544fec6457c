mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use common::{least_squares, linear_score};
use proberlab::data::*;
use proberlab::Error;

/// Hand-assembled IDX pair, independent of the library's writer.
fn idx_pair(dir: &Path, rows: u32, cols: u32, images: &[Vec<u8>], labels: &[u8]) -> (PathBuf, PathBuf) {
    let mut img = Vec::new();
    for v in [0x0803u32, images.len() as u32, rows, cols] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    for px in images {
        img.extend_from_slice(px);
    }
    let mut lab = Vec::new();
    for v in [0x0801u32, labels.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(labels);
    let (i, l) = (dir.join("images.idx"), dir.join("labels.idx"));
    fs::write(&i, img).unwrap();
    fs::write(&l, lab).unwrap();
    (i, l)
}

#[test]
fn single_zero_image() {
    let dir = tempfile::tempdir().unwrap();
    let (i, l) = idx_pair(dir.path(), 2, 2, &[vec![0; 4]], &[7]);
    let set = load_idx(&i, &l).unwrap();
    assert_eq!(set.len(), 1);
    assert_eq!(set.shape, ImageShape::new(2, 2, 1));
    assert_eq!(set.samples[0].image, vec![0.0f32; 4]);
    assert_eq!(set.samples[0].label, 7);
}

#[test]
fn pixels_and_labels_match_the_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let images = vec![vec![0, 1, 2, 3, 4, 5], vec![255, 128, 64, 32, 16, 8], vec![9, 99, 199, 254, 100, 50]];
    let (i, l) = idx_pair(dir.path(), 2, 3, &images, &[3, 0, 9]);
    let raw = fs::read(&i).unwrap();
    let set = load_idx(&i, &l).unwrap();
    assert_eq!((set.shape.height, set.shape.width), (2, 3));
    assert_eq!(set.labels(), vec![3, 0, 9]);
    for (n, s) in set.samples.iter().enumerate() {
        for (k, &p) in s.image.iter().enumerate() {
            // Pixel k of image n sits at byte 16 + 6n + k.
            assert_eq!((p * 255.0).round() as u8, raw[16 + 6 * n + k]);
            assert_eq!(p, raw[16 + 6 * n + k] as f32 / 255.0);
        }
    }
    // Writing the set back reproduces the original files byte for byte.
    let (i2, l2) = (dir.path().join("again.idx"), dir.path().join("again-labels.idx"));
    save_idx(&set, &i2, &l2).unwrap();
    assert_eq!(fs::read(&i2).unwrap(), raw);
    assert_eq!(fs::read(&l2).unwrap(), fs::read(&l).unwrap());
}

#[test]
fn malformed_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (i, l) = idx_pair(dir.path(), 2, 2, &[vec![1; 4], vec![2; 4]], &[1, 2]);
    // Labels file given as images.
    assert!(matches!(load_idx(&l, &l), Err(Error::BadMagic { .. })));
    let mut short = fs::read(&i).unwrap();
    short.pop();
    fs::write(&i, &short).unwrap();
    assert!(matches!(load_idx(&i, &l), Err(Error::Truncated { .. })));
    let (i, l) = idx_pair(dir.path(), 2, 2, &[vec![1; 4]], &[1, 2]);
    assert!(matches!(load_idx(&i, &l), Err(Error::CountMismatch { images: 1, labels: 2 })));
    assert!(load_idx(dir.path().join("absent"), &l).is_err());
}

#[test]
fn synthetic_blobs_are_linearly_separable() {
    let set = make_synthetic(100, 2, ImageShape::new(4, 4, 1), 1).unwrap();
    assert_eq!(set.len(), 200);
    assert_eq!(set.labels().iter().filter(|&&y| y == 1).count(), 100);
    let x: Vec<Vec<f64>> = (0..set.len()).map(|i| set.input(i)).collect();
    let y: Vec<f64> = set.labels().iter().map(|&c| if c == 1 { 1.0 } else { -1.0 }).collect();
    let beta = least_squares(&x, &y);
    let correct = x.iter().zip(&y).filter(|(r, &t)| (linear_score(&beta, r) > 0.0) == (t > 0.0)).count();
    assert!(correct as f64 / 200.0 >= 0.95, "{correct} of 200");
    assert!(set.samples.iter().all(|s| s.image.iter().all(|p| (0.0..=1.0).contains(p))));
    assert_eq!(make_synthetic(100, 2, ImageShape::new(4, 4, 1), 1).unwrap(), set);
    assert_ne!(make_synthetic(100, 2, ImageShape::new(4, 4, 1), 2).unwrap(), set);
    assert!(matches!(
        make_synthetic(0, 2, ImageShape::new(4, 4, 1), 1),
        Err(Error::InvalidConfig(_))
    ));
}

#[test]
fn synthetic_sets_survive_a_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let set = make_synthetic(5, 3, ImageShape::new(3, 2, 1), 4).unwrap();
    let (i, l) = (dir.path().join("a/img"), dir.path().join("a/lab"));
    save_idx(&set, &i, &l).unwrap();
    let back = load_idx(&i, &l).unwrap();
    assert_eq!(back.labels(), set.labels());
    for (a, b) in set.samples.iter().zip(&back.samples) {
        for (p, q) in a.image.iter().zip(&b.image) {
            // IDX keeps one byte per pixel.
            assert!((p - q).abs() <= 0.5 / 255.0 + 1e-7);
        }
    }
    let colour = make_synthetic(2, 2, ImageShape::new(2, 2, 3), 1).unwrap();
    assert!(matches!(save_idx(&colour, &i, &l), Err(Error::InvalidConfig(_))));
}

fn ids(set: &ImageSet, all: &ImageSet) -> Vec<usize> {
    set.samples
        .iter()
        .map(|s| all.samples.iter().position(|t| t == s).unwrap())
        .collect()
}

#[test]
fn splits_partition_the_set() {
    let all = make_synthetic(25, 4, ImageShape::new(3, 3, 1), 8).unwrap();
    let whole = split(&all, &[1.0], 3).unwrap();
    assert_eq!(whole.len(), 1);
    assert_eq!(whole[0].samples, all.samples);

    let parts = split(&all, &[0.8, 0.2], 3).unwrap();
    assert_eq!((parts[0].len(), parts[1].len()), (80, 20));
    let (a, b) = (ids(&parts[0], &all), ids(&parts[1], &all));
    let union: BTreeSet<usize> = a.iter().chain(&b).copied().collect();
    assert_eq!(union.len(), 100);
    // Order inside a part follows the source.
    assert!(a.windows(2).all(|w| w[0] < w[1]));

    assert_eq!(split(&all, &[0.8, 0.2], 3).unwrap(), parts);
    assert_ne!(ids(&split(&all, &[0.8, 0.2], 4).unwrap()[1], &all), b);
    assert!(matches!(split(&all, &[0.7, 0.7], 3), Err(Error::InvalidConfig(_))));
    assert!(matches!(split(&all, &[], 3), Err(Error::InvalidConfig(_))));
    let idx = split_indices(10, &[0.5, 0.3], 0).unwrap();
    assert_eq!((idx[0].len(), idx[1].len()), (5, 3));
}

#[test]
fn mnist_files_load_when_present() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let images = dir.join("train-images-idx3-ubyte.gz");
    if !images.is_file() {
        eprintln!("skipped: no MNIST files in {}", dir.display());
        return;
    }
    let train = load_idx(&images, dir.join("train-labels-idx1-ubyte.gz")).unwrap();
    assert_eq!(train.len(), 60_000);
    assert_eq!(train.shape, ImageShape::new(28, 28, 1));
    assert_eq!(train.class_count, 10);
    let test = load_idx(dir.join("t10k-images-idx3-ubyte.gz"), dir.join("t10k-labels-idx1-ubyte.gz")).unwrap();
    assert_eq!(test.len(), 10_000);
    let mut counts = [0usize; 10];
    for y in test.labels() {
        counts[y] += 1;
    }
    assert!(counts.iter().all(|&c| c > 800));
}
