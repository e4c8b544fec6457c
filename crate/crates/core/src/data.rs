//! Image datasets: IDX ingestion, synthetic fixtures and seeded splits.
//!
//! Pixels are kept as `f32` in `[0, 1]`, stored height-major with the channel
//! innermost (H×W×C). Models consume channel-first flattened `f64` rows, built
//! with [`ImageSet::batch`].

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeded_rng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub const fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for ImageShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    /// H×W×C pixels in `[0, 1]`.
    pub image: Vec<f32>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub name: String,
    pub class_count: usize,
    pub shape: ImageShape,
    pub samples: Vec<LabeledSample>,
}

impl ImageSet {
    pub fn new(
        name: impl Into<String>,
        class_count: usize,
        shape: ImageShape,
        samples: Vec<LabeledSample>,
    ) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.image.len() != shape.len() {
                return Err(Error::shape(
                    format!("{} pixels", shape.len()),
                    format!("{} pixels in sample {i}", s.image.len()),
                ));
            }
            if s.label >= class_count {
                return Err(Error::InvalidConfig(format!(
                    "label {} of sample {i} is outside [0, {class_count})",
                    s.label
                )));
            }
            if s.image.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Domain(format!("sample {i} has pixels outside [0, 1]")));
            }
        }
        Ok(Self {
            name: name.into(),
            class_count,
            shape,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Sample `index` as a channel-first flattened row.
    pub fn input(&self, index: usize) -> Vec<f64> {
        hwc_to_chw(&self.samples[index].image, self.shape)
    }

    /// Channel-first rows for the given sample indices, one row per sample.
    pub fn batch(&self, indices: &[usize]) -> Array2<f64> {
        let d = self.shape.len();
        let mut out = Array2::zeros((indices.len(), d));
        for (row, &i) in out.rows_mut().into_iter().zip(indices) {
            let chw = hwc_to_chw(&self.samples[i].image, self.shape);
            for (dst, src) in row.into_iter().zip(chw) {
                *dst = src;
            }
        }
        out
    }

    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> ImageSet {
        ImageSet {
            name: name.into(),
            class_count: self.class_count,
            shape: self.shape,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// First `n` samples (or all of them when `n` exceeds the length).
    pub fn take(&self, n: usize) -> ImageSet {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, self.name.clone())
    }
}

pub fn hwc_to_chw(image: &[f32], shape: ImageShape) -> Vec<f64> {
    let (h, w, c) = (shape.height, shape.width, shape.channels);
    if c == 1 {
        return image.iter().map(|&p| p as f64).collect();
    }
    let mut out = vec![0.0; image.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[ch * h * w + y * w + x] = image[(y * w + x) * c + ch] as f64;
            }
        }
    }
    out
}

pub fn chw_to_hwc(row: &[f64], shape: ImageShape) -> Vec<f32> {
    let (h, w, c) = (shape.height, shape.width, shape.channels);
    let mut out = vec![0.0f32; row.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(y * w + x) * c + ch] = row[ch * h * w + y * w + x] as f32;
            }
        }
    }
    out
}

/// Reads a whole file, transparently inflating gzip (sniffed by the `1f 8b` header).
fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let chunk = bytes.get(offset..offset + 4).ok_or_else(|| Error::Truncated {
        path: path.to_path_buf(),
        declared: offset + 4,
        actual: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(chunk.try_into().expect("4-byte slice")))
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Loads an IDX image/label file pair. Bytes are scaled to `[0, 1]` by `/255`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<ImageSet> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let img = read_maybe_gzip(images_path)?;
    let lab = read_maybe_gzip(labels_path)?;

    check_magic(&img, IDX_IMAGES_MAGIC, images_path)?;
    check_magic(&lab, IDX_LABELS_MAGIC, labels_path)?;

    let n_images = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let n_labels = be_u32(&lab, 4, labels_path)? as usize;
    if n_images != n_labels {
        return Err(Error::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }

    let pixels = rows * cols;
    let declared = 16 + n_images * pixels;
    if img.len() < declared {
        return Err(Error::Truncated {
            path: images_path.to_path_buf(),
            declared,
            actual: img.len(),
        });
    }
    if lab.len() < 8 + n_labels {
        return Err(Error::Truncated {
            path: labels_path.to_path_buf(),
            declared: 8 + n_labels,
            actual: lab.len(),
        });
    }

    let labels = &lab[8..8 + n_labels];
    let class_count = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    let samples = img[16..declared]
        .chunks_exact(pixels.max(1))
        .take(n_images)
        .zip(labels)
        .map(|(px, &label)| LabeledSample {
            image: px.iter().map(|&b| b as f32 / 255.0).collect(),
            label: label as usize,
        })
        .collect();

    let name = images_path
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("idx")
        .trim_end_matches(".gz")
        .to_string();
    Ok(ImageSet {
        name,
        class_count,
        shape: ImageShape::new(rows, cols, 1),
        samples,
    })
}

/// Writes an uncompressed IDX pair. Only single-channel sets fit the 3-D image layout.
pub fn save_idx(
    set: &ImageSet,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    if set.shape.channels != 1 {
        return Err(Error::InvalidConfig(format!(
            "IDX image files hold one channel, set has {}",
            set.shape.channels
        )));
    }
    let n = set.len() as u32;
    let mut img = Vec::with_capacity(16 + set.len() * set.shape.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&n.to_be_bytes());
    img.extend_from_slice(&(set.shape.height as u32).to_be_bytes());
    img.extend_from_slice(&(set.shape.width as u32).to_be_bytes());
    for s in &set.samples {
        img.extend(s.image.iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    let mut lab = Vec::with_capacity(8 + set.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&n.to_be_bytes());
    for s in &set.samples {
        let label = u8::try_from(s.label)
            .map_err(|_| Error::InvalidConfig(format!("label {} does not fit a byte", s.label)))?;
        lab.push(label);
    }
    write_file(images_path.as_ref(), &img)?;
    write_file(labels_path.as_ref(), &lab)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Gaussian-blob fixture parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_per_class: usize,
    pub classes: usize,
    pub shape: ImageShape,
    pub seed: u64,
    /// Per-pixel standard deviation around the class mean.
    pub noise: f64,
}

impl SyntheticSpec {
    pub const DEFAULT_NOISE: f64 = 0.1;
}

/// Class-conditional Gaussian blobs, clamped to `[0, 1]`, shuffled.
pub fn make_synthetic(n_per_class: usize, k: usize, shape: ImageShape, seed: u64) -> Result<ImageSet> {
    make_synthetic_with(&SyntheticSpec {
        n_per_class,
        classes: k,
        shape,
        seed,
        noise: SyntheticSpec::DEFAULT_NOISE,
    })
}

pub fn make_synthetic_with(spec: &SyntheticSpec) -> Result<ImageSet> {
    if spec.n_per_class == 0 {
        return Err(Error::InvalidConfig("n_per_class must be at least 1".into()));
    }
    if spec.classes < 2 {
        return Err(Error::InvalidConfig("need at least 2 classes".into()));
    }
    if spec.shape.is_empty() {
        return Err(Error::InvalidConfig(format!("empty image shape {}", spec.shape)));
    }
    if !(spec.noise.is_finite() && spec.noise >= 0.0) {
        return Err(Error::InvalidConfig(format!("noise {} must be >= 0", spec.noise)));
    }
    let mut rng = seeded_rng(spec.seed);
    let d = spec.shape.len();
    let mean_dist = Uniform::new(0.25, 0.75).expect("valid range");
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..d).map(|_| mean_dist.sample(&mut rng)).collect())
        .collect();
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::InvalidConfig(e.to_string()))?;

    let mut samples = Vec::with_capacity(spec.n_per_class * spec.classes);
    for (label, mean) in means.iter().enumerate() {
        for _ in 0..spec.n_per_class {
            let image = mean
                .iter()
                .map(|&m| (m + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32)
                .collect();
            samples.push(LabeledSample { image, label });
        }
    }
    samples.shuffle(&mut rng);
    Ok(ImageSet {
        name: format!("synthetic-{}x{}-s{}", spec.classes, spec.n_per_class, spec.seed),
        class_count: spec.classes,
        shape: spec.shape,
        samples,
    })
}

/// Seeded disjoint partition. Part `i` gets `floor(fractions[i] * n)` samples;
/// within each part the original order is kept.
pub fn split(dataset: &ImageSet, fractions: &[f64], seed: u64) -> Result<Vec<ImageSet>> {
    let indices = split_indices(dataset.len(), fractions, seed)?;
    Ok(indices
        .iter()
        .enumerate()
        .map(|(i, idx)| dataset.subset(idx, format!("{}[part{i}]", dataset.name)))
        .collect())
}

pub fn split_indices(n: usize, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    if fractions.is_empty() {
        return Err(Error::InvalidConfig("no split fractions given".into()));
    }
    if fractions.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
        return Err(Error::InvalidConfig(format!(
            "split fractions must be positive, got {fractions:?}"
        )));
    }
    let total: f64 = fractions.iter().sum();
    if total > 1.0 + 1e-12 {
        return Err(Error::InvalidConfig(format!(
            "split fractions sum to {total} > 1"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed));

    let mut parts = Vec::with_capacity(fractions.len());
    let mut start = 0;
    for f in fractions {
        let size = ((f * n as f64) + 1e-9).floor() as usize;
        let end = (start + size).min(n);
        let mut part = order[start..end].to_vec();
        part.sort_unstable();
        parts.push(part);
        start = end;
    }
    Ok(parts)
}
