//! Binary dataset format and the bundled synthetic generator.
//!
//! A dataset root holds `train/` and `test/`, each with `meta.json`,
//! `images.f32le` (`[sample][channel][row][col]`, values in `[0, 1]`) and
//! `labels.u32le`. The digest is the SHA-256 of the image bytes followed by
//! the label bytes.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unixkd_core::rng::stream;
use unixkd_core::Tensor64;

use crate::error::{DataErrorKind, HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub num_samples: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub digest: String,
}

impl DatasetMeta {
    pub fn item_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn item_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// One split held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub meta: DatasetMeta,
    /// `[num_samples, channels, height, width]`.
    pub images: Tensor64,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.meta.num_classes
    }

    /// Images and labels at dataset indices `idx`.
    pub fn gather(&self, idx: &[usize]) -> (Tensor64, Vec<usize>) {
        (self.images.gather(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
}

pub fn digest(image_bytes: &[u8], label_bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(image_bytes);
    h.update(label_bytes);
    hex::encode(h.finalize())
}

fn encode(images: &[f32], labels: &[u32]) -> (Vec<u8>, Vec<u8>) {
    let img = images.iter().flat_map(|v| v.to_le_bytes()).collect();
    let lab = labels.iter().flat_map(|v| v.to_le_bytes()).collect();
    (img, lab)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

/// Write one split without validating its contents. Returns the meta that
/// was written.
pub fn write_split(
    dir: &Path,
    shape: [usize; 3],
    num_classes: usize,
    images: &[f32],
    labels: &[u32],
) -> Result<DatasetMeta> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let (img, lab) = encode(images, labels);
    let meta = DatasetMeta {
        num_samples: labels.len(),
        channels: shape[0],
        height: shape[1],
        width: shape[2],
        num_classes,
        digest: digest(&img, &lab),
    };
    write_file(&dir.join("images.f32le"), &img)?;
    write_file(&dir.join("labels.u32le"), &lab)?;
    write_meta(dir, &meta)?;
    Ok(meta)
}

pub fn write_meta(dir: &Path, meta: &DatasetMeta) -> Result<()> {
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(meta).expect("meta serializes");
    write_file(&path, text.as_bytes())
}

fn read_sized(path: &Path, expected: u64) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    let found = bytes.len() as u64;
    if found < expected {
        return Err(HarnessError::data(path, DataErrorKind::Truncated { expected, found }));
    }
    if found > expected {
        return Err(HarnessError::data(path, DataErrorKind::SizeMismatch { expected, found }));
    }
    Ok(bytes)
}

pub fn load_split(dir: &Path) -> Result<Split> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| HarnessError::io(&meta_path, e))?;
    let meta: DatasetMeta =
        serde_json::from_str(&text).map_err(|e| HarnessError::data(&meta_path, DataErrorKind::Meta(e.to_string())))?;
    if meta.item_len() == 0 || meta.num_classes == 0 {
        return Err(HarnessError::data(
            &meta_path,
            DataErrorKind::Meta("dimensions and num_classes must be positive".into()),
        ));
    }
    let n = meta.num_samples;
    let img_path = dir.join("images.f32le");
    let lab_path = dir.join("labels.u32le");
    let img = read_sized(&img_path, (n * meta.item_len() * 4) as u64)?;
    let lab = read_sized(&lab_path, (n * 4) as u64)?;
    let found = digest(&img, &lab);
    if found != meta.digest {
        return Err(HarnessError::data(
            &meta_path,
            DataErrorKind::Digest {
                expected: meta.digest.clone(),
                found,
            },
        ));
    }
    let mut labels = Vec::with_capacity(n);
    for (index, chunk) in lab.chunks_exact(4).enumerate() {
        let label = u32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if label as usize >= meta.num_classes {
            return Err(HarnessError::data(
                &lab_path,
                DataErrorKind::LabelOutOfRange {
                    index,
                    label,
                    classes: meta.num_classes,
                },
            ));
        }
        labels.push(label as usize);
    }
    let mut pixels = Vec::with_capacity(n * meta.item_len());
    for (offset, chunk) in img.chunks_exact(4).enumerate() {
        let value = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !(0.0..=1.0).contains(&value) {
            return Err(HarnessError::data(&img_path, DataErrorKind::PixelRange { offset, value }));
        }
        pixels.push(value as f64);
    }
    let [c, h, w] = meta.item_shape();
    let images = Tensor64::from_vec(&[n, c, h, w], pixels).expect("sized above");
    Ok(Split { meta, images, labels })
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let train = load_split(&root.join("train"))?;
    let test = load_split(&root.join("test"))?;
    if train.meta.item_shape() != test.meta.item_shape() || train.meta.num_classes != test.meta.num_classes {
        return Err(HarnessError::data(
            root,
            DataErrorKind::Meta("train and test splits disagree on shape or num_classes".into()),
        ));
    }
    Ok(Dataset { train, test })
}

/// Parameters of the synthetic blob dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub height: usize,
    pub width: usize,
    /// Scales position jitter and pixel noise; 0 is nearly noiseless.
    pub hardness: f64,
    /// The last `hard_classes` categories receive label noise.
    pub hard_classes: usize,
    /// Fraction of each hard category's samples relabelled as the next hard
    /// category (cyclically), so every label keeps the same count.
    pub label_noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// 8×8 single-channel blobs; the test split has a fifth as many samples
    /// per class as the train split.
    pub fn new(classes: usize, per_class: usize, seed: u64) -> Self {
        Self {
            classes,
            per_class_train: per_class,
            per_class_test: (per_class / 5).max(1),
            height: 8,
            width: 8,
            hardness: 0.5,
            hard_classes: 0,
            label_noise: 0.0,
            seed,
        }
    }

    /// Plant `hard` noisy categories at the end of the label range.
    pub fn with_planted_noise(mut self, hard: usize, noise: f64) -> Self {
        self.hard_classes = hard;
        self.label_noise = noise;
        self
    }

    fn is_hard(&self, class: usize) -> bool {
        class + self.hard_classes >= self.classes
    }

    fn next_hard(&self, class: usize) -> usize {
        let first = self.classes - self.hard_classes;
        first + (class - first + 1) % self.hard_classes
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Config(format!("synthetic dataset: {m}")));
        if self.classes < 2 {
            return bad("need at least 2 classes");
        }
        if self.per_class_train == 0 || self.per_class_test == 0 {
            return bad("need at least one sample per class in each split");
        }
        if self.height < 2 || self.width < 2 {
            return bad("images must be at least 2×2");
        }
        if !(self.hardness >= 0.0) || !self.hardness.is_finite() {
            return bad("hardness must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.label_noise) || self.hard_classes > self.classes {
            return bad("label_noise must be in [0, 1] and hard_classes at most classes");
        }
        if self.label_noise > 0.0 && self.hard_classes < 2 {
            return bad("label noise needs at least 2 hard classes");
        }
        Ok(())
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Blob centres of class `c`: one on an outer ring and one on an inner ring
/// at a different angle, so no single pixel identifies a class.
fn prototype(c: usize, classes: usize, h: usize, w: usize) -> [(f64, f64); 2] {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let r = cy.min(cx);
    let tau = std::f64::consts::TAU;
    let a1 = tau * c as f64 / classes as f64;
    let a2 = tau * ((3 * c + 1) % classes) as f64 / classes as f64 + 0.5;
    [
        (cy + 0.75 * r * a1.sin(), cx + 0.75 * r * a1.cos()),
        (cy + 0.35 * r * a2.sin(), cx + 0.35 * r * a2.cos()),
    ]
}

fn render<R: Rng>(class: usize, spec: &SyntheticSpec, rng: &mut R, out: &mut Vec<f32>) {
    let (h, w) = (spec.height, spec.width);
    let jitter = 0.3 + 0.6 * spec.hardness;
    let noise = 0.03 + 0.12 * spec.hardness;
    let (sy, sx) = (jitter * normal(rng), jitter * normal(rng));
    let blobs: Vec<(f64, f64, f64, f64)> = prototype(class, spec.classes, h, w)
        .iter()
        .map(|&(y, x)| {
            let amp = rng.random_range(0.55..1.0);
            let sigma = rng.random_range(0.8..1.3);
            (y + sy + 0.5 * jitter * normal(rng), x + sx + 0.5 * jitter * normal(rng), amp, sigma)
        })
        .collect();
    for row in 0..h {
        for col in 0..w {
            let mut v = 0.0;
            for &(y, x, amp, sigma) in &blobs {
                let d2 = (row as f64 - y).powi(2) + (col as f64 - x).powi(2);
                v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
            v += noise * normal(rng);
            out.push(v.clamp(0.0, 1.0) as f32);
        }
    }
}

/// Raw contents of one generated split.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSplit {
    pub images: Vec<f32>,
    pub labels: Vec<u32>,
}

fn generate_split(spec: &SyntheticSpec, per_class: usize, stream_id: u64) -> RawSplit {
    let mut rng = stream(spec.seed, stream_id);
    let mut order: Vec<usize> = (0..spec.classes).flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let mut images = Vec::with_capacity(order.len() * spec.height * spec.width);
    let mut labels = Vec::with_capacity(order.len());
    let flips = (spec.label_noise * per_class as f64).round() as usize;
    let mut flipped = vec![0usize; spec.classes];
    for &class in &order {
        render(class, spec, &mut rng, &mut images);
        let label = if spec.is_hard(class) && flipped[class] < flips {
            flipped[class] += 1;
            spec.next_hard(class)
        } else {
            class
        };
        labels.push(label as u32);
    }
    RawSplit { images, labels }
}

/// Generate both splits in memory.
pub fn generate(spec: &SyntheticSpec) -> Result<(RawSplit, RawSplit)> {
    spec.validate()?;
    Ok((
        generate_split(spec, spec.per_class_train, 0),
        generate_split(spec, spec.per_class_test, 1),
    ))
}

/// Generate and write `root/train` and `root/test`, plus the generator
/// settings in `root/synthetic.json`.
pub fn write_synthetic(root: &Path, spec: &SyntheticSpec) -> Result<(DatasetMeta, DatasetMeta)> {
    let (train, test) = generate(spec)?;
    let shape = [1, spec.height, spec.width];
    let a = write_split(&root.join("train"), shape, spec.classes, &train.images, &train.labels)?;
    let b = write_split(&root.join("test"), shape, spec.classes, &test.images, &test.labels)?;
    let path: PathBuf = root.join("synthetic.json");
    let text = serde_json::to_string_pretty(spec).expect("spec serializes");
    write_file(&path, text.as_bytes())?;
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sample_round_trips_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let images = [0.0f32, 0.25, 0.5, 1.0];
        let meta = write_split(dir.path(), [1, 2, 2], 3, &images, &[2]).unwrap();
        let before = fs::read(dir.path().join("images.f32le")).unwrap();
        let split = load_split(dir.path()).unwrap();
        assert_eq!(split.meta, meta);
        assert_eq!(split.labels, vec![2]);
        let pixels: Vec<f32> = split.images.data().iter().map(|&v| v as f32).collect();
        let again = tempfile::tempdir().unwrap();
        write_split(again.path(), [1, 2, 2], 3, &pixels, &[2]).unwrap();
        assert_eq!(fs::read(again.path().join("images.f32le")).unwrap(), before);
    }

    #[test]
    fn truncation_and_size_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let images = vec![0.5f32; 9 * 4];
        let labels = vec![0u32; 9];
        let mut meta = write_split(dir.path(), [1, 2, 2], 2, &images, &labels).unwrap();
        meta.num_samples = 10;
        write_meta(dir.path(), &meta).unwrap();
        let err = load_split(dir.path()).unwrap_err();
        assert!(matches!(err, HarnessError::Data { kind: DataErrorKind::Truncated { .. }, .. }), "{err}");
        assert_eq!(err.exit_code(), 2);

        meta.num_samples = 8;
        write_meta(dir.path(), &meta).unwrap();
        let err = load_split(dir.path()).unwrap_err();
        assert!(matches!(err, HarnessError::Data { kind: DataErrorKind::SizeMismatch { .. }, .. }), "{err}");
    }

    #[test]
    fn bad_labels_pixels_and_digests_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_split(dir.path(), [1, 1, 2], 2, &[0.1, 0.2, 0.3, 0.4], &[1, 2]).unwrap();
        let err = load_split(dir.path()).unwrap_err();
        assert!(matches!(err, HarnessError::Data { kind: DataErrorKind::LabelOutOfRange { index: 1, label: 2, .. }, .. }));

        write_split(dir.path(), [1, 1, 2], 2, &[0.1, 1.5], &[1]).unwrap();
        let err = load_split(dir.path()).unwrap_err();
        assert!(matches!(err, HarnessError::Data { kind: DataErrorKind::PixelRange { offset: 1, .. }, .. }));

        let mut meta = write_split(dir.path(), [1, 1, 2], 2, &[0.1, 0.5], &[1]).unwrap();
        meta.digest = "00".repeat(32);
        write_meta(dir.path(), &meta).unwrap();
        let err = load_split(dir.path()).unwrap_err();
        assert!(matches!(err, HarnessError::Data { kind: DataErrorKind::Digest { .. }, .. }));
    }

    #[test]
    fn generated_digest_matches_generator_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec::new(4, 10, 3);
        let (train_meta, _) = write_synthetic(dir.path(), &spec).unwrap();
        let (train, _) = generate(&spec).unwrap();
        let (img, lab) = encode(&train.images, &train.labels);
        assert_eq!(train_meta.digest, digest(&img, &lab));
        let data = load_dataset(dir.path()).unwrap();
        assert_eq!(data.train.len(), 40);
        assert_eq!(data.test.len(), 8);
        assert!(data.train.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn generator_is_deterministic_and_balanced() {
        let spec = SyntheticSpec::new(5, 20, 9);
        let (a, _) = generate(&spec).unwrap();
        let (b, _) = generate(&spec).unwrap();
        assert_eq!(a, b);
        let (c, _) = generate(&SyntheticSpec { seed: 10, ..spec.clone() }).unwrap();
        assert_ne!(a.images, c.images);
        for class in 0..5u32 {
            assert_eq!(a.labels.iter().filter(|&&l| l == class).count(), 20);
        }
    }

    #[test]
    fn planted_noise_keeps_labels_balanced() {
        let spec = SyntheticSpec::new(4, 200, 1).with_planted_noise(2, 0.3);
        let (train, _) = generate(&spec).unwrap();
        let (clean, _) = generate(&SyntheticSpec::new(4, 200, 1)).unwrap();
        assert_eq!(train.images, clean.images);
        for c in 0..4u32 {
            assert_eq!(train.labels.iter().filter(|&&l| l == c).count(), 200);
        }
        let changed: Vec<(u32, u32)> = clean
            .labels
            .iter()
            .zip(&train.labels)
            .filter(|(a, b)| a != b)
            .map(|(&a, &b)| (a, b))
            .collect();
        assert_eq!(changed.len(), 120);
        assert!(changed.iter().all(|&(a, b)| (a, b) == (2, 3) || (a, b) == (3, 2)));
        assert!(generate(&SyntheticSpec::new(4, 10, 1).with_planted_noise(1, 0.3)).is_err());
    }
}
