//! Datasets: IDX ingestion, synthetic task generators, and seeded sampling.
//!
//! Images are `[N, H, W, C]` (or flat `[N, D]`) tensors with values in
//! [0, 1]. The synthetic tasks are striped-pattern classifiers small enough
//! to train in seconds while still rewarding transferred edge filters.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let n = images.shape()[0];
        if labels.len() != n {
            return Err(Error::BadDataset(format!(
                "{n} images but {} labels",
                labels.len()
            )));
        }
        if classes == 0 {
            return Err(Error::BadDataset("class count must be positive".into()));
        }
        for &l in &labels {
            if l >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
        }
        if images
            .data()
            .iter()
            .any(|&v| !v.is_finite() || !(-1e-9..=1.0 + 1e-9).contains(&v))
        {
            return Err(Error::BadDataset(
                "image values must be normalized to [0, 1]".into(),
            ));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Per-sample shape (without the leading N).
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Row-gather a subset by sample indices.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::BadDataset("empty subset".into()));
        }
        let stride: usize = self.sample_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::BadDataset(format!("sample index {i} out of range")));
            }
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        Ok(Dataset {
            images: Tensor::new(shape, data)?,
            labels,
            classes: self.classes,
        })
    }

    /// Sample indices per class, ascending within each class.
    pub fn per_class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }
}

fn be_u32(bytes: &[u8]) -> u32 {
    u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
}

/// Parsed IDX payload: u8 values plus dimensions.
#[derive(Debug)]
struct IdxArray {
    dims: Vec<usize>,
    values: Vec<u8>,
}

fn read_idx(path: &Path) -> Result<IdxArray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let p = path.display().to_string();
    let fail = |detail: &str, offset: usize| Error::BadFormat {
        path: p.clone(),
        detail: detail.into(),
        offset,
    };
    if bytes.len() < 4 {
        return Err(fail("truncated header", bytes.len()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(fail("bad magic (expected two zero bytes)", 0));
    }
    if bytes[2] != 0x08 {
        return Err(fail("unsupported type code (only unsigned byte 0x08)", 2));
    }
    let ndim = bytes[3] as usize;
    if ndim == 0 || ndim > 4 {
        return Err(fail("unsupported dimension count", 3));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(fail("truncated dimension table", bytes.len()));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|d| be_u32(&bytes[4 + 4 * d..]) as usize)
        .collect();
    let count: usize = dims.iter().product();
    if bytes.len() < header + count {
        return Err(fail("truncated payload", bytes.len()));
    }
    if bytes.len() > header + count {
        return Err(fail("trailing bytes after payload", header + count));
    }
    Ok(IdxArray {
        dims,
        values: bytes[header..].to_vec(),
    })
}

/// Load an image/label IDX pair. Pixels are scaled to [0, 1]; a rank-3
/// image file gains a trailing channel dimension.
pub fn load_idx_dataset(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read_idx(images_path)?;
    let labels = read_idx(labels_path)?;
    if labels.dims.len() != 1 {
        return Err(Error::BadFormat {
            path: labels_path.display().to_string(),
            detail: format!("label file must be rank 1, got rank {}", labels.dims.len()),
            offset: 3,
        });
    }
    if images.dims.len() < 2 {
        return Err(Error::BadFormat {
            path: images_path.display().to_string(),
            detail: "image file must be rank 2, 3, or 4".into(),
            offset: 3,
        });
    }
    if images.dims[0] != labels.dims[0] {
        return Err(Error::BadDataset(format!(
            "{} images but {} labels",
            images.dims[0], labels.dims[0]
        )));
    }
    let mut shape = images.dims.clone();
    if shape.len() == 3 {
        shape.push(1);
    }
    let data: Vec<f64> = images.values.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = labels.values.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(Tensor::new(shape, data)?, labels, classes)
}

/// `(fx, fy)` stripe frequencies defining the synthetic pattern classes.
/// The first five feed the source task, the last five the target task, so
/// the two tasks share no class.
pub const PATTERN_FREQS: [(f64, f64); 10] = [
    (1.0, 0.0),
    (0.0, 1.0),
    (1.0, 1.0),
    (2.0, 0.0),
    (0.0, 2.0),
    (2.0, 1.0),
    (1.0, 2.0),
    (2.0, 2.0),
    (3.0, 0.0),
    (0.0, 3.0),
];

pub const SYNTH_SIDE: usize = 12;
pub const SYNTH_CLASSES: usize = 5;
pub const SYNTH_PER_CLASS: usize = 40;

fn striped_sample<R: rand::Rng>(
    freq: (f64, f64),
    rng: &mut R,
    shift: impl Fn(f64) -> f64,
) -> Vec<f64> {
    let phase = rng.random::<f64>() * std::f64::consts::TAU;
    let amp = 0.3 + 0.1 * rng.random::<f64>();
    let side = SYNTH_SIDE as f64;
    let mut pixels = Vec::with_capacity(SYNTH_SIDE * SYNTH_SIDE);
    for y in 0..SYNTH_SIDE {
        for x in 0..SYNTH_SIDE {
            let arg = std::f64::consts::TAU * (freq.0 * x as f64 + freq.1 * y as f64) / side
                + phase;
            let noise = (rng.random::<f64>() - 0.5) * 0.1;
            let v = shift(0.5 + amp * arg.sin()) + noise;
            pixels.push(v.clamp(0.0, 1.0));
        }
    }
    pixels
}

fn striped_dataset<R: rand::Rng>(
    patterns: &[(f64, f64)],
    per_class: usize,
    rng: &mut R,
    shift: impl Fn(f64) -> f64 + Copy,
) -> Dataset {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (class, &freq) in patterns.iter().enumerate() {
        for _ in 0..per_class {
            data.extend(striped_sample(freq, rng, shift));
            labels.push(class);
        }
    }
    let n = labels.len();
    Dataset::new(
        Tensor::new(vec![n, SYNTH_SIDE, SYNTH_SIDE, 1], data).expect("generated shape"),
        labels,
        patterns.len(),
    )
    .expect("generated dataset is valid")
}

/// Class-disjoint source/target pair: five stripe patterns each, no pattern
/// shared. Deterministic per seed.
pub fn make_synthetic_transfer_task(seed: u64) -> (Dataset, Dataset) {
    let mut src_rng = rng::stream(seed, "data.source");
    let mut tgt_rng = rng::stream(seed, "data.target");
    let source = striped_dataset(
        &PATTERN_FREQS[..SYNTH_CLASSES],
        SYNTH_PER_CLASS,
        &mut src_rng,
        |v| v,
    );
    let target = striped_dataset(
        &PATTERN_FREQS[SYNTH_CLASSES..],
        SYNTH_PER_CLASS,
        &mut tgt_rng,
        |v| v,
    );
    (source, target)
}

/// Same five classes in both domains; the target domain compresses contrast
/// and lifts brightness. Deterministic per seed.
pub fn make_domain_adapt_task(seed: u64) -> (Dataset, Dataset) {
    let mut src_rng = rng::stream(seed, "data.source");
    let mut tgt_rng = rng::stream(seed, "data.target-domain");
    let source = striped_dataset(
        &PATTERN_FREQS[..SYNTH_CLASSES],
        SYNTH_PER_CLASS,
        &mut src_rng,
        |v| v,
    );
    let target = striped_dataset(
        &PATTERN_FREQS[..SYNTH_CLASSES],
        SYNTH_PER_CLASS,
        &mut tgt_rng,
        |v| 0.3 + 0.55 * v,
    );
    (source, target)
}

/// Draw exactly `k` samples per class; the remainder is the held-out split.
/// Sampling order is deterministic per seed and disjoint by construction.
pub fn sample_kshot(dataset: &Dataset, k: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if k == 0 {
        return Err(Error::BadDataset("k must be at least 1".into()));
    }
    let mut stream = rng::stream(seed, "sampling.kshot");
    let mut shot = Vec::new();
    let mut held = Vec::new();
    for (class, mut indices) in dataset.per_class_indices().into_iter().enumerate() {
        if indices.len() < k {
            return Err(Error::BadDataset(format!(
                "class {class} has {} samples, cannot draw {k}",
                indices.len()
            )));
        }
        indices.shuffle(&mut stream);
        shot.extend_from_slice(&indices[..k]);
        held.extend_from_slice(&indices[k..]);
    }
    if held.is_empty() {
        return Err(Error::BadDataset(
            "k consumes every sample; nothing held out".into(),
        ));
    }
    Ok((dataset.subset(&shot)?, dataset.subset(&held)?))
}

/// Stratified split: per class, about `fraction` of the samples (at least
/// one) land in the first returned dataset.
pub fn split_stratified(
    dataset: &Dataset,
    fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
        return Err(Error::BadConfig(format!(
            "split fraction must be in (0, 1), got {fraction}"
        )));
    }
    let mut stream = rng::stream(seed, "sampling.split");
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (class, mut indices) in dataset.per_class_indices().into_iter().enumerate() {
        if indices.len() < 2 {
            return Err(Error::BadDataset(format!(
                "class {class} has too few samples to split"
            )));
        }
        indices.shuffle(&mut stream);
        let take = ((indices.len() as f64 * fraction).round() as usize)
            .clamp(1, indices.len() - 1);
        first.extend_from_slice(&indices[..take]);
        second.extend_from_slice(&indices[take..]);
    }
    Ok((dataset.subset(&first)?, dataset.subset(&second)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx(dir: &Path, name: &str, dims: &[u32], payload: &[u8]) -> std::path::PathBuf {
        let mut bytes = vec![0u8, 0, 0x08, dims.len() as u8];
        for &d in dims {
            bytes.extend_from_slice(&d.to_be_bytes());
        }
        bytes.extend_from_slice(payload);
        let path = dir.join(name);
        fs::File::create(&path)
            .unwrap()
            .write_all(&bytes)
            .unwrap();
        path
    }

    #[test]
    fn idx_fixture_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let payload: Vec<u8> = (0..12).map(|v| v * 20).collect();
        let images = write_idx(dir.path(), "img.idx", &[3, 2, 2], &payload);
        let labels = write_idx(dir.path(), "lbl.idx", &[3], &[0, 1, 0]);
        let ds = load_idx_dataset(&images, &labels).unwrap();
        assert_eq!(ds.images().shape(), &[3, 2, 2, 1]);
        assert_eq!(ds.labels(), &[0, 1, 0]);
        assert_eq!(ds.classes(), 2);
        assert!((ds.images().data()[1] - 20.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn idx_count_mismatch_names_both_counts() {
        let dir = tempfile::tempdir().unwrap();
        let images = write_idx(dir.path(), "img.idx", &[3, 2, 2], &[0; 12]);
        let labels = write_idx(dir.path(), "lbl.idx", &[2], &[0, 1]);
        match load_idx_dataset(&images, &labels) {
            Err(Error::BadDataset(msg)) => {
                assert!(msg.contains('3') && msg.contains('2'), "message: {msg}");
            }
            other => panic!("expected BadDataset, got {other:?}"),
        }
    }

    #[test]
    fn idx_empty_file_is_truncated_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.idx");
        fs::File::create(&path).unwrap();
        match read_idx(&path) {
            Err(Error::BadFormat { detail, offset, .. }) => {
                assert!(detail.contains("truncated header"));
                assert_eq!(offset, 0);
            }
            other => panic!("expected BadFormat, got {other:?}"),
        }
    }

    #[test]
    fn idx_bad_type_code_points_at_offset_two() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.idx");
        fs::write(&path, [0u8, 0, 0x0D, 1, 0, 0, 0, 1, 42]).unwrap();
        match read_idx(&path) {
            Err(Error::BadFormat { offset, .. }) => assert_eq!(offset, 2),
            other => panic!("expected BadFormat, got {other:?}"),
        }
    }

    #[test]
    fn idx_truncated_payload_reports_file_length() {
        let dir = tempfile::tempdir().unwrap();
        // promises 4 values, delivers 2
        let path = dir.path().join("short.idx");
        fs::write(&path, [0u8, 0, 0x08, 1, 0, 0, 0, 4, 1, 2]).unwrap();
        match read_idx(&path) {
            Err(Error::BadFormat { detail, offset, .. }) => {
                assert!(detail.contains("truncated payload"));
                assert_eq!(offset, 10);
            }
            other => panic!("expected BadFormat, got {other:?}"),
        }
    }

    #[test]
    fn synthetic_task_is_deterministic_and_disjoint() {
        let (s1, t1) = make_synthetic_transfer_task(3);
        let (s2, t2) = make_synthetic_transfer_task(3);
        assert_eq!(s1.images().data(), s2.images().data());
        assert_eq!(t1.images().data(), t2.images().data());
        assert_eq!(s1.len(), SYNTH_CLASSES * SYNTH_PER_CLASS);
        assert_eq!(s1.images().shape(), &[200, 12, 12, 1]);
        // the two tasks draw from disjoint pattern sets
        for src in &PATTERN_FREQS[..SYNTH_CLASSES] {
            assert!(!PATTERN_FREQS[SYNTH_CLASSES..].contains(src));
        }
        // pixel range honored
        assert!(s1.images().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn kshot_draws_exactly_k_per_class() {
        let (_, target) = make_synthetic_transfer_task(5);
        for k in [1usize, 5, 10] {
            let (shot, held) = sample_kshot(&target, k, 17).unwrap();
            assert_eq!(shot.len(), k * SYNTH_CLASSES);
            assert_eq!(held.len(), target.len() - shot.len());
            let by_class = shot.per_class_indices();
            assert!(by_class.iter().all(|c| c.len() == k));
        }
    }

    #[test]
    fn kshot_rejects_oversized_k() {
        let (_, target) = make_synthetic_transfer_task(5);
        assert!(sample_kshot(&target, SYNTH_PER_CLASS + 1, 17).is_err());
    }

    #[test]
    fn kshot_splits_are_disjoint() {
        // distinct images in shot and held: compare sample rows as bytes
        let (_, target) = make_synthetic_transfer_task(9);
        let (shot, held) = sample_kshot(&target, 3, 23).unwrap();
        let stride: usize = target.sample_shape().iter().product();
        let row = |ds: &Dataset, i: usize| ds.images().data()[i * stride..(i + 1) * stride].to_vec();
        let shot_rows: Vec<Vec<f64>> = (0..shot.len()).map(|i| row(&shot, i)).collect();
        for i in 0..held.len() {
            let r = row(&held, i);
            assert!(!shot_rows.contains(&r));
        }
    }

    #[test]
    fn stratified_split_keeps_all_classes() {
        let (_, target) = make_synthetic_transfer_task(2);
        let (a, b) = split_stratified(&target, 0.2, 7).unwrap();
        assert_eq!(a.len() + b.len(), target.len());
        assert!(a.per_class_indices().iter().all(|c| !c.is_empty()));
        assert!(b.per_class_indices().iter().all(|c| !c.is_empty()));
    }

    #[test]
    fn domain_adapt_shares_classes_but_shifts_intensity() {
        let (source, target) = make_domain_adapt_task(4);
        assert_eq!(source.classes(), target.classes());
        let mean = |ds: &Dataset| ds.images().data().iter().sum::<f64>() / ds.images().len() as f64;
        // brightness lift moves the target mean upward
        assert!(mean(&target) > mean(&source) + 0.05);
    }
}
