//! Dataset parsing (MNIST IDX, CIFAR binary), normalization, and
//! deterministic splits/subsets.
//!
//! Parsers are bit-exact: `encode_*` reproduces the original file bytes
//! from a parsed dataset. No downloading happens here; callers point the
//! loaders at files on disk.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Validation,
    Test,
    Transfer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

/// Per-channel normalization statistics, carried by the dataset they
/// were fitted on so other splits can reuse them.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub channels: Vec<ChannelStats>,
    /// Set when a zero-variance channel forced the sigma guard.
    pub sigma_guarded: bool,
}

/// An immutable labeled image set.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split_tag: SplitTag,
    pub stats: Option<NormStats>,
}

impl Dataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        split_tag: SplitTag,
    ) -> Result<Self> {
        let &[n, ..] = images.shape() else {
            return Err(Error::Dimension("images tensor must be at least 1-D".into()));
        };
        if images.shape().len() != 4 {
            return Err(Error::Dimension(format!(
                "images must be [n, c, h, w], got {:?}",
                images.shape()
            )));
        }
        if labels.len() != n {
            return Err(Error::Contract(format!(
                "{n} images but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Domain(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset { images, labels, num_classes, split_tag, stats: None })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// (channels, height, width) of one example.
    pub fn example_shape(&self) -> (usize, usize, usize) {
        (self.images.shape()[1], self.images.shape()[2], self.images.shape()[3])
    }

    fn example_len(&self) -> usize {
        let (c, h, w) = self.example_shape();
        c * h * w
    }

    /// New dataset holding the listed examples in the given order.
    pub fn gather(&self, indices: &[usize], split_tag: SplitTag) -> Dataset {
        let el = self.example_len();
        let (c, h, w) = self.example_shape();
        let mut data = Vec::with_capacity(indices.len() * el);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * el..(i + 1) * el]);
            labels.push(self.labels[i]);
        }
        Dataset {
            images: Tensor::from_vec(&[indices.len(), c, h, w], data)
                .expect("gather preserves the element count"),
            labels,
            num_classes: self.num_classes,
            split_tag,
            stats: self.stats.clone(),
        }
    }

    /// Copies a batch of examples into a fresh `[n, c, h, w]` tensor.
    pub fn batch_images(&self, indices: &[usize]) -> Tensor {
        self.gather(indices, self.split_tag).images
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], off: usize, what: &str) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|s| u32::from_be_bytes(s.try_into().unwrap()))
        .ok_or_else(|| Error::Format(format!("{what}: file truncated at byte {off}")))
}

/// Parses an IDX image file (big-endian magic 0x00000803, dims, then
/// unsigned-byte pixels mapped to [0,1] by /255).
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Vec<f64>, usize, usize, usize)> {
    let magic = read_be_u32(bytes, 0, "idx images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "idx images: expected magic {IDX_IMAGES_MAGIC:#010x}, found {magic:#010x}"
        )));
    }
    let n = read_be_u32(bytes, 4, "idx images")? as usize;
    let h = read_be_u32(bytes, 8, "idx images")? as usize;
    let w = read_be_u32(bytes, 12, "idx images")? as usize;
    let expected = 16 + n * h * w;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "idx images: expected {expected} bytes for {n} images of {h}x{w}, found {}",
            bytes.len()
        )));
    }
    let pixels = bytes[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((pixels, n, h, w))
}

/// Parses an IDX label file (big-endian magic 0x00000801).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_be_u32(bytes, 0, "idx labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "idx labels: expected magic {IDX_LABELS_MAGIC:#010x}, found {magic:#010x}"
        )));
    }
    let n = read_be_u32(bytes, 4, "idx labels")? as usize;
    if bytes.len() != 8 + n {
        return Err(Error::Format(format!(
            "idx labels: expected {} bytes for {n} labels, found {}",
            8 + n,
            bytes.len()
        )));
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Loads an MNIST-style IDX image/label pair as a 10-class dataset of
/// `[n, 1, h, w]` images.
pub fn load_mnist(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = fs::read(images_path)
        .map_err(|e| Error::Format(format!("{}: {e}", images_path.display())))?;
    let lbl_bytes = fs::read(labels_path)
        .map_err(|e| Error::Format(format!("{}: {e}", labels_path.display())))?;
    let (pixels, n, h, w) = parse_idx_images(&img_bytes)?;
    let labels = parse_idx_labels(&lbl_bytes)?;
    if labels.len() != n {
        return Err(Error::Format(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    Dataset::new(Tensor::from_vec(&[n, 1, h, w], pixels)?, labels, 10, SplitTag::Train)
}

/// Encodes a 1-channel dataset back into IDX (images, labels) bytes.
///
/// Exact inverse of [`load_mnist`] for datasets whose pixels came from
/// bytes: `round(p * 255)` recovers the original value.
pub fn encode_mnist(data: &Dataset) -> (Vec<u8>, Vec<u8>) {
    let (_, h, w) = data.example_shape();
    let n = data.len();
    let mut img = Vec::with_capacity(16 + n * h * w);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(h as u32).to_be_bytes());
    img.extend_from_slice(&(w as u32).to_be_bytes());
    img.extend(data.images.data().iter().map(|&p| (p * 255.0).round() as u8));
    let mut lbl = Vec::with_capacity(8 + n);
    lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(n as u32).to_be_bytes());
    lbl.extend(data.labels.iter().map(|&l| l as u8));
    (img, lbl)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    /// One label byte then 3072 pixel bytes per record.
    Cifar10,
    /// Coarse + fine label bytes then 3072 pixel bytes; the fine label
    /// is kept.
    Cifar100,
}

impl CifarVariant {
    fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 3073,
            CifarVariant::Cifar100 => 3074,
        }
    }

    fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

/// Loads CIFAR binary batches: per record a label header then 3072
/// bytes (1024 R, 1024 G, 1024 B, row-major), pixels mapped by /255 to
/// `[n, 3, 32, 32]`.
pub fn load_cifar(paths: &[impl AsRef<Path>], variant: CifarVariant) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::Domain("no CIFAR batch files given".into()));
    }
    let rec = variant.record_len();
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let bytes = fs::read(p).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
        if bytes.is_empty() || bytes.len() % rec != 0 {
            return Err(Error::Format(format!(
                "{}: length {} is not a positive multiple of the {rec}-byte record size",
                p.display(),
                bytes.len()
            )));
        }
        for record in bytes.chunks_exact(rec) {
            let label = match variant {
                CifarVariant::Cifar10 => record[0] as usize,
                CifarVariant::Cifar100 => record[1] as usize,
            };
            if label >= variant.num_classes() {
                return Err(Error::Format(format!(
                    "{}: label {label} out of range",
                    p.display()
                )));
            }
            labels.push(label);
            pixels.extend(record[rec - 3072..].iter().map(|&b| f64::from(b) / 255.0));
        }
    }
    let n = labels.len();
    Dataset::new(
        Tensor::from_vec(&[n, 3, 32, 32], pixels)?,
        labels,
        variant.num_classes(),
        SplitTag::Train,
    )
}

pub fn load_cifar10(paths: &[impl AsRef<Path>]) -> Result<Dataset> {
    load_cifar(paths, CifarVariant::Cifar10)
}

/// Encodes a 3-channel dataset back into one CIFAR-10 binary batch.
pub fn encode_cifar10(data: &Dataset) -> Vec<u8> {
    let el = 3 * 32 * 32;
    let mut out = Vec::with_capacity(data.len() * 3073);
    for i in 0..data.len() {
        out.push(data.labels[i] as u8);
        out.extend(
            data.images.data()[i * el..(i + 1) * el]
                .iter()
                .map(|&p| (p * 255.0).round() as u8),
        );
    }
    out
}

/// Rescales to mean 0, standard deviation 0.5 per channel.
///
/// With `stats` absent the statistics are fitted on this split and
/// attached to the returned dataset; pass a training split's stats to
/// normalize validation/test data consistently. A zero-variance channel
/// substitutes sigma = 1 and sets the guard flag.
pub fn normalize_dataset(data: &Dataset, stats: Option<&NormStats>) -> Dataset {
    let (c, h, w) = data.example_shape();
    let plane = h * w;
    let n = data.len();
    let stats = match stats {
        Some(s) => s.clone(),
        None => {
            let mut channels = Vec::with_capacity(c);
            let mut guarded = false;
            for ch in 0..c {
                let mut sum = 0.0;
                let mut sum_sq = 0.0;
                for i in 0..n {
                    let base = (i * c + ch) * plane;
                    for &x in &data.images.data()[base..base + plane] {
                        sum += x;
                        sum_sq += x * x;
                    }
                }
                let count = (n * plane) as f64;
                let mean = sum / count;
                let var = (sum_sq / count - mean * mean).max(0.0);
                let mut std = var.sqrt();
                if std == 0.0 {
                    std = 1.0;
                    guarded = true;
                }
                channels.push(ChannelStats { mean, std });
            }
            NormStats { channels, sigma_guarded: guarded }
        }
    };
    let mut images = data.images.clone();
    let id = images.data_mut();
    for i in 0..n {
        for (ch, cs) in stats.channels.iter().enumerate() {
            let base = (i * c + ch) * plane;
            for x in &mut id[base..base + plane] {
                *x = (*x - cs.mean) / cs.std * 0.5;
            }
        }
    }
    Dataset {
        images,
        labels: data.labels.clone(),
        num_classes: data.num_classes,
        split_tag: data.split_tag,
        stats: Some(stats),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferSource {
    /// Soft targets are collected on the training split itself.
    TrainSplit,
}

/// How to carve a loaded set into train and validation splits.
#[derive(Debug, Clone)]
pub struct SplitPlan {
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub seed: u64,
    pub transfer_source: TransferSource,
}

impl SplitPlan {
    pub fn new(train_fraction: f64, validation_fraction: f64, seed: u64) -> Self {
        SplitPlan {
            train_fraction,
            validation_fraction,
            seed,
            transfer_source: TransferSource::TrainSplit,
        }
    }
}

/// Seeded shuffle then contiguous cut; the two splits partition the
/// shuffled input.
pub fn split_dataset(data: &Dataset, plan: &SplitPlan) -> Result<(Dataset, Dataset)> {
    if plan.train_fraction <= 0.0
        || plan.validation_fraction <= 0.0
        || plan.train_fraction + plan.validation_fraction > 1.0 + 1e-12
    {
        return Err(Error::Domain(format!(
            "invalid split fractions ({}, {})",
            plan.train_fraction, plan.validation_fraction
        )));
    }
    let n = data.len();
    let n_train = (plan.train_fraction * n as f64).floor() as usize;
    let n_val = (plan.validation_fraction * n as f64).floor() as usize;
    if n_train == 0 || n_val == 0 {
        return Err(Error::Domain(format!(
            "split of {n} examples yields an empty split ({n_train} train, {n_val} validation)"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng::rng_from(plan.seed));
    let train = data.gather(&indices[..n_train], SplitTag::Train);
    let val = data.gather(&indices[n_train..n_train + n_val], SplitTag::Validation);
    Ok((train, val))
}

/// Seeded class-stratified sample of `n` examples.
///
/// Per-class counts differ by at most one wherever class availability
/// permits; short classes are capped at their size and the remainder
/// spreads over the others, so `n == len` returns a permutation of the
/// whole set.
pub fn subset(data: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n < data.num_classes {
        return Err(Error::Domain(format!(
            "subset of {n} cannot cover {} classes",
            data.num_classes
        )));
    }
    if n > data.len() {
        return Err(Error::Domain(format!(
            "subset of {n} from only {} examples",
            data.len()
        )));
    }
    let k = data.num_classes;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &label) in data.labels.iter().enumerate() {
        by_class[label].push(i);
    }
    let mut rng = rng::rng_from(seed);
    for class in &mut by_class {
        class.shuffle(&mut rng);
    }

    // Water-filling: visit classes from smallest, giving each an even
    // share of what remains, capped by availability.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by_key(|&c| (by_class[c].len(), c));
    let mut take = vec![0usize; k];
    let mut remaining = n;
    for (pos, &c) in order.iter().enumerate() {
        let left = k - pos;
        let want = remaining.div_ceil(left);
        take[c] = want.min(by_class[c].len());
        remaining -= take[c];
    }
    if remaining > 0 {
        return Err(Error::Domain(format!(
            "could not fill a subset of {n}: {remaining} examples short"
        )));
    }

    let mut picked = Vec::with_capacity(n);
    for c in 0..k {
        picked.extend_from_slice(&by_class[c][..take[c]]);
    }
    picked.shuffle(&mut rng);
    Ok(data.gather(&picked, data.split_tag))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_idx_fixture() -> (Vec<u8>, Vec<u8>) {
        // two 2x2 images with known bytes
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&[0, 51, 102, 255, 10, 20, 30, 40]);
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lbl.extend_from_slice(&2u32.to_be_bytes());
        lbl.extend_from_slice(&[7, 3]);
        (img, lbl)
    }

    #[test]
    fn idx_fixture_parses_to_exact_pixel_values() {
        let (img, lbl) = tiny_idx_fixture();
        let (pixels, n, h, w) = parse_idx_images(&img).unwrap();
        assert_eq!((n, h, w), (2, 2, 2));
        assert_eq!(pixels[0], 0.0);
        assert_eq!(pixels[1], 51.0 / 255.0);
        assert_eq!(pixels[3], 1.0);
        assert_eq!(parse_idx_labels(&lbl).unwrap(), vec![7, 3]);
    }

    #[test]
    fn idx_round_trip_is_bit_exact() {
        let (img, lbl) = tiny_idx_fixture();
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lbl.idx");
        fs::write(&ip, &img).unwrap();
        fs::write(&lp, &lbl).unwrap();
        let data = load_mnist(&ip, &lp).unwrap();
        let (img2, lbl2) = encode_mnist(&data);
        assert_eq!(img, img2);
        assert_eq!(lbl, lbl2);
    }

    #[test]
    fn idx_wrong_magic_names_expected_and_found() {
        let (mut img, _) = tiny_idx_fixture();
        img[3] = 0x05;
        let msg = parse_idx_images(&img).unwrap_err().to_string();
        assert!(msg.contains("0x00000803") && msg.contains("0x00000805"), "{msg}");
    }

    #[test]
    fn idx_truncation_is_a_length_error() {
        let (mut img, _) = tiny_idx_fixture();
        img.pop();
        assert!(matches!(parse_idx_images(&img), Err(Error::Format(_))));
    }

    #[test]
    fn cifar_record_with_red_plane_set() {
        let mut record = vec![7u8];
        record.extend(std::iter::repeat(255u8).take(1024));
        record.extend(std::iter::repeat(0u8).take(2048));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("batch.bin");
        fs::write(&p, &record).unwrap();
        let data = load_cifar10(&[&p]).unwrap();
        assert_eq!(data.len(), 1);
        assert_eq!(data.labels, vec![7]);
        let red = &data.images.data()[..1024];
        assert!(red.iter().all(|&v| v == 1.0));
        assert!(data.images.data()[1024..].iter().all(|&v| v == 0.0));
        // bit-exact round trip
        assert_eq!(encode_cifar10(&data), record);
    }

    #[test]
    fn cifar_empty_file_list_is_domain_error() {
        let paths: [&Path; 0] = [];
        assert!(matches!(load_cifar10(&paths), Err(Error::Domain(_))));
    }

    #[test]
    fn cifar_bad_length_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.bin");
        fs::write(&p, vec![0u8; 3072]).unwrap();
        assert!(matches!(load_cifar10(&[&p]), Err(Error::Format(_))));
    }

    #[test]
    fn normalize_two_pixel_channel() {
        let images = Tensor::from_vec(&[2, 1, 1, 1], vec![0.0, 1.0]).unwrap();
        let data = Dataset::new(images, vec![0, 1], 2, SplitTag::Train).unwrap();
        let normed = normalize_dataset(&data, None);
        let stats = normed.stats.as_ref().unwrap();
        assert_eq!(stats.channels[0].mean, 0.5);
        assert_eq!(stats.channels[0].std, 0.5);
        assert_eq!(normed.images.data(), &[-0.5, 0.5]);
    }

    #[test]
    fn normalize_constant_channel_sets_guard() {
        let images = Tensor::zeros(&[3, 1, 2, 2]);
        let data = Dataset::new(images, vec![0, 1, 0], 2, SplitTag::Train).unwrap();
        let normed = normalize_dataset(&data, None);
        assert!(normed.stats.as_ref().unwrap().sigma_guarded);
        assert!(normed.images.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_hits_target_statistics() {
        let mut rng = rng::rng_from(5);
        use rand::Rng;
        let data: Vec<f64> = (0..50 * 2 * 4 * 4).map(|_| rng.gen_range(0.0..1.0)).collect();
        let images = Tensor::from_vec(&[50, 2, 4, 4], data).unwrap();
        let ds = Dataset::new(images, vec![0; 50], 2, SplitTag::Train).unwrap();
        let normed = normalize_dataset(&ds, None);
        for ch in 0..2 {
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for i in 0..50 {
                let base = (i * 2 + ch) * 16;
                for &x in &normed.images.data()[base..base + 16] {
                    sum += x;
                    sum_sq += x * x;
                }
            }
            let count = (50 * 16) as f64;
            let mean = sum / count;
            let std = (sum_sq / count - mean * mean).sqrt();
            assert!(mean.abs() < 1e-9, "channel {ch} mean {mean}");
            assert!((std - 0.5).abs() < 1e-9, "channel {ch} std {std}");
        }
    }

    fn toy_set(n: usize) -> Dataset {
        let images = Tensor::from_vec(&[n, 1, 1, 1], (0..n).map(|i| i as f64).collect()).unwrap();
        Dataset::new(images, (0..n).map(|i| i % 4).collect(), 4, SplitTag::Train).unwrap()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let data = toy_set(100);
        let plan = SplitPlan::new(0.9, 0.1, 17);
        let (tr1, va1) = split_dataset(&data, &plan).unwrap();
        let (tr2, va2) = split_dataset(&data, &plan).unwrap();
        assert_eq!(tr1.len(), 90);
        assert_eq!(va1.len(), 10);
        assert_eq!(tr1.images.data(), tr2.images.data());
        assert_eq!(va1.labels, va2.labels);
    }

    #[test]
    fn split_partitions_without_duplicates() {
        let data = toy_set(40);
        let (tr, va) = split_dataset(&data, &SplitPlan::new(0.75, 0.25, 3)).unwrap();
        let mut seen: Vec<usize> = tr
            .images
            .data()
            .iter()
            .chain(va.images.data())
            .map(|&v| v as usize)
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn split_empty_side_is_domain_error() {
        let data = toy_set(10);
        assert!(split_dataset(&data, &SplitPlan::new(1.0, 0.0001, 1)).is_err());
    }

    #[test]
    fn subset_is_stratified_and_deterministic() {
        let data = toy_set(100);
        let s1 = subset(&data, 40, 9).unwrap();
        let s2 = subset(&data, 40, 9).unwrap();
        assert_eq!(s1.images.data(), s2.images.data());
        for class in 0..4 {
            assert_eq!(s1.labels.iter().filter(|&&l| l == class).count(), 10);
        }
    }

    #[test]
    fn subset_of_everything_is_a_permutation() {
        let data = toy_set(37);
        let s = subset(&data, 37, 2).unwrap();
        let mut vals: Vec<usize> = s.images.data().iter().map(|&v| v as usize).collect();
        vals.sort_unstable();
        assert_eq!(vals, (0..37).collect::<Vec<_>>());
    }

    #[test]
    fn subset_below_class_count_is_domain_error() {
        let data = toy_set(100);
        assert!(matches!(subset(&data, 3, 0), Err(Error::Domain(_))));
    }
}
