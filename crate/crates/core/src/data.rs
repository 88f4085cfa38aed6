//! Labeled datasets: synthetic stripe images, IDX and CIFAR-10 binary
//! parsing, and seeded batching.
//!
//! Images are stored with mode 1 as the pixel row and mode 2 as the column,
//! so pixel `(r, c)` sits at feature offset `r + rows * c`. Both file formats
//! store rows contiguously, so loading transposes each image.

use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, Matrix};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_LEN: usize = 1 + CIFAR_PIXELS;
const CIFAR_SIDE: usize = 32;
const CIFAR_CHANNELS: usize = 3;
const CIFAR_PIXELS: usize = CIFAR_SIDE * CIFAR_SIDE * CIFAR_CHANNELS;
const CIFAR_CLASSES: usize = 10;

pub const SYNTHETIC_SIDE: usize = 28;
pub const SYNTHETIC_CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    samples: Matrix,
    labels: Vec<usize>,
    sample_shape: Vec<usize>,
    class_count: usize,
}

impl LabeledDataset {
    pub fn new(samples: Matrix, labels: Vec<usize>, sample_shape: Vec<usize>, class_count: usize) -> Result<Self> {
        if samples.ncols() != labels.len() {
            return Err(Error::CountMismatch { images: samples.ncols(), labels: labels.len() });
        }
        let dim: usize = sample_shape.iter().product();
        if sample_shape.is_empty() || dim != samples.nrows() {
            return Err(Error::InvalidShape(format!(
                "sample shape {sample_shape:?} does not describe {} features",
                samples.nrows()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::LabelOutOfRange { label, classes: class_count });
        }
        Ok(Self { samples, labels, sample_shape, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.samples.nrows()
    }

    /// `feature_dim x M`, one vectorized sample per column.
    pub fn samples(&self) -> &Matrix {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Sample `j` as a tensor of the sample shape.
    pub fn sample(&self, j: usize) -> DenseTensor {
        DenseTensor::new(self.sample_shape.clone(), self.samples.column(j).iter().copied().collect())
            .expect("shape checked at construction")
    }

    /// The columns and labels at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> (Matrix, Vec<usize>) {
        let x = self.samples.select_columns(indices);
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    /// The first `count` samples (or all of them, if fewer).
    pub fn head(&self, count: usize) -> Self {
        let count = count.min(self.len());
        Self {
            samples: self.samples.columns(0, count).into_owned(),
            labels: self.labels[..count].to_vec(),
            sample_shape: self.sample_shape.clone(),
            class_count: self.class_count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Selected rows are set.
    Sd1,
    /// Selected columns are set.
    Sd2,
}

/// 28x28 images, zero except for `k` randomly chosen full rows (SD1) or
/// columns (SD2) set to one; `k` is uniform on `1..=10` and the label is
/// `k - 1`.
pub fn gen_synthetic(kind: SyntheticKind, count: usize, seed: u64) -> Result<LabeledDataset> {
    if count == 0 {
        return Err(Error::Config("synthetic dataset needs at least one sample".into()));
    }
    let side = SYNTHETIC_SIDE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Matrix::zeros(side * side, count);
    let mut labels = Vec::with_capacity(count);
    for j in 0..count {
        let k = rng.random_range(1..=SYNTHETIC_CLASSES);
        let mut col = samples.column_mut(j);
        for line in index::sample(&mut rng, side, k) {
            for other in 0..side {
                let (r, c) = match kind {
                    SyntheticKind::Sd1 => (line, other),
                    SyntheticKind::Sd2 => (other, line),
                };
                col[r + side * c] = 1.0;
            }
        }
        labels.push(k - 1);
    }
    LabeledDataset::new(samples, labels, vec![side, side], SYNTHETIC_CLASSES)
}

/// Seeded partition of `0..count` into batches of `size` (0 means one batch).
/// The permutation depends on `(seed, epoch)` only; the last batch may be short.
pub fn batches(count: usize, size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng);
    if count == 0 {
        return Vec::new();
    }
    let size = if size == 0 { count } else { size };
    order.chunks(size).map(<[usize]>::to_vec).collect()
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Truncated { needed: at + 4, found: bytes.len() })
}

/// Decoded IDX image file: `dims[0]` items, each of shape `dims[1..]`, raw
/// bytes in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub dims: Vec<usize>,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic { found: magic, expected: IDX_IMAGES_MAGIC });
    }
    let rank = (IDX_IMAGES_MAGIC & 0xff) as usize;
    let dims = (0..rank)
        .map(|d| read_u32(bytes, 4 + 4 * d).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * rank;
    let body = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Malformed(format!("IDX dimensions {dims:?} overflow")))?;
    let needed = header
        .checked_add(body)
        .ok_or_else(|| Error::Malformed(format!("IDX dimensions {dims:?} overflow")))?;
    if bytes.len() < needed {
        return Err(Error::Truncated { needed, found: bytes.len() });
    }
    if bytes.len() > needed {
        return Err(Error::Malformed(format!("{} trailing bytes after IDX image data", bytes.len() - needed)));
    }
    if dims[1..].contains(&0) {
        return Err(Error::Malformed("IDX image dimension of zero".into()));
    }
    Ok(IdxImages { dims, pixels: bytes[header..].to_vec() })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic { found: magic, expected: IDX_LABELS_MAGIC });
    }
    let count = read_u32(bytes, 4)? as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(Error::Truncated { needed, found: bytes.len() });
    }
    if bytes.len() > needed {
        return Err(Error::Malformed(format!("{} trailing bytes after IDX labels", bytes.len() - needed)));
    }
    Ok(bytes[8..].to_vec())
}

/// Builds a dataset from decoded IDX parts. Class count is the largest label
/// plus one.
pub fn idx_dataset(images: &IdxImages, labels: &[u8]) -> Result<LabeledDataset> {
    let count = images.dims[0];
    if count != labels.len() {
        return Err(Error::CountMismatch { images: count, labels: labels.len() });
    }
    let shape = images.dims[1..].to_vec();
    let dim: usize = shape.iter().product();
    let layout = row_major_to_tensor_offsets(&shape);
    let mut samples = Matrix::zeros(dim, count);
    for (j, mut col) in samples.column_iter_mut().enumerate() {
        let src = &images.pixels[j * dim..(j + 1) * dim];
        for (p, &byte) in src.iter().enumerate() {
            col[layout[p]] = f64::from(byte) / 255.0;
        }
    }
    let labels: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    LabeledDataset::new(samples, labels, shape, classes)
}

/// For each position of a row-major (last index fastest) buffer, the offset
/// of the same multi-index in the tensor linearization (first index fastest).
fn row_major_to_tensor_offsets(shape: &[usize]) -> Vec<usize> {
    let len: usize = shape.iter().product();
    let mut out = Vec::with_capacity(len);
    let mut index = vec![0usize; shape.len()];
    for _ in 0..len {
        let mut offset = 0;
        let mut stride = 1;
        for (&i, &size) in index.iter().zip(shape) {
            offset += i * stride;
            stride *= size;
        }
        out.push(offset);
        for d in (0..shape.len()).rev() {
            index[d] += 1;
            if index[d] < shape[d] {
                break;
            }
            index[d] = 0;
        }
    }
    out
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let images = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    idx_dataset(&images, &labels)
}

/// Encodes a dataset as IDX image and label files. Features are mapped back
/// to bytes by `round(255 v)`, clamped to `0..=255`.
pub fn encode_idx(ds: &LabeledDataset) -> Result<(Vec<u8>, Vec<u8>)> {
    if ds.sample_shape().len() != 2 {
        return Err(Error::InvalidShape("IDX export supports two-dimensional samples".into()));
    }
    if ds.class_count() > 256 {
        return Err(Error::Config("IDX labels are single bytes".into()));
    }
    let count = u32::try_from(ds.len()).map_err(|_| Error::Config("too many samples for IDX".into()))?;
    let mut images = Vec::with_capacity(16 + ds.len() * ds.feature_dim());
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&count.to_be_bytes());
    for &d in ds.sample_shape() {
        images.extend_from_slice(&(d as u32).to_be_bytes());
    }
    let layout = row_major_to_tensor_offsets(ds.sample_shape());
    for col in ds.samples().column_iter() {
        images.extend(layout.iter().map(|&k| (col[k] * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&count.to_be_bytes());
    labels.extend(ds.labels().iter().map(|&l| l as u8));
    Ok((images, labels))
}

pub fn write_idx(ds: &LabeledDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (images, labels) = encode_idx(ds)?;
    fs::write(images_path, images)?;
    fs::write(labels_path, labels)?;
    Ok(())
}

/// Decodes CIFAR-10 binary records into labels and `(32, 32, 3)` samples,
/// channel on mode 3.
pub fn parse_cifar10(bytes: &[u8]) -> Result<(Vec<usize>, Matrix)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_LEN) {
        return Err(Error::Malformed(format!(
            "CIFAR-10 file of {} bytes is not a whole number of {CIFAR_RECORD_LEN}-byte records",
            bytes.len()
        )));
    }
    let count = bytes.len() / CIFAR_RECORD_LEN;
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut labels = Vec::with_capacity(count);
    let mut samples = Matrix::zeros(CIFAR_PIXELS, count);
    for (j, record) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
        let label = usize::from(record[0]);
        if label >= CIFAR_CLASSES {
            return Err(Error::LabelOutOfRange { label, classes: CIFAR_CLASSES });
        }
        labels.push(label);
        let mut col = samples.column_mut(j);
        for (p, &byte) in record[1..].iter().enumerate() {
            let (ch, rest) = (p / plane, p % plane);
            let (r, c) = (rest / CIFAR_SIDE, rest % CIFAR_SIDE);
            col[r + CIFAR_SIDE * c + plane * ch] = f64::from(byte) / 255.0;
        }
    }
    Ok((labels, samples))
}

/// Concatenates one or more CIFAR-10 batch files.
pub fn load_cifar10<P: AsRef<Path>>(paths: &[P]) -> Result<LabeledDataset> {
    let mut labels = Vec::new();
    let mut parts = Vec::new();
    for path in paths {
        let (l, s) = parse_cifar10(&fs::read(path)?)?;
        labels.extend(l);
        parts.push(s);
    }
    let total: usize = parts.iter().map(|p| p.ncols()).sum();
    let mut samples = Matrix::zeros(CIFAR_PIXELS, total);
    let mut at = 0;
    for p in parts {
        samples.columns_mut(at, p.ncols()).copy_from(&p);
        at += p.ncols();
    }
    LabeledDataset::new(samples, labels, vec![CIFAR_SIDE, CIFAR_SIDE, CIFAR_CHANNELS], CIFAR_CLASSES)
}
