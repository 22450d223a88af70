//! CIFAR-10 ingestion and batching.
//!
//! Reads the published binary layout (one label byte followed by 3072 pixel
//! bytes in channel-planar RGB order, 10000 records per file) and stores
//! images row-major as `(batch, height, width, channels)` in `[0, 1]`.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;

use crate::config::ImageDims;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub mod synthetic;

pub const CIFAR10_CLASSES: usize = 10;
pub const RECORD_BYTES: usize = 1 + 32 * 32 * 3;
pub const RECORDS_PER_FILE: usize = 10_000;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILES: [&str; 1] = ["test_batch.bin"];

/// Images with their secret class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pixels: Vec<f32>,
    labels: Vec<usize>,
    dims: ImageDims,
    num_classes: usize,
}

impl ImageBatch {
    pub fn new(pixels: Vec<f32>, labels: Vec<usize>, dims: ImageDims, num_classes: usize) -> Result<Self> {
        if pixels.len() != labels.len() * dims.n() {
            return Err(Error::Shape(format!(
                "{} pixels for {} images of {} values",
                pixels.len(),
                labels.len(),
                dims.n()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Data(format!("pixel value {p} outside [0, 1]")));
        }
        if let Some(l) = labels.iter().find(|l| **l >= num_classes) {
            return Err(Error::Data(format!("label {l} outside 0..{num_classes}")));
        }
        Ok(ImageBatch {
            pixels,
            labels,
            dims,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// All pixels, `(batch, height, width, channels)` row-major.
    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.dims.n();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn select(&self, indices: &[usize]) -> ImageBatch {
        let n = self.dims.n();
        let mut pixels = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        ImageBatch {
            pixels,
            labels,
            dims: self.dims,
            num_classes: self.num_classes,
        }
    }

    /// Pixels as a `(batch, channels, height, width)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let d = self.dims;
        let t = Tensor::from_slice(&self.pixels, (self.len(), d.height, d.width, d.channels), device)?;
        Ok(t.permute((0, 3, 1, 2))?.contiguous()?.to_dtype(dtype)?)
    }

    /// Inverse of [`ImageBatch::to_tensor`].
    pub fn from_tensor(t: &Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (b, c, h, w) = t.dims4()?;
        if b != labels.len() {
            return Err(Error::Shape(format!("{b} images but {} labels", labels.len())));
        }
        let pixels = t
            .permute((0, 2, 3, 1))?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        let dims = ImageDims {
            height: h,
            width: w,
            channels: c,
        };
        Self::new(pixels, labels, dims, num_classes)
    }

    /// One-hot encoding of the labels, `(batch, L)`.
    pub fn one_hot(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let l = self.num_classes;
        let mut v = vec![0f32; self.len() * l];
        for (i, &c) in self.labels.iter().enumerate() {
            v[i * l + c] = 1.0;
        }
        Ok(Tensor::from_vec(v, (self.len(), l), device)?.to_dtype(dtype)?)
    }
}

/// Indicator vector of the true secret class.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotTarget {
    vector: Vec<f64>,
}

impl OneHotTarget {
    pub fn new(class: usize, num_classes: usize) -> Result<Self> {
        if class >= num_classes {
            return Err(Error::Data(format!("class {class} outside 0..{num_classes}")));
        }
        let mut vector = vec![0.0; num_classes];
        vector[class] = 1.0;
        Ok(OneHotTarget { vector })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.vector
    }

    pub fn class(&self) -> usize {
        self.vector.iter().position(|v| *v == 1.0).expect("exactly one entry is set")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn files(&self) -> &'static [&'static str] {
        match self {
            Split::Train => &TRAIN_FILES,
            Split::Test => &TEST_FILES,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: ImageBatch,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Accepts either the directory holding the `.bin` files or its parent (the
/// layout produced by extracting the published archive).
fn resolve_dir(path: &Path) -> PathBuf {
    let nested = path.join("cifar-10-batches-bin");
    if !path.join(TEST_FILES[0]).exists() && nested.is_dir() {
        nested
    } else {
        path.to_path_buf()
    }
}

/// Decodes CIFAR-10 binary records into `(pixels, labels)`.
pub fn decode_records(bytes: &[u8]) -> Result<(Vec<f32>, Vec<usize>)> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::Data(format!(
            "{} bytes is not a whole number of {RECORD_BYTES}-byte records",
            bytes.len()
        )));
    }
    let plane = 32 * 32;
    let records = bytes.len() / RECORD_BYTES;
    let mut pixels = Vec::with_capacity(records * 3 * plane);
    let mut labels = Vec::with_capacity(records);
    for rec in bytes.chunks_exact(RECORD_BYTES) {
        let label = rec[0] as usize;
        if label >= CIFAR10_CLASSES {
            return Err(Error::Data(format!("label byte {label} is not a CIFAR-10 class")));
        }
        labels.push(label);
        let body = &rec[1..];
        for i in 0..plane {
            for c in 0..3 {
                pixels.push(body[c * plane + i] as f32 / 255.0);
            }
        }
    }
    Ok((pixels, labels))
}

/// Encodes images into CIFAR-10 binary records. Pixels are rounded to bytes.
pub fn encode_records(batch: &ImageBatch) -> Result<Vec<u8>> {
    if batch.dims() != ImageDims::CIFAR10 || batch.num_classes() > 256 {
        return Err(Error::Data("only 32x32x3 images can be written as CIFAR records".into()));
    }
    let plane = 32 * 32;
    let mut out = Vec::with_capacity(batch.len() * RECORD_BYTES);
    for (i, &label) in batch.labels().iter().enumerate() {
        out.push(label as u8);
        let img = batch.image(i);
        for c in 0..3 {
            for p in 0..plane {
                out.push((img[p * 3 + c] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(out)
}

/// Loads a CIFAR-10 split, optionally reduced to a class-balanced prefix.
pub fn load_dataset(path: impl AsRef<Path>, split: Split, subset_size: Option<usize>) -> Result<Dataset> {
    let dir = resolve_dir(path.as_ref());
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in split.files() {
        let file = dir.join(name);
        let bytes = std::fs::read(&file).map_err(|e| Error::io(&file, e))?;
        if bytes.len() != RECORDS_PER_FILE * RECORD_BYTES {
            return Err(Error::Data(format!(
                "{}: expected {RECORDS_PER_FILE} records, found {} bytes",
                file.display(),
                bytes.len()
            )));
        }
        let (p, l) = decode_records(&bytes).map_err(|e| Error::Data(format!("{}: {e}", file.display())))?;
        pixels.extend(p);
        labels.extend(l);
    }
    let images = ImageBatch::new(pixels, labels, ImageDims::CIFAR10, CIFAR10_CLASSES)?;
    let images = match subset_size {
        Some(size) => balanced_subset(&images, size)?,
        None => images,
    };
    log::info!("loaded {:?} split: {} images from {}", split, images.len(), dir.display());
    Ok(Dataset { images, split })
}

/// The first `size / L` images of every class in file order; the remainder
/// `size % L` goes to the lowest classes.
pub fn balanced_subset(images: &ImageBatch, size: usize) -> Result<ImageBatch> {
    let l = images.num_classes();
    let quota: Vec<usize> = (0..l).map(|c| size / l + usize::from(c < size % l)).collect();
    let mut taken = vec![0usize; l];
    let mut picked = Vec::with_capacity(size);
    for (i, &c) in images.labels().iter().enumerate() {
        if picked.len() == size {
            break;
        }
        if taken[c] < quota[c] {
            taken[c] += 1;
            picked.push(i);
        }
    }
    if picked.len() < size {
        return Err(Error::Data(format!(
            "cannot draw a balanced subset of {size} from {} images",
            images.len()
        )));
    }
    picked.sort_unstable();
    Ok(images.select(&picked))
}

/// How a pass over a dataset is cut into batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    /// `(seed, epoch)` of the permutation; `None` keeps dataset order.
    pub shuffle: Option<(u64, u64)>,
    pub drop_last: bool,
}

impl BatchPlan {
    /// Seeded permutation, partial tail dropped.
    pub fn training(batch_size: usize, seed: u64, epoch: u64) -> Self {
        BatchPlan {
            batch_size,
            shuffle: Some((seed, epoch)),
            drop_last: true,
        }
    }

    /// Dataset order, every image exactly once.
    pub fn evaluation(batch_size: usize) -> Self {
        BatchPlan {
            batch_size,
            shuffle: None,
            drop_last: false,
        }
    }

    pub fn num_batches(&self, len: usize) -> usize {
        if self.drop_last {
            len / self.batch_size
        } else {
            len.div_ceil(self.batch_size)
        }
    }

    /// Index groups for one pass over `len` items.
    pub fn index_batches(&self, len: usize) -> Vec<Vec<usize>> {
        assert!(self.batch_size >= 1, "batch size must be positive");
        let mut order: Vec<usize> = (0..len).collect();
        if let Some((seed, epoch)) = self.shuffle {
            order.shuffle(&mut rng::stream(seed, Stream::Shuffle, epoch));
        }
        order
            .chunks(self.batch_size)
            .filter(|c| !self.drop_last || c.len() == self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }
}

/// Materialises the batches of `plan` lazily.
pub fn batch_iterator<'a>(images: &'a ImageBatch, plan: BatchPlan) -> impl Iterator<Item = ImageBatch> + 'a {
    plan.index_batches(images.len())
        .into_iter()
        .map(move |idx| images.select(&idx))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> ImageBatch {
        let dims = ImageDims {
            height: 2,
            width: 2,
            channels: 1,
        };
        let pixels = (0..n * 4).map(|i| (i % 7) as f32 / 7.0).collect();
        let labels = (0..n).map(|i| i % 10).collect();
        ImageBatch::new(pixels, labels, dims, 10).unwrap()
    }

    #[test]
    fn byte_endpoints_rescale() {
        let mut rec = vec![3u8];
        rec.extend(std::iter::repeat_n(255u8, 1024));
        rec.extend(std::iter::repeat_n(0u8, 2048));
        let (p, l) = decode_records(&rec).unwrap();
        assert_eq!(l, vec![3]);
        // channel-planar input becomes interleaved (h, w, c)
        assert_eq!(&p[..6], &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(p.iter().all(|v| *v == 0.0 || *v == 1.0));
    }

    #[test]
    fn records_round_trip() {
        let mut rec = vec![7u8];
        rec.extend((0..3072).map(|i| (i % 251) as u8));
        let (p, l) = decode_records(&rec).unwrap();
        let batch = ImageBatch::new(p, l, ImageDims::CIFAR10, 10).unwrap();
        assert_eq!(encode_records(&batch).unwrap(), rec);
    }

    #[test]
    fn rejects_corrupt_records() {
        assert!(decode_records(&[0u8; RECORD_BYTES + 1]).is_err());
        let mut rec = vec![10u8];
        rec.extend([0u8; 3072]);
        assert!(decode_records(&rec).is_err());
    }

    #[test]
    fn missing_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path(), Split::Test, None).unwrap_err();
        assert!(err.to_string().contains("test_batch.bin"), "{err}");
    }

    #[test]
    fn training_batch_count_drops_tail() {
        let plan = BatchPlan::training(128, 0, 0);
        assert_eq!(plan.num_batches(50_000), 50_000 / 128);
        assert_eq!(plan.index_batches(50_000).len(), 390);
        let eval = BatchPlan::evaluation(128);
        let batches = eval.index_batches(1000);
        assert_eq!(batches.len(), 8);
        assert_eq!(batches.last().unwrap().len(), 1000 - 7 * 128);
    }

    #[test]
    fn shuffle_is_seeded() {
        let a = BatchPlan::training(4, 11, 2).index_batches(40);
        let b = BatchPlan::training(4, 11, 2).index_batches(40);
        let c = BatchPlan::training(4, 11, 3).index_batches(40);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn whole_set_batch() {
        let data = toy(25);
        let batches: Vec<_> = batch_iterator(&data, BatchPlan::training(25, 1, 0)).collect();
        assert_eq!(batches.len(), 1);
        let mut labels = batches[0].labels().to_vec();
        labels.sort_unstable();
        let mut expected = data.labels().to_vec();
        expected.sort_unstable();
        assert_eq!(labels, expected);
    }

    #[test]
    fn evaluation_visits_each_image_once() {
        let data = toy(37);
        let mut seen = vec![0; 37];
        for idx in BatchPlan::evaluation(8).index_batches(37) {
            for i in idx {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|c| *c == 1));
        let _ = data;
    }

    #[test]
    fn balanced_subset_counts() {
        let data = toy(200);
        let sub = balanced_subset(&data, 50).unwrap();
        let mut counts = [0; 10];
        for &l in sub.labels() {
            counts[l] += 1;
        }
        assert_eq!(counts, [5; 10]);
        assert!(balanced_subset(&data, 201).is_err());
    }

    #[test]
    fn tensor_layout_round_trip() {
        let data = toy(3);
        let t = data.to_tensor(DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[3, 1, 2, 2]);
        let back = ImageBatch::from_tensor(&t, data.labels().to_vec(), 10).unwrap();
        assert_eq!(back, data);
        let oh = data.one_hot(DType::F64, &Device::Cpu).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(oh[1][1], 1.0);
        assert_eq!(oh[1].iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn one_hot_target() {
        let t = OneHotTarget::new(7, 10).unwrap();
        assert_eq!(t.as_slice().iter().sum::<f64>(), 1.0);
        assert_eq!(t.class(), 7);
        assert!(OneHotTarget::new(10, 10).is_err());
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        let dims = ImageDims {
            height: 1,
            width: 1,
            channels: 1,
        };
        assert!(ImageBatch::new(vec![1.5], vec![0], dims, 2).is_err());
        assert!(ImageBatch::new(vec![0.5], vec![2], dims, 2).is_err());
        assert!(ImageBatch::new(vec![0.5, 0.5], vec![0], dims, 2).is_err());
    }
}
