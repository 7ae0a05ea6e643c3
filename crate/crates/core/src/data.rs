//! Image datasets: IDX and CIFAR-10 binary loaders, synthetic blobs, and
//! seeded batching.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[n, channels, h, w]`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split: &str) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Contract(format!(
                "dataset needs [n, c, h, w] images matching {} labels, got {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Index {
                op: "dataset label",
                index: bad,
                len: num_classes,
            });
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract("image values must lie in [0, 1]".into()));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            split: split.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[channels, h, w]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Copies the listed examples into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let [c, h, w] = self.image_shape();
        let size = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * size);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * size..(i + 1) * size]);
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let images = Tensor::new(&[indices.len(), c, h, w], data).expect("consistent batch shape");
        (images, labels)
    }

    /// The first `n` examples (all of them if `n` exceeds the size).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let indices: Vec<usize> = (0..n).collect();
        let (images, labels) = self.batch(&indices);
        Dataset {
            images,
            labels,
            num_classes: self.num_classes,
            split: self.split.clone(),
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::DataIo {
        path: path.to_path_buf(),
        source,
    })
}

fn format_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

/// Parses an IDX header with the given magic, returning the dimensions and
/// the payload offset.
fn idx_header(path: &Path, bytes: &[u8], magic: u32) -> Result<(Vec<usize>, usize)> {
    let word = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| format_err(path, bytes.len(), "truncated header"))
    };
    let found = word(0)?;
    if found != magic {
        return Err(format_err(
            path,
            0,
            format!("expected magic {magic:#010x}, found {found:#010x}"),
        ));
    }
    let rank = (magic & 0xff) as usize;
    let dims = (0..rank)
        .map(|i| word(4 + 4 * i).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let offset = 4 + 4 * rank;
    let expected: usize = dims.iter().product();
    if bytes.len() - offset != expected {
        return Err(format_err(
            path,
            bytes.len().min(offset + expected),
            format!(
                "payload holds {} bytes, header promises {expected}",
                bytes.len() - offset
            ),
        ));
    }
    Ok((dims, offset))
}

/// Loads an IDX image/label pair (MNIST layout). Pixels are scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read(images_path)?;
    let (dims, off) = idx_header(images_path, &img, 0x0000_0803)?;
    let lab = read(labels_path)?;
    let (ldims, loff) = idx_header(labels_path, &lab, 0x0000_0801)?;
    if ldims[0] != dims[0] {
        return Err(format_err(
            labels_path,
            4,
            format!("{} labels for {} images", ldims[0], dims[0]),
        ));
    }
    let labels: Vec<usize> = lab[loff..].iter().map(|&b| b as usize).collect();
    // IDX files carry no class count; digits give at least ten.
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    let pixels = img[off..].iter().map(|&b| f64::from(b) / 255.0).collect();
    let images = Tensor::new(&[dims[0], 1, dims[1], dims[2]], pixels)?;
    Dataset::new(images, labels, num_classes, "idx")
}

const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Loads CIFAR-10 binary batch files: each record is a label byte followed
/// by 3072 channel-major pixel bytes.
pub fn load_cifar_binary(paths: &[PathBuf]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read(path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
            return Err(format_err(
                path,
                whole,
                format!("file length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
            ));
        }
        for (r, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            if record[0] > 9 {
                return Err(format_err(path, r * CIFAR_RECORD, format!("label byte {}", record[0])));
            }
            labels.push(record[0] as usize);
            pixels.extend(record[1..].iter().map(|&b| f64::from(b) / 255.0));
        }
    }
    let n = labels.len();
    let images = Tensor::new(&[n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?;
    Dataset::new(images, labels, 10, "cifar")
}

/// Gaussian blobs at a class-specific location on a circle around the
/// image centre, plus per-pixel Gaussian noise, clamped to `[0, 1]`.
/// Labels cycle through the classes.
pub fn synthetic_blobs(n: usize, classes: usize, image_size: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config(format!(
            "synthetic data needs >= 2 classes, got {classes}"
        )));
    }
    if image_size < 2 || !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Config(format!(
            "synthetic data needs image_size >= 2 and finite noise >= 0, got {image_size} and {noise}"
        )));
    }
    let s = image_size as f64;
    let sigma = s / 6.0;
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            let angle = std::f64::consts::TAU * c as f64 / classes as f64;
            let cy = 0.5 * (s - 1.0) + 0.3 * s * angle.sin();
            let cx = 0.5 * (s - 1.0) + 0.3 * s * angle.cos();
            (0..image_size * image_size)
                .map(|i| {
                    let (y, x) = ((i / image_size) as f64, (i % image_size) as f64);
                    let r2 = (y - cy).powi(2) + (x - cx).powi(2);
                    (-r2 / (2.0 * sigma * sigma)).exp()
                })
                .collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut pixels = Vec::with_capacity(n * image_size * image_size);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for &label in &labels {
        for &t in &templates[label] {
            let z: f64 = normal.sample(&mut rng);
            pixels.push((t + noise * z).clamp(0.0, 1.0));
        }
    }
    let images = Tensor::new(&[n, 1, image_size, image_size], pixels)?;
    Dataset::new(images, labels, classes, "synthetic")
}

/// Shuffled index batches for one epoch. The permutation depends only on
/// `(seed, epoch)`; the last batch may be short.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_add(1));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Per-class first-`per_class` subset, keeping the original order.
pub fn stratified_take(data: &Dataset, per_class: usize) -> Dataset {
    let mut counts = vec![0; data.num_classes];
    let indices: Vec<usize> = (0..data.len())
        .filter(|&i| {
            let c = &mut counts[data.labels[i]];
            *c += 1;
            *c <= per_class
        })
        .collect();
    let (images, labels) = data.batch(&indices);
    Dataset {
        images,
        labels,
        num_classes: data.num_classes,
        split: data.split.clone(),
    }
}

/// Images with independent uniform `[0, 1)` pixels.
pub fn uniform_images<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random::<f64>()).collect()).expect("shape product")
}
