//! Datasets: CIFAR binary loading, a compact raw tensor format, synthetic
//! blob data for fast end-to-end runs, and the batching/augmentation helpers
//! used by training.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Labeled image set. Images are `[N, C, H, W]` with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset<S> {
    pub images: Tensor<S>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(images: Tensor<S>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Dimension(format!(
                "dataset images must be [N,C,H,W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "{} images vs {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Format(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copies the selected samples into a fresh `[B, C, H, W]` batch.
    pub fn gather(&self, idxs: &[usize]) -> Result<(Tensor<S>, Vec<usize>)> {
        let s = self.images.shape();
        let per = s[1] * s[2] * s[3];
        let mut data = Vec::with_capacity(idxs.len() * per);
        let mut labels = Vec::with_capacity(idxs.len());
        for &i in idxs {
            if i >= self.len() {
                return Err(Error::Contract(format!(
                    "sample index {i} out of range for {} samples",
                    self.len()
                )));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let images = Tensor::new(vec![idxs.len(), s[1], s[2], s[3]], data)?;
        Ok((images, labels))
    }
}

// ---------------------------------------------------------------------------
// CIFAR binary format
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    /// One label byte per record, 10 classes.
    C10,
    /// Coarse + fine label bytes per record; the fine label (100 classes) is
    /// kept.
    C100,
}

const CIFAR_PIXELS: usize = 3 * 32 * 32;

/// Reads one or more concatenated CIFAR binary records (`label byte(s)` +
/// 3072 channel-major pixel bytes). A file that ends mid-record is a format
/// error naming the offending byte offset.
pub fn load_cifar_binary<S: Scalar>(path: &Path, variant: CifarVariant) -> Result<Dataset<S>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let label_bytes = match variant {
        CifarVariant::C10 => 1,
        CifarVariant::C100 => 2,
    };
    let record = label_bytes + CIFAR_PIXELS;
    if bytes.len() % record != 0 {
        let n = bytes.len() / record;
        return Err(Error::Format(format!(
            "CIFAR file {} is truncated: {} bytes is not a whole number of {}-byte records \
             (record {} ends at byte {})",
            path.display(),
            bytes.len(),
            record,
            n,
            n * record,
        )));
    }
    let n = bytes.len() / record;
    let num_classes = match variant {
        CifarVariant::C10 => 10,
        CifarVariant::C100 => 100,
    };
    let inv = S::from_f(1.0 / 255.0);
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * CIFAR_PIXELS);
    for r in 0..n {
        let rec = &bytes[r * record..(r + 1) * record];
        let label = rec[label_bytes - 1] as usize;
        if label >= num_classes {
            return Err(Error::Format(format!(
                "record {r}: label {label} out of range for {num_classes} classes"
            )));
        }
        labels.push(label);
        data.extend(
            rec[label_bytes..]
                .iter()
                .map(|&b| S::from_usize(b as usize).unwrap() * inv),
        );
    }
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], data)?, labels, num_classes)
}

// ---------------------------------------------------------------------------
// Raw tensor dataset format
// ---------------------------------------------------------------------------

pub const DATASET_MAGIC: [u8; 4] = *b"LSDT";
pub const DATASET_VERSION: u32 = 1;

/// Writes a dataset as `LSDT` (little-endian): magic, version, `N C H W`,
/// the f32 image payload, then one `u32` label per sample.
pub fn save_dataset<S: Scalar>(ds: &Dataset<S>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    for &d in ds.images.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in ds.images.data() {
        w.write_all(&(v.to_f() as f32).to_le_bytes())?;
    }
    for &l in &ds.labels {
        w.write_all(&(l as u32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset<S: Scalar>(path: &Path) -> Result<Dataset<S>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut read = |buf: &mut [u8], what: &str| -> Result<()> {
        r.read_exact(buf)
            .map_err(|e| Error::Format(format!("dataset truncated while reading {what}: {e}")))
    };
    let mut magic = [0u8; 4];
    read(&mut magic, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(Error::Format(format!(
            "bad dataset magic {magic:?}, expected {DATASET_MAGIC:?}"
        )));
    }
    let mut b4 = [0u8; 4];
    read(&mut b4, "version")?;
    let version = u32::from_le_bytes(b4);
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        read(&mut b4, &format!("dimension {i}"))?;
        *d = u32::from_le_bytes(b4) as usize;
    }
    let [n, c, h, w] = dims;
    let mut data = Vec::with_capacity(n * c * h * w);
    for _ in 0..n * c * h * w {
        read(&mut b4, "image payload")?;
        data.push(S::from_f(f32::from_le_bytes(b4) as f64));
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        read(&mut b4, "labels")?;
        labels.push(u32::from_le_bytes(b4) as usize);
    }
    let num_classes = labels.iter().max().map_or(1, |&m| m + 1);
    Dataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, num_classes)
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Gaussian blobs around per-class centroids placed at
/// `clamp(0.5 +- (separation/2) * unit, 0, 1)`. With `noise` well below
/// `separation` the classes are nearest-centroid separable, which makes this
/// a fast sanity dataset for end-to-end training.
pub fn synthetic_blobs<S: Scalar>(
    n: usize,
    num_classes: usize,
    c: usize,
    h: usize,
    w: usize,
    separation: f64,
    noise: f64,
    seed: u64,
) -> Result<Dataset<S>> {
    if num_classes < 2 {
        return Err(Error::config("num_classes", "need at least two blob classes"));
    }
    let dim = c * h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        centroids.push(
            dir.iter()
                .map(|v| (0.5 + 0.5 * separation * v / norm).clamp(0.0, 1.0))
                .collect::<Vec<f64>>(),
        );
    }
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % num_classes;
        labels.push(label);
        for j in 0..dim {
            let g: f64 = rng.sample(StandardNormal);
            data.push(S::from_f((centroids[label][j] + noise * g).clamp(0.0, 1.0)));
        }
    }
    Dataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, num_classes)
}

// ---------------------------------------------------------------------------
// Augmentation and batching
// ---------------------------------------------------------------------------

/// Zero-pads each image by `pad` pixels on every side and crops back to the
/// original size at a random offset (per sample).
pub fn random_crop_pad<S: Scalar>(images: &Tensor<S>, pad: usize, seed: u64) -> Result<Tensor<S>> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::Dimension(format!(
            "random_crop_pad expects [N,C,H,W], got {s:?}"
        )));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if pad == 0 {
        return Ok(images.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Tensor::zeros(s.to_vec());
    for ni in 0..n {
        // offsets into the padded image; 0..=2*pad per axis
        let oy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        let ox = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        for ci in 0..c {
            for i in 0..h {
                let sy = i as isize + oy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for j in 0..w {
                    let sx = j as isize + ox;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = ((ni * c + ci) * h + i) * w + j;
                    let src = ((ni * c + ci) * h + sy as usize) * w + sx as usize;
                    out.data_mut()[dst] = images.data()[src];
                }
            }
        }
    }
    Ok(out)
}

/// Seeded shuffled batch index plan. Every sample appears exactly once; the
/// final batch may be short.
pub fn batch_plan(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch_size must be positive".into()));
    }
    if batch_size > n {
        return Err(Error::Contract(format!(
            "batch_size {batch_size} exceeds dataset size {n}"
        )));
    }
    let mut idxs: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idxs.swap(i, j);
    }
    Ok(idxs.chunks(batch_size).map(|c| c.to_vec()).collect())
}
