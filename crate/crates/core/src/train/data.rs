//! IDX (MNIST) ingestion and a synthetic separable dataset.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub const MNIST_MEAN: f64 = 0.1307;
pub const MNIST_STD: f64 = 0.3081;

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Images as `C×H×W` tensors with integer class labels.
#[derive(Clone, Debug, Default)]
pub struct LabeledImages {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// First `n` samples (all of them when `n` exceeds the size).
    pub fn truncated(mut self, n: usize) -> Self {
        self.images.truncate(n);
        self.labels.truncate(n);
        self
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format(format!("truncated IDX header in {what}")))
}

/// Raw IDX image file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "image file")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = be_u32(bytes, 4, "image file")? as usize;
    let rows = be_u32(bytes, 8, "image file")? as usize;
    let cols = be_u32(bytes, 12, "image file")? as usize;
    let need = count * rows * cols;
    let pixels = &bytes[16..];
    if pixels.len() < need {
        return Err(Error::Format(format!(
            "truncated IDX image data: {} bytes for {count} images of {rows}x{cols}",
            pixels.len()
        )));
    }
    Ok((count, rows, cols, &pixels[..need]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "label file")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let count = be_u32(bytes, 4, "label file")? as usize;
    let labels = &bytes[8..];
    if labels.len() < count {
        return Err(Error::Format(format!("truncated IDX labels: {} of {count}", labels.len())));
    }
    Ok(labels[..count].iter().map(|&b| b as usize).collect())
}

/// Pixel byte to the normalized input value: `(p/255 - mean) / std`.
pub fn normalize_pixel(p: u8) -> f64 {
    (p as f64 / 255.0 - MNIST_MEAN) / MNIST_STD
}

/// Loads an IDX image/label pair as `1×H×W` normalized tensors.
pub fn load_idx(images: &Path, labels: &Path) -> Result<LabeledImages> {
    let read = |p: &Path| {
        fs::read(p).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display()))))
    };
    let image_bytes = read(images)?;
    let label_bytes = read(labels)?;
    let (count, rows, cols, pixels) = parse_idx_images(&image_bytes)?;
    let labels = parse_idx_labels(&label_bytes)?;
    if labels.len() != count {
        return Err(Error::Format(format!(
            "{count} images but {} labels",
            labels.len()
        )));
    }
    let per = rows * cols;
    let images = pixels
        .chunks_exact(per)
        .map(|px| Tensor::from_parts(vec![1, rows, cols], px.iter().map(|&p| normalize_pixel(p)).collect()))
        .collect();
    Ok(LabeledImages { images, labels })
}

/// MNIST train and validation splits from a directory holding the four
/// standard IDX files. The validation split comes from the test files.
pub fn load_mnist(dir: &Path, train_size: Option<usize>, val_size: Option<usize>) -> Result<(LabeledImages, LabeledImages)> {
    let train = load_idx(&dir.join(MNIST_TRAIN_IMAGES), &dir.join(MNIST_TRAIN_LABELS))?;
    let val = load_idx(&dir.join(MNIST_TEST_IMAGES), &dir.join(MNIST_TEST_LABELS))?;
    let train = match train_size {
        Some(n) => train.truncated(n),
        None => train,
    };
    let val = match val_size {
        Some(n) => val.truncated(n),
        None => val,
    };
    Ok((train, val))
}

/// Noise plus a bright horizontal band whose position encodes the class.
/// Band sums separate the classes linearly with a wide margin.
pub fn synthetic(count: usize, channels: usize, height: usize, width: usize, classes: usize, seed: u64) -> Result<LabeledImages> {
    if classes == 0 || classes > height {
        return Err(Error::Invalid(format!("cannot draw {classes} bands on a height-{height} image")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let band = height / classes;
    let mut out = LabeledImages::default();
    for i in 0..count {
        let label = i % classes;
        let img = Tensor::from_fn(&[channels, height, width], |idx| {
            let noise = rng.random_range(-0.25..0.25);
            let in_band = idx[1] / band == label || (label == classes - 1 && idx[1] >= band * classes);
            noise + if in_band { 1.0 } else { 0.0 }
        });
        out.images.push(img);
        out.labels.push(label);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(count: u32, rows: u32, cols: u32) -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&count.to_be_bytes());
        img.extend_from_slice(&rows.to_be_bytes());
        img.extend_from_slice(&cols.to_be_bytes());
        for i in 0..count * rows * cols {
            img.push((i % 256) as u8);
        }
        let mut lab = Vec::new();
        lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&count.to_be_bytes());
        lab.extend((0..count).map(|i| (i % 10) as u8));
        (img, lab)
    }

    fn write_pair(dir: &Path, img: &[u8], lab: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let (ip, lp) = (dir.join("img"), dir.join("lab"));
        fs::write(&ip, img).unwrap();
        fs::write(&lp, lab).unwrap();
        (ip, lp)
    }

    #[test]
    fn loads_well_formed_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = fixture(4, 28, 28);
        let (ip, lp) = write_pair(dir.path(), &img, &lab);
        let data = load_idx(&ip, &lp).unwrap();
        assert_eq!(data.len(), 4);
        assert!(data.images.iter().all(|t| t.shape() == [1, 28, 28]));
        assert_eq!(data.labels, vec![0, 1, 2, 3]);
    }

    #[test]
    fn rejects_wrong_magic() {
        let (mut img, _) = fixture(1, 2, 2);
        img[3] = 0x02;
        assert!(matches!(parse_idx_images(&img), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_truncation_and_count_mismatch() {
        let (img, lab) = fixture(3, 4, 4);
        assert!(matches!(parse_idx_images(&img[..img.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(parse_idx_images(&img[..10]), Err(Error::Format(_))));
        assert!(matches!(parse_idx_labels(&lab[..lab.len() - 1]), Err(Error::Format(_))));
        let dir = tempfile::tempdir().unwrap();
        let (_, other_lab) = fixture(2, 4, 4);
        let (ip, lp) = write_pair(dir.path(), &img, &other_lab);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format(_))));
    }

    #[test]
    fn pixel_scaling() {
        assert!(((normalize_pixel(255) * MNIST_STD + MNIST_MEAN) - 1.0).abs() < 1e-15);
        assert!(((normalize_pixel(0) * MNIST_STD + MNIST_MEAN) - 0.0).abs() < 1e-15);
    }

    #[test]
    fn synthetic_is_balanced_and_deterministic() {
        let a = synthetic(10, 1, 8, 8, 2, 3).unwrap();
        let b = synthetic(10, 1, 8, 8, 2, 3).unwrap();
        assert_eq!(a.labels.iter().filter(|&&l| l == 1).count(), 5);
        assert_eq!(a.images, b.images);
        // Top-half minus bottom-half sum separates the two classes.
        for (img, &l) in a.images.iter().zip(&a.labels) {
            let top: f64 = img.data()[..32].iter().sum();
            let bottom: f64 = img.data()[32..].iter().sum();
            assert_eq!(top > bottom, l == 0);
        }
    }
}
