use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::{Dataset, Targets};
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn check_len(path: &Path, bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(())
}

/// Reads an image/label IDX pair. Pixels are scaled by 1/255 and each image
/// is flattened row-major.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let images = images.as_ref();
    let labels = labels.as_ref();
    let img = fs::read(images).map_err(|e| Error::io(images, e))?;
    let lab = fs::read(labels).map_err(|e| Error::io(labels, e))?;

    check_len(images, &img, 4)?;
    let magic = read_u32_be(&img, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: images.to_path_buf(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    check_len(images, &img, 16)?;
    let n = read_u32_be(&img, 4) as usize;
    let rows = read_u32_be(&img, 8) as usize;
    let cols = read_u32_be(&img, 12) as usize;
    let p = rows * cols;
    check_len(images, &img, 16 + n * p)?;

    check_len(labels, &lab, 4)?;
    let magic = read_u32_be(&lab, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: labels.to_path_buf(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    check_len(labels, &lab, 8)?;
    let n_labels = read_u32_be(&lab, 4) as usize;
    check_len(labels, &lab, 8 + n_labels)?;
    if n_labels != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }

    let features = Array2::from_shape_vec((n, p), img[16..16 + n * p].iter().map(|&b| b as f64 / 255.0).collect())
        .expect("length checked above");
    let labels_vec: Vec<usize> = lab[8..8 + n].iter().map(|&b| b as usize).collect();
    let n_classes = labels_vec.iter().copied().max().map_or(10, |m| (m + 1).max(10));
    let mut ds = Dataset::new(
        features,
        Targets::Classes {
            labels: labels_vec,
            n_classes,
        },
        format!("idx:{}", images.display()),
    )?;
    ds.feature_names = (0..p)
        .map(|i| format!("px{}_{}", i / cols.max(1), i % cols.max(1)))
        .collect();
    Ok(ds)
}

/// Loads `(train, test)` from a directory holding the four canonical
/// uncompressed MNIST files.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let train = load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))?;
    let test = load_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?;
    Ok((train, test))
}

/// Writes an IDX3 image file (used for fixtures and round-trip checks).
pub fn write_idx_images(path: impl AsRef<Path>, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let n = pixels.len() / (rows * cols).max(1);
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
