//! Loader for the IDX image/label file pair (the MNIST container format).
//!
//! Images file: big-endian magic `0x00000803`, count, rows, cols, then
//! `count * rows * cols` unsigned bytes, row-major per image. Labels file:
//! magic `0x00000801`, count, then `count` label bytes. Pixels are scaled to
//! `[0, 1]` by dividing by 255.

use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{io_err, Error, Result};

use super::LabeledDataset;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn fail(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            path: PathBuf::from(self.path),
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let end = self.offset + 4;
        if end > self.bytes.len() {
            return Err(self.fail(
                self.offset,
                format!("truncated while reading {what} (need 4 bytes)"),
            ));
        }
        let v = u32::from_be_bytes(self.bytes[self.offset..end].try_into().expect("4 bytes"));
        self.offset = end;
        Ok(v)
    }

    fn read_payload(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.offset + len;
        if end > self.bytes.len() {
            return Err(self.fail(
                self.bytes.len(),
                format!(
                    "truncated {what}: expected {len} bytes after the header, found {}",
                    self.bytes.len() - self.offset
                ),
            ));
        }
        let slice = &self.bytes[self.offset..end];
        self.offset = end;
        if self.offset != self.bytes.len() {
            return Err(self.fail(
                self.offset,
                format!(
                    "unexpected trailing bytes ({} past the end of {what})",
                    self.bytes.len() - self.offset
                ),
            ));
        }
        Ok(slice)
    }
}

/// Load an images/labels IDX pair into a dataset. Malformed files fail with
/// the path and the byte offset of the problem. The class count is the
/// largest label plus one (at least 2).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let image_bytes = std::fs::read(images_path).map_err(io_err(images_path))?;
    let label_bytes = std::fs::read(labels_path).map_err(io_err(labels_path))?;

    let mut img = Cursor {
        path: images_path,
        bytes: &image_bytes,
        offset: 0,
    };
    let magic = img.read_u32("magic number")?;
    if magic != IMAGES_MAGIC {
        return Err(img.fail(0, format!("bad images magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}")));
    }
    let count = img.read_u32("image count")? as usize;
    let rows = img.read_u32("row count")? as usize;
    let cols = img.read_u32("column count")? as usize;
    if count == 0 || rows == 0 || cols == 0 {
        return Err(img.fail(4, format!("degenerate dimensions {count}x{rows}x{cols}")));
    }
    let pixels = img.read_payload(count * rows * cols, "pixel data")?;

    let mut lbl = Cursor {
        path: labels_path,
        bytes: &label_bytes,
        offset: 0,
    };
    let magic = lbl.read_u32("magic number")?;
    if magic != LABELS_MAGIC {
        return Err(lbl.fail(0, format!("bad labels magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}")));
    }
    let label_count = lbl.read_u32("label count")? as usize;
    if label_count != count {
        return Err(lbl.fail(
            4,
            format!("{label_count} labels for {count} images"),
        ));
    }
    let raw_labels = lbl.read_payload(label_count, "label data")?;

    let dim = rows * cols;
    let features = Array2::from_shape_fn((count, dim), |(i, j)| {
        f64::from(pixels[i * dim + j]) / 255.0
    });
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0).max(1) + 1;

    let dataset = LabeledDataset {
        features,
        labels,
        num_classes,
    };
    dataset.validate()?;
    Ok(dataset)
}
