//! IDX-format parsing and writing (big-endian magic and extents).

use std::fs;
use std::path::Path;

use crate::data::{Dataset, DatasetKind, Split};
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Parse {
                path: self.path.clone(),
                offset: self.offset as u64,
                detail: format!(
                    "truncated while reading {what} ({n} bytes needed, {} left)",
                    self.bytes.len() - self.offset
                ),
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parse an IDX image file into (n, rows, cols, pixels).
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut cur = Cursor {
        bytes,
        offset: 0,
        path: path.display().to_string(),
    };
    let magic = cur.u32_be("image magic")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Parse {
            path: cur.path,
            offset: 0,
            detail: format!("bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        });
    }
    let n = cur.u32_be("image count")? as usize;
    let rows = cur.u32_be("row count")? as usize;
    let cols = cur.u32_be("column count")? as usize;
    let data = cur.take(n * rows * cols, "pixel data")?.to_vec();
    if cur.offset != bytes.len() {
        return Err(Error::Parse {
            path: cur.path,
            offset: cur.offset as u64,
            detail: format!("{} trailing bytes", bytes.len() - cur.offset),
        });
    }
    Ok((n, rows, cols, data))
}

/// Parse an IDX label file.
pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    let mut cur = Cursor {
        bytes,
        offset: 0,
        path: path.display().to_string(),
    };
    let magic = cur.u32_be("label magic")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Parse {
            path: cur.path,
            offset: 0,
            detail: format!("bad label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"),
        });
    }
    let n = cur.u32_be("label count")? as usize;
    let data = cur.take(n, "label data")?.to_vec();
    if cur.offset != bytes.len() {
        return Err(Error::Parse {
            path: cur.path,
            offset: cur.offset as u64,
            detail: format!("{} trailing bytes", bytes.len() - cur.offset),
        });
    }
    Ok(data)
}

pub fn write_idx_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    out.extend_from_slice(pixels);
    out
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn load_split(dir: &Path, images_file: &str, labels_file: &str) -> Result<Split> {
    let ipath = dir.join(images_file);
    let lpath = dir.join(labels_file);
    let ibytes = fs::read(&ipath).map_err(|e| Error::Io {
        detail: format!("cannot read {}: {e}", ipath.display()),
    })?;
    let lbytes = fs::read(&lpath).map_err(|e| Error::Io {
        detail: format!("cannot read {}: {e}", lpath.display()),
    })?;
    let (n, rows, cols, pixels) = parse_idx_images(&ipath, &ibytes)?;
    let labels = parse_idx_labels(&lpath, &lbytes)?;
    if labels.len() != n {
        return Err(Error::Parse {
            path: lpath.display().to_string(),
            offset: 4,
            detail: format!("{} labels for {} images", labels.len(), n),
        });
    }
    Ok(Split {
        images: pixels,
        height: rows,
        width: cols,
        labels,
    })
}

/// Load the four standard IDX files from a directory.
pub fn load(dir: &Path) -> Result<Dataset> {
    let dataset = Dataset {
        kind: DatasetKind::Mnist,
        train: load_split(dir, TRAIN_IMAGES, TRAIN_LABELS)?,
        test: load_split(dir, TEST_IMAGES, TEST_LABELS)?,
    };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_files_round_trip_bit_exactly() {
        let pixels: Vec<u8> = (0..3 * 5 * 4).map(|i| (i * 7 % 251) as u8).collect();
        let blob = write_idx_images(3, 5, 4, &pixels);
        let (n, r, c, data) = parse_idx_images(Path::new("mem"), &blob).unwrap();
        assert_eq!((n, r, c), (3, 5, 4));
        assert_eq!(data, pixels);

        let labels = vec![0u8, 3, 9, 7];
        let blob = write_idx_labels(&labels);
        assert_eq!(parse_idx_labels(Path::new("mem"), &blob).unwrap(), labels);
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let blob = write_idx_labels(&[1, 2, 3]);
        let err = parse_idx_images(Path::new("x"), &blob).unwrap_err();
        match err {
            Error::Parse { offset, detail, .. } => {
                assert_eq!(offset, 0);
                assert!(detail.contains("magic"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn truncation_reports_byte_offset() {
        let pixels: Vec<u8> = vec![0; 2 * 4 * 4];
        let mut blob = write_idx_images(2, 4, 4, &pixels);
        blob.truncate(blob.len() - 5);
        let err = parse_idx_images(Path::new("x"), &blob).unwrap_err();
        match err {
            Error::Parse { offset, detail, .. } => {
                assert_eq!(offset, 16);
                assert!(detail.contains("truncated"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}
