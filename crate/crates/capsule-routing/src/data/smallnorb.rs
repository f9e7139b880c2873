//! smallNORB binary matrix format (little-endian magic, at least three
//! stored extents).

use std::fs;
use std::path::Path;

use crate::data::{Dataset, DatasetKind, Split};
use crate::error::{Error, Result};

/// Byte matrix magic (-dat files).
pub const BYTE_MATRIX_MAGIC: u32 = 0x1E3D_4C55;
/// 32-bit integer matrix magic (-cat / -info files).
pub const INT_MATRIX_MAGIC: u32 = 0x1E3D_4C54;

pub const TRAIN_DAT: &str = "smallnorb-5x46789x9x18x6x2x96x96-training-dat.mat";
pub const TRAIN_CAT: &str = "smallnorb-5x46789x9x18x6x2x96x96-training-cat.mat";
pub const TEST_DAT: &str = "smallnorb-5x01235x9x18x6x2x96x96-testing-dat.mat";
pub const TEST_CAT: &str = "smallnorb-5x01235x9x18x6x2x96x96-testing-cat.mat";

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
                detail: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Header: (magic, extents). At least three extents are stored even when
/// ndim < 3; surplus stored extents must be 1.
fn parse_header(cur: &mut Cursor<'_>) -> Result<(u32, Vec<usize>)> {
    let magic = cur.u32_le("magic")?;
    let ndim = cur.u32_le("ndim")? as usize;
    if ndim == 0 || ndim > 8 {
        return Err(Error::Parse {
            path: cur.path.clone(),
            offset: (cur.offset - 4) as u64,
            detail: format!("implausible ndim {ndim}"),
        });
    }
    let stored = ndim.max(3);
    let mut dims = Vec::with_capacity(stored);
    for _ in 0..stored {
        dims.push(cur.u32_le("extent")? as usize);
    }
    dims.truncate(ndim);
    Ok((magic, dims))
}

/// Parse a byte matrix (-dat) file.
pub fn parse_byte_matrix(path: &Path, bytes: &[u8]) -> Result<(Vec<usize>, Vec<u8>)> {
    let mut cur = Cursor {
        bytes,
        offset: 0,
        path: path.display().to_string(),
    };
    let (magic, dims) = parse_header(&mut cur)?;
    if magic != BYTE_MATRIX_MAGIC {
        return Err(Error::Parse {
            path: cur.path,
            offset: 0,
            detail: format!("bad byte-matrix magic {magic:#010x}"),
        });
    }
    let n: usize = dims.iter().product();
    let data = cur.take(n, "byte matrix data")?.to_vec();
    Ok((dims, data))
}

/// Parse an int matrix (-cat / -info) file.
pub fn parse_int_matrix(path: &Path, bytes: &[u8]) -> Result<(Vec<usize>, Vec<i32>)> {
    let mut cur = Cursor {
        bytes,
        offset: 0,
        path: path.display().to_string(),
    };
    let (magic, dims) = parse_header(&mut cur)?;
    if magic != INT_MATRIX_MAGIC {
        return Err(Error::Parse {
            path: cur.path,
            offset: 0,
            detail: format!("bad int-matrix magic {magic:#010x}"),
        });
    }
    let n: usize = dims.iter().product();
    let raw = cur.take(n * 4, "int matrix data")?;
    let data = raw
        .chunks_exact(4)
        .map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((dims, data))
}

pub fn write_byte_matrix(dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&BYTE_MATRIX_MAGIC.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for i in 0..dims.len().max(3) {
        let d = dims.get(i).copied().unwrap_or(1);
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(data);
    out
}

pub fn write_int_matrix(dims: &[usize], data: &[i32]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&INT_MATRIX_MAGIC.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for i in 0..dims.len().max(3) {
        let d = dims.get(i).copied().unwrap_or(1);
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn load_split(dir: &Path, dat_file: &str, cat_file: &str) -> Result<Split> {
    let dpath = dir.join(dat_file);
    let cpath = dir.join(cat_file);
    let dbytes = fs::read(&dpath).map_err(|e| Error::Io {
        detail: format!("cannot read {}: {e}", dpath.display()),
    })?;
    let cbytes = fs::read(&cpath).map_err(|e| Error::Io {
        detail: format!("cannot read {}: {e}", cpath.display()),
    })?;
    let (ddims, pixels) = parse_byte_matrix(&dpath, &dbytes)?;
    let (cdims, cats) = parse_int_matrix(&cpath, &cbytes)?;
    if ddims.len() != 4 || ddims[1] != 2 {
        return Err(Error::Parse {
            path: dpath.display().to_string(),
            offset: 4,
            detail: format!("expected [N, 2, H, W] stereo pairs, got {ddims:?}"),
        });
    }
    let (n, h, w) = (ddims[0], ddims[2], ddims[3]);
    if cdims != vec![n] {
        return Err(Error::Parse {
            path: cpath.display().to_string(),
            offset: 4,
            detail: format!("expected [{n}] categories, got {cdims:?}"),
        });
    }
    // first camera channel only; input stays single-channel
    let px = h * w;
    let mut images = Vec::with_capacity(n * px);
    for i in 0..n {
        images.extend_from_slice(&pixels[i * 2 * px..i * 2 * px + px]);
    }
    let labels = cats
        .iter()
        .map(|&c| {
            u8::try_from(c).map_err(|_| Error::Parse {
                path: cpath.display().to_string(),
                offset: 0,
                detail: format!("category {c} out of range"),
            })
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok(Split {
        images,
        height: h,
        width: w,
        labels,
    })
}

/// Load the official training/testing pairs from a directory.
pub fn load(dir: &Path) -> Result<Dataset> {
    let dataset = Dataset {
        kind: DatasetKind::SmallNorb,
        train: load_split(dir, TRAIN_DAT, TRAIN_CAT)?,
        test: load_split(dir, TEST_DAT, TEST_CAT)?,
    };
    dataset.validate()?;
    Ok(dataset)
}
