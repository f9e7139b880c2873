//! Checkpoint format "crl-v1".
//!
//! A checkpoint is a directory holding a key-value text manifest plus one
//! little-endian flat binary blob per tensor (32-bit floats for training
//! checkpoints; 64-bit runs record dtype f64 and write 8-byte values).
//!
//! ```text
//! version = crl-v1
//! meta.<key> = <value>
//! tensor.<i>.name  = conv1.weight
//! tensor.<i>.kind  = param | buffer
//! tensor.<i>.dtype = f32
//! tensor.<i>.shape = 5,5,1,64
//! tensor.<i>.file  = t0000.bin
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::params::{ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_VERSION: &str = "crl-v1";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Write every parameter and buffer plus metadata key-values.
pub fn save<T: Scalar>(
    dir: &Path,
    store: &ParamStore<T>,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    manifest.push_str(&format!("version = {CHECKPOINT_VERSION}\n"));
    for (k, v) in meta {
        if k.contains('=') || v.contains('\n') {
            return Err(Error::Checkpoint {
                detail: format!("metadata key/value {k:?} not representable"),
            });
        }
        manifest.push_str(&format!("meta.{k} = {v}\n"));
    }
    for (i, (_, entry)) in store.iter().enumerate() {
        let file = format!("t{i:04}.bin");
        let kind = match entry.kind {
            ParamKind::Param => "param",
            ParamKind::Buffer => "buffer",
        };
        let shape = entry
            .value
            .shape()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(",");
        manifest.push_str(&format!("tensor.{i}.name = {}\n", entry.name));
        manifest.push_str(&format!("tensor.{i}.kind = {kind}\n"));
        manifest.push_str(&format!("tensor.{i}.dtype = {}\n", T::DTYPE));
        manifest.push_str(&format!("tensor.{i}.shape = {shape}\n"));
        manifest.push_str(&format!("tensor.{i}.file = {file}\n"));
        let mut bytes = Vec::with_capacity(entry.value.numel() * T::BYTE_WIDTH);
        for &v in entry.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes_vec());
        }
        fs::write(dir.join(&file), bytes)?;
    }
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

/// Parsed manifest: metadata plus tensor records in index order.
pub struct Manifest {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<TensorRecord>,
}

pub struct TensorRecord {
    pub name: String,
    pub kind: ParamKind,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub file: String,
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Checkpoint {
        detail: format!("cannot read {}: {e}", path.display()),
    })?;
    let mut meta = BTreeMap::new();
    let mut fields: BTreeMap<usize, BTreeMap<String, String>> = BTreeMap::new();
    let mut version = None;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Checkpoint {
            detail: format!("manifest line {} is not key = value", ln + 1),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if key == "version" {
            version = Some(value.to_string());
        } else if let Some(rest) = key.strip_prefix("meta.") {
            meta.insert(rest.to_string(), value.to_string());
        } else if let Some(rest) = key.strip_prefix("tensor.") {
            let (idx, field) = rest.split_once('.').ok_or_else(|| Error::Checkpoint {
                detail: format!("bad tensor key {key}"),
            })?;
            let idx: usize = idx.parse().map_err(|_| Error::Checkpoint {
                detail: format!("bad tensor index in {key}"),
            })?;
            fields
                .entry(idx)
                .or_default()
                .insert(field.to_string(), value.to_string());
        } else {
            return Err(Error::Checkpoint {
                detail: format!("unknown manifest key {key}"),
            });
        }
    }
    match version.as_deref() {
        Some(CHECKPOINT_VERSION) => {}
        other => {
            return Err(Error::Checkpoint {
                detail: format!("unsupported checkpoint version {other:?}"),
            })
        }
    }
    let mut tensors = Vec::new();
    for (expect, (idx, f)) in fields.into_iter().enumerate() {
        if idx != expect {
            return Err(Error::Checkpoint {
                detail: format!("tensor indices not contiguous at {idx}"),
            });
        }
        let get = |name: &str| {
            f.get(name).cloned().ok_or_else(|| Error::Checkpoint {
                detail: format!("tensor.{idx} missing field {name}"),
            })
        };
        let kind = match get("kind")?.as_str() {
            "param" => ParamKind::Param,
            "buffer" => ParamKind::Buffer,
            other => {
                return Err(Error::Checkpoint {
                    detail: format!("tensor.{idx} has unknown kind {other}"),
                })
            }
        };
        let shape_text = get("shape")?;
        let shape = if shape_text.is_empty() {
            Vec::new()
        } else {
            shape_text
                .split(',')
                .map(|d| {
                    d.trim().parse::<usize>().map_err(|_| Error::Checkpoint {
                        detail: format!("tensor.{idx} has bad shape {shape_text}"),
                    })
                })
                .collect::<Result<Vec<usize>>>()?
        };
        tensors.push(TensorRecord {
            name: get("name")?,
            kind,
            dtype: get("dtype")?,
            shape,
            file: get("file")?,
        });
    }
    Ok(Manifest { meta, tensors })
}

fn read_blob<T: Scalar>(dir: &Path, rec: &TensorRecord) -> Result<Tensor<T>> {
    if rec.dtype != T::DTYPE {
        return Err(Error::Checkpoint {
            detail: format!(
                "tensor {} has dtype {}, expected {}",
                rec.name,
                rec.dtype,
                T::DTYPE
            ),
        });
    }
    let bytes = fs::read(dir.join(&rec.file))?;
    let n: usize = rec.shape.iter().product();
    if bytes.len() != n * T::BYTE_WIDTH {
        return Err(Error::Checkpoint {
            detail: format!(
                "tensor {} blob holds {} bytes, shape {:?} needs {}",
                rec.name,
                bytes.len(),
                rec.shape,
                n * T::BYTE_WIDTH
            ),
        });
    }
    let data = bytes
        .chunks_exact(T::BYTE_WIDTH)
        .map(T::from_le_slice)
        .collect();
    Tensor::from_vec(rec.shape.clone(), data)
}

/// Load a checkpoint into a fresh store.
pub fn load<T: Scalar>(dir: &Path) -> Result<(ParamStore<T>, BTreeMap<String, String>)> {
    let manifest = read_manifest(dir)?;
    let mut store = ParamStore::new();
    for rec in &manifest.tensors {
        let tensor = read_blob::<T>(dir, rec)?;
        store.add(&rec.name, tensor, rec.kind);
    }
    Ok((store, manifest.meta))
}

/// Restore checkpoint values into an existing (already built) store,
/// verifying that every tensor matches by name and shape.
pub fn load_into<T: Scalar>(dir: &Path, store: &mut ParamStore<T>) -> Result<BTreeMap<String, String>> {
    let manifest = read_manifest(dir)?;
    if manifest.tensors.len() != store.len() {
        return Err(Error::Checkpoint {
            detail: format!(
                "checkpoint holds {} tensors, model has {}",
                manifest.tensors.len(),
                store.len()
            ),
        });
    }
    for rec in &manifest.tensors {
        let id = store.id_of(&rec.name).ok_or_else(|| Error::Checkpoint {
            detail: format!("checkpoint tensor {} not in model", rec.name),
        })?;
        if store.value(id).shape() != rec.shape.as_slice() {
            return Err(Error::Checkpoint {
                detail: format!(
                    "tensor {} shape {:?} does not match model shape {:?}",
                    rec.name,
                    rec.shape,
                    store.value(id).shape()
                ),
            });
        }
        let tensor = read_blob::<T>(dir, rec)?;
        store.set_value(id, tensor);
    }
    Ok(manifest.meta)
}
