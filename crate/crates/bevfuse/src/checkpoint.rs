//! Parameter checkpoints: magic "BFK1", version, then a manifest of
//! (name, dtype, shape) entries followed by the raw little-endian values in
//! manifest order. Dtype 0 is f64 tensors; dtype 1 is a u8 byte blob (used
//! for the embedded model configuration).

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use bevfuse_core::diff::{ParamStore, Tensor};

use crate::FormatError;

pub const MAGIC: &[u8; 4] = b"BFK1";
pub const VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_U8: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    Tensor(Tensor),
    Bytes(Vec<u8>),
}

pub fn write_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_f64(w: &mut impl Write, v: f64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_f64(r: &mut impl Read) -> io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn write_name(w: &mut impl Write, name: &str) -> io::Result<()> {
    write_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())
}

fn read_name(r: &mut impl Read) -> Result<String, FormatError> {
    let len = read_u32(r)? as usize;
    if len > 1 << 16 {
        return Err(FormatError::Corrupt("entry name too long".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| FormatError::Corrupt("entry name not utf-8".into()))
}

/// Serialize named entries: manifest first, then all payloads.
pub fn save_entries(path: &Path, entries: &BTreeMap<String, Entry>) -> Result<(), FormatError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    write_u32(&mut out, VERSION)?;
    write_u32(&mut out, entries.len() as u32)?;
    for (name, entry) in entries {
        write_name(&mut out, name)?;
        match entry {
            Entry::Tensor(t) => {
                out.push(DTYPE_F64);
                write_u32(&mut out, t.shape().len() as u32)?;
                for &d in t.shape() {
                    write_u64(&mut out, d as u64)?;
                }
            }
            Entry::Bytes(b) => {
                out.push(DTYPE_U8);
                write_u32(&mut out, 1)?;
                write_u64(&mut out, b.len() as u64)?;
            }
        }
    }
    for entry in entries.values() {
        match entry {
            Entry::Tensor(t) => {
                for &v in t.data() {
                    write_f64(&mut out, v)?;
                }
            }
            Entry::Bytes(b) => out.extend_from_slice(b),
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_entries(path: &Path) -> Result<BTreeMap<String, Entry>, FormatError> {
    let bytes = fs::read(path)?;
    let mut r = io::Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(FormatError::BadMagic {
            expected: "BFK1",
            found: magic,
        });
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(FormatError::Corrupt(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let name = read_name(&mut r)?;
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype)?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        manifest.push((name, dtype[0], shape));
    }
    let mut entries = BTreeMap::new();
    for (name, dtype, shape) in manifest {
        let numel: usize = shape.iter().product();
        match dtype {
            DTYPE_F64 => {
                let mut data = Vec::with_capacity(numel);
                for _ in 0..numel {
                    data.push(read_f64(&mut r)?);
                }
                let tensor = Tensor::from_vec(&shape, data)
                    .map_err(|e| FormatError::Corrupt(format!("{e}")))?;
                entries.insert(name, Entry::Tensor(tensor));
            }
            DTYPE_U8 => {
                let mut data = vec![0u8; numel];
                r.read_exact(&mut data)?;
                entries.insert(name, Entry::Bytes(data));
            }
            other => {
                return Err(FormatError::Corrupt(format!(
                    "unknown dtype tag {other} for entry '{name}'"
                )))
            }
        }
    }
    Ok(entries)
}

/// Save a parameter store plus an embedded config blob.
pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    config_text: &str,
) -> Result<(), FormatError> {
    let mut entries = BTreeMap::new();
    for (name, tensor) in store.iter() {
        entries.insert(name.clone(), Entry::Tensor(tensor.clone()));
    }
    entries.insert(
        "meta.config".into(),
        Entry::Bytes(config_text.as_bytes().to_vec()),
    );
    save_entries(path, &entries)
}

/// Load a checkpoint back into (store, embedded config text).
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, String), FormatError> {
    let entries = load_entries(path)?;
    let mut store = ParamStore::new();
    let mut config = None;
    for (name, entry) in entries {
        match entry {
            Entry::Tensor(t) => store.insert(&name, t),
            Entry::Bytes(b) if name == "meta.config" => {
                config = Some(String::from_utf8(b).map_err(|_| {
                    FormatError::Corrupt("embedded config is not utf-8".into())
                })?);
            }
            Entry::Bytes(_) => {
                return Err(FormatError::Corrupt(format!(
                    "unexpected byte entry '{name}'"
                )))
            }
        }
    }
    let config =
        config.ok_or_else(|| FormatError::Corrupt("checkpoint has no embedded config".into()))?;
    Ok((store, config))
}

/// Single-tensor container used for predicted maps.
pub fn save_tensor(path: &Path, name: &str, tensor: &Tensor) -> Result<(), FormatError> {
    let mut entries = BTreeMap::new();
    entries.insert(name.to_string(), Entry::Tensor(tensor.clone()));
    save_entries(path, &entries)
}

pub fn load_tensor(path: &Path, name: &str) -> Result<Tensor, FormatError> {
    let mut entries = load_entries(path)?;
    match entries.remove(name) {
        Some(Entry::Tensor(t)) => Ok(t),
        _ => Err(FormatError::Corrupt(format!("no tensor entry '{name}'"))),
    }
}
