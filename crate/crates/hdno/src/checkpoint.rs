//! Binary parameter checkpoints with a JSON sidecar.
//!
//! Layout (little endian): magic `HDNOCKPT`, format version `u32`, config
//! hash `u64`, block count `u32`, then per block: name length `u32`, UTF-8
//! name, rank `u32`, dims as `u64`, row-major `f64` values. Metadata (seed,
//! epoch, metrics, model sizes) lives in `<path>.json`.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use diffcore::{ParamStore, Tensor};

use crate::error::{HdnoError, Result};

pub const MAGIC: &[u8; 8] = b"HDNOCKPT";
pub const VERSION: u32 = 1;

pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn err(msg: impl Into<String>) -> HdnoError {
    HdnoError::Checkpoint(msg.into())
}

pub fn save(path: &Path, store: &ParamStore, config_hash: u64, meta: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u64::<LittleEndian>(config_hash)?;
    w.write_u32::<LittleEndian>(store.len() as u32)?;
    for (_, name, t) in store.iter() {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
        for &d in t.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in t.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    let mut text = serde_json::to_string_pretty(meta)?;
    text.push('\n');
    fs::write(sidecar(path), text)?;
    Ok(())
}

/// Reads every block as `(name, tensor)` and returns them with the stored
/// config hash.
pub fn read_blocks(path: &Path) -> Result<(u64, Vec<(String, Tensor)>)> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(err(format!("{} is not a checkpoint", path.display())));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(err(format!("unsupported checkpoint version {version}")));
    }
    let hash = r.read_u64::<LittleEndian>()?;
    let n = r.read_u32::<LittleEndian>()?;
    let mut blocks = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| err("parameter name is not UTF-8"))?;
        let rank = r.read_u32::<LittleEndian>()? as usize;
        let shape = (0..rank)
            .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0; numel];
        r.read_f64_into::<LittleEndian>(&mut data)?;
        blocks.push((name, Tensor::new(shape, data)?));
    }
    Ok((hash, blocks))
}

/// Overwrites every parameter of `store` from the checkpoint, matching by
/// name and shape. Returns the sidecar metadata.
pub fn load_into(path: &Path, store: &mut ParamStore, expected_hash: Option<u64>) -> Result<serde_json::Value> {
    let (hash, blocks) = read_blocks(path)?;
    if let Some(expected) = expected_hash {
        if expected != hash {
            return Err(err(format!("config hash mismatch: checkpoint {hash:016x}, expected {expected:016x}")));
        }
    }
    if blocks.len() != store.len() {
        return Err(err(format!("checkpoint has {} parameters, model has {}", blocks.len(), store.len())));
    }
    for (name, tensor) in blocks {
        let id = store.id(&name).map_err(|_| err(format!("unexpected parameter `{name}`")))?;
        let target = store.get_mut(id);
        if target.shape() != tensor.shape() {
            return Err(err(format!(
                "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                target.shape(),
                tensor.shape()
            )));
        }
        target.data_mut().copy_from_slice(tensor.data());
    }
    read_meta(path)
}

pub fn read_meta(path: &Path) -> Result<serde_json::Value> {
    let p = sidecar(path);
    let text = fs::read_to_string(&p).map_err(|e| err(format!("cannot read {}: {e}", p.display())))?;
    Ok(serde_json::from_str(&text)?)
}
