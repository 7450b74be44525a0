//! Parameter checkpoints: a flat name -> array archive.
//!
//! File layout: one magic line, one JSON manifest line (format version,
//! per-parameter name/shape/frozen/offset), then a little-endian f64 blob.

use super::{ParamStore, Parameter};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Read, Write};
use std::path::Path;
use std::rc::Rc;

const MAGIC: &str = "MUSASPLAT-CKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    params: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
    /// Element offset into the blob.
    offset: usize,
    len: usize,
}

pub fn save_checkpoint(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut entries = Vec::with_capacity(store.len());
    let mut offset = 0usize;
    for p in store.iter() {
        entries.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            frozen: p.frozen,
            offset,
            len: p.numel(),
        });
        offset += p.numel();
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        params: entries,
    };
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    writeln!(w, "{MAGIC}").map_err(io_err)?;
    serde_json::to_writer(&mut w, &manifest)?;
    writeln!(w).map_err(io_err)?;
    for p in store.iter() {
        for v in p.values.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    Ok(())
}

/// Loads a checkpoint into a fresh store, preserving parameter order.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);

    let mut magic = String::new();
    r.read_line(&mut magic).map_err(io_err)?;
    if magic.trim_end() != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?} in {}",
            magic.trim_end(),
            path.display()
        )));
    }
    let mut manifest_line = String::new();
    r.read_line(&mut manifest_line).map_err(io_err)?;
    let manifest: Manifest = serde_json::from_str(&manifest_line)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }

    let total: usize = manifest.params.iter().map(|e| e.len).sum();
    let mut blob = vec![0u8; total * 8];
    r.read_exact(&mut blob).map_err(io_err)?;

    let mut store = ParamStore::new();
    for e in &manifest.params {
        if e.len != e.shape.iter().product::<usize>() {
            return Err(Error::Checkpoint(format!(
                "entry {}: len {} vs shape {:?}",
                e.name, e.len, e.shape
            )));
        }
        let mut values = Vec::with_capacity(e.len);
        for i in 0..e.len {
            let b: [u8; 8] = blob[(e.offset + i) * 8..(e.offset + i + 1) * 8]
                .try_into()
                .unwrap();
            values.push(f64::from_le_bytes(b));
        }
        let id = store.register(e.name.clone(), e.shape.clone(), values);
        store.get_mut(id).frozen = e.frozen;
    }
    Ok(store)
}

/// Copies values (and frozen flags) from `src` into `dst` by name.
/// Every parameter of `dst` must be present in `src` with a matching shape.
pub fn restore_into(dst: &mut ParamStore, src: &ParamStore) -> Result<()> {
    let mut by_name: std::collections::HashMap<&str, &Parameter> =
        std::collections::HashMap::new();
    for p in src.iter() {
        by_name.insert(p.name.as_str(), p);
    }
    let names: Vec<String> = dst.iter().map(|p| p.name.clone()).collect();
    for name in names {
        let Some(sp) = by_name.get(name.as_str()) else {
            return Err(Error::Checkpoint(format!("missing parameter {name}")));
        };
        let id = dst.id_of(&name).unwrap();
        let dp = dst.get_mut(id);
        if dp.shape != sp.shape {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: shape {:?} vs checkpoint {:?}",
                dp.shape, sp.shape
            )));
        }
        dp.values = Rc::new(sp.values.as_ref().clone());
        dp.frozen = sp.frozen;
    }
    Ok(())
}
