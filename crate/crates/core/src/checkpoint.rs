//! Parameter snapshots: a flat binary of little-endian `f64` values plus a
//! text manifest listing each tensor's name, shape and byte offset.
//!
//! Manifest lines:
//!
//! ```text
//! meta input_size 64
//! param rgb_encoder.stage1.conv1.conv.weight 16x3x3x3 0
//! buffer rgb_encoder.stage1.conv1.bn.running_mean 16 3456
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

const HEADER: &str = "# smac checkpoint: little-endian f64 values; kind name shape byte-offset";

/// The manifest lives next to the binary: `model.bin` → `model.bin.manifest`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

fn shape_string(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

/// Writes all parameters and buffers. `meta` pairs are stored in the
/// manifest verbatim (keys and values must not contain whitespace).
pub fn save(store: &ParamStore, path: &Path, meta: &[(String, String)]) -> Result<()> {
    let mut bin = Vec::new();
    let mut manifest = format!("{HEADER}\n");
    for (k, v) in meta {
        let _ = writeln!(manifest, "meta {k} {v}");
    }
    let tensors = store
        .params()
        .iter()
        .map(|p| ("param", &p.name, &p.value))
        .chain(store.buffers().iter().map(|b| ("buffer", &b.name, &b.value)));
    for (kind, name, value) in tensors {
        let _ = writeln!(manifest, "{kind} {name} {} {}", shape_string(value.shape()), bin.len());
        for v in value.data() {
            bin.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, &bin).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))
}

struct Entry {
    kind: String,
    shape: Vec<usize>,
    offset: usize,
}

/// Parsed manifest: tensor entries by name and the meta pairs.
struct Manifest {
    entries: BTreeMap<String, Entry>,
    meta: BTreeMap<String, String>,
}

fn parse_manifest(text: &str, path: &Path) -> Result<Manifest> {
    let mut entries = BTreeMap::new();
    let mut meta = BTreeMap::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let at = offset;
        offset += line.len();
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            offset: at,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["meta", k, v] => {
                meta.insert(k.to_string(), v.to_string());
            }
            [kind @ ("param" | "buffer"), name, shape, off] => {
                let shape = shape
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| err(format!("bad shape {shape:?}")))?;
                let off = off.parse().map_err(|_| err(format!("bad offset {off:?}")))?;
                let prev = entries.insert(
                    name.to_string(),
                    Entry {
                        kind: kind.to_string(),
                        shape,
                        offset: off,
                    },
                );
                if prev.is_some() {
                    return Err(err(format!("duplicate entry {name}")));
                }
            }
            _ => return Err(err(format!("unrecognized manifest line {line:?}"))),
        }
    }
    Ok(Manifest { entries, meta })
}

/// Reads only the meta pairs of a checkpoint.
pub fn read_meta(path: &Path) -> Result<BTreeMap<String, String>> {
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    Ok(parse_manifest(&text, &mpath)?.meta)
}

fn read_tensor(bin: &[u8], e: &Entry, name: &str, path: &Path) -> Result<Tensor> {
    let n: usize = e.shape.iter().product();
    let end = e.offset + 8 * n;
    let bytes = bin.get(e.offset..end).ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        offset: bin.len(),
        msg: format!("{name}: needs bytes {}..{end}, file is truncated", e.offset),
    })?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(&e.shape, data)
}

/// Loads values into a store of the same architecture. Every parameter and
/// buffer must be present with a matching shape.
pub fn load(store: &mut ParamStore, path: &Path) -> Result<BTreeMap<String, String>> {
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest = parse_manifest(&text, &mpath)?;
    let bin = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut used = 0;
    let mismatch = |name: &str, want: &[usize], got: &[usize]| {
        Error::Data(format!(
            "{}: {name} has shape {} in the checkpoint, the model expects {}",
            path.display(),
            shape_string(got),
            shape_string(want)
        ))
    };
    let missing = |name: &str| Error::Data(format!("{}: no entry for {name}", path.display()));
    for p in store.params_mut() {
        let e = manifest
            .entries
            .get(&p.name)
            .filter(|e| e.kind == "param")
            .ok_or_else(|| missing(&p.name))?;
        if e.shape != p.value.shape() {
            return Err(mismatch(&p.name, p.value.shape(), &e.shape));
        }
        p.value = read_tensor(&bin, e, &p.name, path)?;
        used += 1;
    }
    for b in store.buffers_mut() {
        let e = manifest
            .entries
            .get(&b.name)
            .filter(|e| e.kind == "buffer")
            .ok_or_else(|| missing(&b.name))?;
        if e.shape != b.value.shape() {
            return Err(mismatch(&b.name, b.value.shape(), &e.shape));
        }
        b.value = read_tensor(&bin, e, &b.name, path)?;
        used += 1;
    }
    if used != manifest.entries.len() {
        return Err(Error::Data(format!(
            "{}: checkpoint has {} tensors, the model {}",
            path.display(),
            manifest.entries.len(),
            used
        )));
    }
    Ok(manifest.meta)
}
