//! Checkpoint files: a magic line, one JSON header line, then every tensor as
//! little-endian `f32` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use crate::networks::fingerprint;
use crate::nn::{Module, Tensor};

pub const MAGIC: &str = "rdpc-checkpoint v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    /// Component name, e.g. `encoder` or `train_state`.
    pub kind: String,
    /// Architecture description; compared on load.
    pub arch: serde_json::Value,
    /// SHA-256 over the stored tensors (see [`fingerprint`]).
    pub fingerprint: String,
    /// Run that produced the file.
    pub run_id: String,
    pub seed: u64,
    pub tensors: Vec<TensorInfo>,
    /// Free-form metadata (accuracy, epoch counters, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Writes `tensors` atomically (temporary file + rename).
pub fn write(path: &Path, header: &Header, tensors: &[(String, &Tensor)]) -> Result<()> {
    ensure!(header.tensors.len() == tensors.len(), "header lists a different tensor count");
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC.as_bytes());
    buf.push(b'\n');
    serde_json::to_writer(&mut buf, header)?;
    buf.push(b'\n');
    for (_, t) in tensors {
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Reads a checkpoint into a header and the tensors it lists.
pub fn read(path: &Path) -> Result<(Header, Vec<Tensor>)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = bytes.splitn(3, |&b| b == b'\n');
    let magic = lines.next().unwrap_or_default();
    if magic != MAGIC.as_bytes() {
        bail!("{} is not an rdpc checkpoint", path.display());
    }
    let header: Header = serde_json::from_slice(lines.next().context("missing checkpoint header")?)
        .with_context(|| format!("bad header in {}", path.display()))?;
    let payload = lines.next().unwrap_or_default();
    let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    ensure!(
        payload.len() == total * 4,
        "{}: payload has {} bytes, header describes {}",
        path.display(),
        payload.len(),
        total * 4
    );
    let mut off = 0;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for info in &header.tensors {
        let n: usize = info.shape.iter().product();
        let data = payload[off..off + n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        off += n * 4;
        tensors.push(Tensor {
            shape: info.shape.clone(),
            data,
        });
    }
    Ok((header, tensors))
}

/// Saves a network's full state.
pub fn save_module<M: Module + ?Sized>(
    path: &Path,
    kind: &str,
    arch: serde_json::Value,
    module: &M,
    run_id: &str,
    seed: u64,
    extra: serde_json::Value,
) -> Result<Header> {
    let mut items = Vec::new();
    module.state("", &mut items);
    let header = Header {
        kind: kind.to_string(),
        arch,
        fingerprint: fingerprint(module),
        run_id: run_id.to_string(),
        seed,
        tensors: items
            .iter()
            .map(|(name, t)| TensorInfo {
                name: name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
        extra,
    };
    write(path, &header, &items)?;
    Ok(header)
}

/// Loads a checkpoint of `kind` into `module`, which must have the same architecture and
/// tensor layout; the restored state must reproduce the stored fingerprint.
pub fn load_module<M: Module + ?Sized>(path: &Path, kind: &str, arch: &serde_json::Value, module: &mut M) -> Result<Header> {
    let (header, tensors) = read(path)?;
    ensure!(header.kind == kind, "{}: expected a {kind} checkpoint, found {}", path.display(), header.kind);
    ensure!(
        header.arch == *arch,
        "{}: architecture mismatch (checkpoint {}, expected {})",
        path.display(),
        header.arch,
        arch
    );
    let mut items = Vec::new();
    module.state_mut("", &mut items);
    ensure!(items.len() == tensors.len(), "{}: tensor count mismatch", path.display());
    for ((name, dst), (info, src)) in items.into_iter().zip(header.tensors.iter().zip(tensors)) {
        ensure!(
            name == info.name && dst.shape == info.shape,
            "{}: tensor `{}` {:?} does not match `{name}` {:?}",
            path.display(),
            info.name,
            info.shape,
            dst.shape
        );
        *dst = src;
    }
    ensure!(
        fingerprint(module) == header.fingerprint,
        "{}: fingerprint mismatch after load",
        path.display()
    );
    Ok(header)
}
