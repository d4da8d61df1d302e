//! Flat binary checkpoint container: named parameter arrays behind a manifest
//! (name, shape, dtype, byte offset) plus a header of network-spec hashes.
//! All float payloads are little-endian `f32` regardless of the in-memory
//! scalar type; integer metadata (steps, seeds) uses a `u64` entry kind.

use crate::math::{Matrix, Real};
use crate::nn::ParamStore;
use crate::{Error, Result};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"CDCK";
const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_U64: u8 = 1;

enum Payload {
    F32 { rows: u32, cols: u32, data: Vec<f32> },
    U64(u64),
}

/// Accumulates named arrays and writes the container in one pass.
pub struct CheckpointWriter {
    spec_hashes: Vec<u64>,
    entries: Vec<(String, Payload)>,
}

impl Default for CheckpointWriter {
    fn default() -> Self {
        Self::new()
    }
}

impl CheckpointWriter {
    pub fn new() -> Self {
        CheckpointWriter {
            spec_hashes: Vec::new(),
            entries: Vec::new(),
        }
    }

    pub fn record_spec_hash(&mut self, hash: u64) {
        self.spec_hashes.push(hash);
    }

    pub fn add_matrix<R: Real>(&mut self, name: impl Into<String>, m: &Matrix<R>) {
        let data: Vec<f32> = m.data().iter().map(|v| v.f64() as f32).collect();
        self.entries.push((
            name.into(),
            Payload::F32 {
                rows: m.rows() as u32,
                cols: m.cols() as u32,
                data,
            },
        ));
    }

    pub fn add_store<R: Real>(&mut self, prefix: &str, store: &ParamStore<R>) {
        for g in store.iter() {
            self.add_matrix(format!("{prefix}.{}", g.name), &g.value);
        }
    }

    pub fn add_u64(&mut self, name: impl Into<String>, v: u64) {
        self.entries.push((name.into(), Payload::U64(v)));
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut manifest: Vec<u8> = Vec::new();
        let mut blob: Vec<u8> = Vec::new();
        for (name, payload) in &self.entries {
            let offset = blob.len() as u64;
            manifest.extend_from_slice(&(name.len() as u16).to_le_bytes());
            manifest.extend_from_slice(name.as_bytes());
            match payload {
                Payload::F32 { rows, cols, data } => {
                    manifest.push(DTYPE_F32);
                    manifest.extend_from_slice(&rows.to_le_bytes());
                    manifest.extend_from_slice(&cols.to_le_bytes());
                    manifest.extend_from_slice(&offset.to_le_bytes());
                    for v in data {
                        blob.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Payload::U64(v) => {
                    manifest.push(DTYPE_U64);
                    manifest.extend_from_slice(&0u32.to_le_bytes());
                    manifest.extend_from_slice(&0u32.to_le_bytes());
                    manifest.extend_from_slice(&offset.to_le_bytes());
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.spec_hashes.len() as u32).to_le_bytes());
        for h in &self.spec_hashes {
            out.extend_from_slice(&h.to_le_bytes());
        }
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&blob);
        let mut f = std::fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }
}

/// A loaded checkpoint: parsed manifest + payloads keyed by name.
pub struct Checkpoint {
    spec_hashes: Vec<u64>,
    f32_entries: BTreeMap<String, (u32, u32, Vec<f32>)>,
    u64_entries: BTreeMap<String, u64>,
}

fn take<'a>(buf: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Format(format!("checkpoint truncated reading {what}")));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let mut raw = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut raw)?;
        let mut buf = raw.as_slice();
        if take(&mut buf, 4, "magic")? != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(take(&mut buf, 4, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let n_hashes = u32::from_le_bytes(take(&mut buf, 4, "hash count")?.try_into().unwrap());
        let mut spec_hashes = Vec::with_capacity(n_hashes as usize);
        for _ in 0..n_hashes {
            spec_hashes.push(u64::from_le_bytes(
                take(&mut buf, 8, "spec hash")?.try_into().unwrap(),
            ));
        }
        let n_entries = u32::from_le_bytes(take(&mut buf, 4, "entry count")?.try_into().unwrap());
        let manifest_len =
            u64::from_le_bytes(take(&mut buf, 8, "manifest length")?.try_into().unwrap());
        let mut manifest = take(&mut buf, manifest_len as usize, "manifest")?;
        let blob = buf;

        let mut f32_entries = BTreeMap::new();
        let mut u64_entries = BTreeMap::new();
        for _ in 0..n_entries {
            let name_len =
                u16::from_le_bytes(take(&mut manifest, 2, "name length")?.try_into().unwrap());
            let name = String::from_utf8(take(&mut manifest, name_len as usize, "name")?.to_vec())
                .map_err(|_| Error::Format("non-utf8 entry name".into()))?;
            let dtype = take(&mut manifest, 1, "dtype")?[0];
            let rows = u32::from_le_bytes(take(&mut manifest, 4, "rows")?.try_into().unwrap());
            let cols = u32::from_le_bytes(take(&mut manifest, 4, "cols")?.try_into().unwrap());
            let offset =
                u64::from_le_bytes(take(&mut manifest, 8, "offset")?.try_into().unwrap()) as usize;
            match dtype {
                DTYPE_F32 => {
                    let n = rows as usize * cols as usize;
                    let end = offset + n * 4;
                    if blob.len() < end {
                        return Err(Error::Format(format!("payload for `{name}` out of range")));
                    }
                    let data = blob[offset..end]
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    f32_entries.insert(name, (rows, cols, data));
                }
                DTYPE_U64 => {
                    if blob.len() < offset + 8 {
                        return Err(Error::Format(format!("payload for `{name}` out of range")));
                    }
                    let v = u64::from_le_bytes(blob[offset..offset + 8].try_into().unwrap());
                    u64_entries.insert(name, v);
                }
                other => {
                    return Err(Error::Format(format!(
                        "unknown dtype tag {other} for `{name}`"
                    )))
                }
            }
        }
        Ok(Checkpoint {
            spec_hashes,
            f32_entries,
            u64_entries,
        })
    }

    pub fn spec_hashes(&self) -> &[u64] {
        &self.spec_hashes
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        self.u64_entries
            .get(name)
            .copied()
            .ok_or_else(|| Error::Format(format!("checkpoint missing entry `{name}`")))
    }

    pub fn matrix<R: Real>(&self, name: &str) -> Result<Matrix<R>> {
        let (rows, cols, data) = self
            .f32_entries
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint missing entry `{name}`")))?;
        Ok(Matrix::new(
            *rows as usize,
            *cols as usize,
            data.iter().map(|&v| R::of(v as f64)).collect(),
        ))
    }

    /// Loads `prefix.*` entries into an existing store (built from its spec),
    /// validating each shape against the structure already in place.
    pub fn load_store_into<R: Real>(&self, prefix: &str, store: &mut ParamStore<R>) -> Result<()> {
        for g in store.iter_mut() {
            let name = format!("{prefix}.{}", g.name);
            let m: Matrix<R> = self.matrix(&name)?;
            if m.shape() != g.value.shape() {
                return Err(Error::shape(
                    format!("checkpoint entry `{name}`"),
                    format!("{:?}", g.value.shape()),
                    format!("{:?}", m.shape()),
                ));
            }
            g.value = m;
        }
        Ok(())
    }
}
