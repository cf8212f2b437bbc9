//! Checkpoint archive: an 8-byte magic, a little-endian u64 manifest length,
//! the UTF-8 JSON manifest, then every block as little-endian f32, row-major,
//! in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::{ParameterStore, Tensor};

pub const MAGIC: &[u8; 8] = b"DOMECKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub seed: u64,
    pub epoch: usize,
    /// Kind-specific metadata: configs, vocabularies, index entries, history.
    pub payload: Value,
    pub blocks: Vec<BlockMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub meta: BlockMeta,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub seed: u64,
    pub epoch: usize,
    pub payload: Value,
    pub blocks: Vec<Block>,
}

impl Checkpoint {
    pub fn new(kind: &str, seed: u64, epoch: usize, payload: Value) -> Self {
        Self { kind: kind.to_string(), seed, epoch, payload, blocks: Vec::new() }
    }

    pub fn push(&mut self, name: &str, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!("block {name}: {rows}x{cols} vs {} values", data.len())));
        }
        self.blocks.push(Block {
            meta: BlockMeta { name: name.to_string(), rows, cols },
            data: data.iter().map(|&v| v as f32).collect(),
        });
        Ok(())
    }

    /// Adds every parameter of `store` as `{prefix}{name}`.
    pub fn push_store(&mut self, prefix: &str, store: &ParameterStore) -> Result<()> {
        for (name, t) in store.iter() {
            let (r, c) = t.dims2();
            self.push(&format!("{prefix}{name}"), r, c, t.data())?;
        }
        Ok(())
    }

    pub fn block(&self, name: &str) -> Result<&Block> {
        self.blocks
            .iter()
            .find(|b| b.meta.name == name)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing block {name}")))
    }

    pub fn block_f64(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.block(name)?.data.iter().map(|&v| v as f64).collect())
    }

    /// Overwrites every parameter of `store` from `{prefix}{name}` blocks.
    pub fn restore_store(&self, prefix: &str, store: &mut ParameterStore) -> Result<()> {
        let names: Vec<String> = store.names().to_vec();
        for (id, name) in names.iter().enumerate() {
            let block = self.block(&format!("{prefix}{name}"))?;
            let (r, c) = store.get(id).dims2();
            if (block.meta.rows, block.meta.cols) != (r, c) {
                return Err(Error::CorruptCheckpoint(format!(
                    "{name}: stored {}x{}, model expects {r}x{c}",
                    block.meta.rows, block.meta.cols
                )));
            }
            let t = store.get_mut(id);
            for (dst, &src) in t.data_mut().iter_mut().zip(&block.data) {
                *dst = src as f64;
            }
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let b = self.block(name)?;
        Tensor::new(vec![b.meta.rows, b.meta.cols], b.data.iter().map(|&v| v as f64).collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            seed: self.seed,
            epoch: self.epoch,
            payload: self.payload.clone(),
            blocks: self.blocks.iter().map(|b| b.meta.clone()).collect(),
        };
        // through Value so key order is canonical
        let json = serde_json::to_vec(&serde_json::to_value(&manifest)?)?;
        let floats: usize = self.blocks.iter().map(|b| b.data.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 4 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for b in &self.blocks {
            for v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().map_err(|_| corrupt("bad header"))?) as usize;
        let body = bytes.get(16..16usize.saturating_add(len)).ok_or_else(|| corrupt("truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(body).map_err(|e| Error::CorruptCheckpoint(format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::CorruptCheckpoint(format!(
                "format version {} (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let mut pos = 16 + len;
        let mut blocks = Vec::with_capacity(manifest.blocks.len());
        for meta in manifest.blocks {
            let n = meta.rows.checked_mul(meta.cols).ok_or_else(|| corrupt("block size overflow"))?;
            let raw = bytes.get(pos..pos + 4 * n).ok_or_else(|| corrupt("truncated block data"))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            pos += 4 * n;
            blocks.push(Block { meta, data });
        }
        if pos != bytes.len() {
            return Err(corrupt("trailing bytes after block data"));
        }
        Ok(Self { kind: manifest.kind, seed: manifest.seed, epoch: manifest.epoch, payload: manifest.payload, blocks })
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
