//! On-disk precomputed feature grids.
//!
//! A feature directory holds `features-NNNNN.bin` shards plus `index.json`.
//! Each shard is a 28-byte little-endian header
//!
//! ```text
//! magic  [u8; 8] = b"PXRFEAT\0"
//! version u32    = 1
//! count   u32    samples in this shard
//! rows    u32
//! cols    u32
//! dim     u32
//! ```
//!
//! followed by `count × rows × cols × dim` little-endian f32 values, one
//! contiguous grid per sample. The index maps a sample id to its shard file
//! and the byte offset of its grid.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: [u8; 8] = *b"PXRFEAT\0";
pub const FEATURE_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 28;
pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub shard: String,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureIndex {
    pub version: u32,
    pub rows: usize,
    pub cols: usize,
    pub feature_dim: usize,
    pub samples: BTreeMap<String, IndexEntry>,
}

fn shard_name(i: usize) -> String {
    format!("features-{i:05}.bin")
}

/// Write `grids` (one `rows·cols·dim` vector per id) as shards of at most
/// `shard_size` samples.
pub fn write_feature_dir(
    dir: &Path,
    ids: &[String],
    grids: &[Vec<f32>],
    rows: usize,
    cols: usize,
    dim: usize,
    shard_size: usize,
) -> Result<FeatureIndex> {
    if ids.len() != grids.len() {
        return Err(Error::InvalidInput(format!(
            "{} ids for {} feature grids",
            ids.len(),
            grids.len()
        )));
    }
    if shard_size == 0 {
        return Err(Error::InvalidInput("shard_size must be positive".into()));
    }
    let per = rows * cols * dim;
    if let Some(bad) = grids.iter().position(|g| g.len() != per) {
        return Err(Error::InvalidInput(format!(
            "grid {bad} has {} values, expected {per}",
            grids[bad].len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut samples = BTreeMap::new();
    for (s, chunk) in grids.chunks(shard_size).enumerate() {
        let name = shard_name(s);
        let mut buf = Vec::with_capacity(HEADER_LEN + chunk.len() * per * 4);
        buf.extend_from_slice(&FEATURE_MAGIC);
        for v in [FEATURE_VERSION, chunk.len() as u32, rows as u32, cols as u32, dim as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for (j, grid) in chunk.iter().enumerate() {
            let id = &ids[s * shard_size + j];
            let offset = buf.len() as u64;
            if samples
                .insert(id.clone(), IndexEntry { shard: name.clone(), offset })
                .is_some()
            {
                return Err(Error::InvalidInput(format!("duplicate sample id {id}")));
            }
            for v in grid {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let path = dir.join(&name);
        fs::write(&path, buf).map_err(|e| Error::io(path, e))?;
    }
    let index = FeatureIndex {
        version: FEATURE_VERSION,
        rows,
        cols,
        feature_dim: dim,
        samples,
    };
    let path = dir.join(INDEX_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(path, e))?;
    Ok(index)
}

fn read_u32(buf: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(buf[at..at + 4].try_into().unwrap())
}

/// All shards of a feature directory, loaded into memory.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    dir: PathBuf,
    index: FeatureIndex,
    shards: BTreeMap<String, Vec<u8>>,
}

impl FeatureStore {
    pub fn open(dir: PathBuf) -> Result<Self> {
        let index_path = dir.join(INDEX_FILE);
        let raw = fs::read(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: FeatureIndex = serde_json::from_slice(&raw)
            .map_err(|e| Error::corrupt(&index_path, e.to_string()))?;
        if index.version != FEATURE_VERSION {
            return Err(Error::corrupt(
                &index_path,
                format!("unsupported index version {}", index.version),
            ));
        }
        let mut shards = BTreeMap::new();
        for entry in index.samples.values() {
            if shards.contains_key(&entry.shard) {
                continue;
            }
            let path = dir.join(&entry.shard);
            let buf = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            Self::check_header(&path, &buf, &index)?;
            shards.insert(entry.shard.clone(), buf);
        }
        Ok(Self { dir, index, shards })
    }

    fn check_header(path: &Path, buf: &[u8], index: &FeatureIndex) -> Result<()> {
        if buf.len() < HEADER_LEN || buf[..8] != FEATURE_MAGIC {
            return Err(Error::corrupt(path, "bad feature shard magic"));
        }
        let version = read_u32(buf, 8);
        if version != FEATURE_VERSION {
            return Err(Error::corrupt(path, format!("unsupported shard version {version}")));
        }
        let count = read_u32(buf, 12) as usize;
        let (rows, cols, dim) = (
            read_u32(buf, 16) as usize,
            read_u32(buf, 20) as usize,
            read_u32(buf, 24) as usize,
        );
        if (rows, cols, dim) != (index.rows, index.cols, index.feature_dim) {
            return Err(Error::corrupt(path, "shard grid does not match index"));
        }
        if buf.len() != HEADER_LEN + count * rows * cols * dim * 4 {
            return Err(Error::corrupt(path, "shard length does not match header"));
        }
        Ok(())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn rows(&self) -> usize {
        self.index.rows
    }

    pub fn cols(&self) -> usize {
        self.index.cols
    }

    pub fn feature_dim(&self) -> usize {
        self.index.feature_dim
    }

    pub fn len(&self) -> usize {
        self.index.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.samples.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.index.samples.keys().map(String::as_str)
    }

    pub fn grid(&self, id: &str) -> Result<Vec<f32>> {
        let entry = self
            .index
            .samples
            .get(id)
            .ok_or_else(|| Error::InvalidInput(format!("sample {id} not in feature index")))?;
        let buf = &self.shards[&entry.shard];
        let per = self.rows() * self.cols() * self.feature_dim();
        let start = entry.offset as usize;
        let end = start + per * 4;
        if start < HEADER_LEN || end > buf.len() {
            return Err(Error::corrupt(
                self.dir.join(&entry.shard),
                format!("offset {start} for {id} out of range"),
            ));
        }
        Ok(buf[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    /// `[ids.len(), rows·cols, dim]` f32 tensor.
    pub fn gather(&self, ids: &[String]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(ids.len() * self.rows() * self.cols() * self.feature_dim());
        for id in ids {
            data.extend(self.grid(id)?);
        }
        Ok(Tensor::from_vec(
            data,
            (ids.len(), self.rows() * self.cols(), self.feature_dim()),
            &Device::Cpu,
        )?)
    }
}
