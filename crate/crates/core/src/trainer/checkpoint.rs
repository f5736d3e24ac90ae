//! Single-file checkpoint container.
//!
//! ```text
//! magic        [u8; 8]  b"PXRCKPT\0"
//! version      u32      1
//! config_hash  [u8; 32] sha256 of the canonical config text
//! count        u32      number of tensors
//! count × {
//!   name_len u32, name (utf-8)
//!   dtype    u8         0 = f32, 1 = f64
//!   ndim     u32, dims u64 × ndim
//!   data     little-endian values
//! }
//! trailer_len  u64
//! trailer      JSON: step, generator state, EMA decays, canonical config
//! ```
//!
//! Tensor names are `param/<name>`, `adam.m/<name>`, `adam.v/<name>` and
//! `ema/<decay>/<name>`. All integers are little-endian.

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EmaShadow, TrainState};
use crate::alignment::PREFIX as ALIGN_PREFIX;
use crate::error::{Error, Result};
use crate::params::{ParamStore, TensorMap};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"PXRCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const PARAM: &str = "param/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";
const EMA: &str = "ema/";

pub fn config_hash(canonical: &str) -> [u8; 32] {
    Sha256::digest(canonical.as_bytes()).into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex-encoded 32-byte seed.
    pub seed: String,
    pub stream: u64,
    /// Decimal `u128` word position.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |what: &str| Error::State(format!("invalid generator {what} in checkpoint"));
        let seed: [u8; 32] = hex::decode(&self.seed)
            .ok()
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| bad("seed"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("position"))?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trailer {
    pub step: u64,
    pub rng: RngState,
    pub ema_decays: Vec<f64>,
    pub config: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub tensors: TensorMap,
    pub trailer: Trailer,
}

fn ema_prefix(decay: f64) -> String {
    format!("{EMA}{decay}/")
}

fn prefixed(map: &TensorMap, prefix: &str, into: &mut TensorMap) -> Result<()> {
    for (name, t) in map.iter() {
        into.insert(format!("{prefix}{name}"), t.detach().copy()?);
    }
    Ok(())
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, canonical_config: &str) -> Result<Self> {
        let mut tensors = TensorMap::new();
        prefixed(&state.params.snapshot()?, PARAM, &mut tensors)?;
        prefixed(&state.adam_m, ADAM_M, &mut tensors)?;
        prefixed(&state.adam_v, ADAM_V, &mut tensors)?;
        for e in &state.ema {
            prefixed(&e.params, &ema_prefix(e.decay), &mut tensors)?;
        }
        Ok(Self {
            config_hash: config_hash(canonical_config),
            tensors,
            trailer: Trailer {
                step: state.step,
                rng: RngState::capture(&state.rng),
                ema_decays: state.ema.iter().map(|e| e.decay).collect(),
                config: canonical_config.to_string(),
            },
        })
    }

    pub fn params(&self) -> TensorMap {
        self.tensors.sub_map(PARAM)
    }

    pub fn ema(&self, decay: f64) -> Result<TensorMap> {
        if !self.trailer.ema_decays.contains(&decay) {
            return Err(Error::Usage(format!(
                "checkpoint has no EMA shadow with decay {decay} (available: {:?})",
                self.trailer.ema_decays
            )));
        }
        Ok(self.tensors.sub_map(&ema_prefix(decay)))
    }

    /// Raw parameters for `None`, otherwise the chosen EMA shadow.
    pub fn select(&self, ema: Option<f64>) -> Result<TensorMap> {
        match ema {
            None => Ok(self.params()),
            Some(d) => self.ema(d),
        }
    }

    /// Drop every alignment-head tensor (params, moments, shadows). Returns
    /// the number removed.
    pub fn strip_alignment_head(&mut self) -> usize {
        let head = format!("{ALIGN_PREFIX}.");
        let doomed: Vec<String> = self
            .tensors
            .names()
            .filter(|n| n.rsplit('/').next().is_some_and(|leaf| leaf.starts_with(&head)))
            .map(str::to_string)
            .collect();
        for n in &doomed {
            self.tensors.remove(n);
        }
        doomed.len()
    }

    /// Rebuild the optimizer state in `dtype`.
    pub fn to_state(&self, dtype: DType) -> Result<TrainState> {
        let params = self.params().to_dtype(dtype)?;
        let adam_m = self.tensors.sub_map(ADAM_M).to_dtype(dtype)?;
        let adam_v = self.tensors.sub_map(ADAM_V).to_dtype(dtype)?;
        if !adam_m.names().eq(params.names()) || !adam_v.names().eq(params.names()) {
            return Err(Error::State("checkpoint optimizer moments do not match parameters".into()));
        }
        let ema = self
            .trailer
            .ema_decays
            .iter()
            .map(|&decay| {
                let shadow = self.ema(decay)?.to_dtype(dtype)?;
                if !shadow.names().eq(params.names()) {
                    return Err(Error::State(format!("EMA shadow {decay} does not match parameters")));
                }
                Ok(EmaShadow { decay, params: shadow })
            })
            .collect::<Result<_>>()?;
        Ok(TrainState {
            params: ParamStore::from_map(&params)?,
            adam_m,
            adam_v,
            step: self.trailer.step,
            ema,
            rng: self.trailer.rng.restore()?,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.config_hash);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.tensors.iter() {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            let flat = t.flatten_all()?;
            match t.dtype() {
                DType::F64 => {
                    buf.push(1);
                    push_dims(&mut buf, t.dims());
                    for v in flat.to_vec1::<f64>()? {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
                _ => {
                    buf.push(0);
                    push_dims(&mut buf, t.dims());
                    for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        let trailer = serde_json::to_vec(&self.trailer)?;
        buf.extend_from_slice(&(trailer.len() as u64).to_le_bytes());
        buf.extend_from_slice(&trailer);
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0, path };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::corrupt(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::State(format!(
                "checkpoint format version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let header_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let count = r.u32()? as usize;
        let mut tensors = TensorMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::corrupt(path, "tensor name is not utf-8"))?;
            let dtype = r.take(1)?[0];
            let ndim = r.u32()? as usize;
            let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::corrupt(path, "tensor size overflows"))?;
            let t = match dtype {
                0 => {
                    let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::corrupt(path, "tensor too large"))?)?;
                    let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, dims, &Device::Cpu)?
                }
                1 => {
                    let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::corrupt(path, "tensor too large"))?)?;
                    let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, dims, &Device::Cpu)?
                }
                other => return Err(Error::corrupt(path, format!("unknown dtype tag {other} for {name}"))),
            };
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::corrupt(path, format!("duplicate tensor {name}")));
            }
        }
        let trailer_len = r.u64()? as usize;
        let trailer: Trailer = serde_json::from_slice(r.take(trailer_len)?)
            .map_err(|e| Error::corrupt(path, format!("bad trailer: {e}")))?;
        if r.pos != bytes.len() {
            return Err(Error::corrupt(path, "trailing bytes after trailer"));
        }
        if config_hash(&trailer.config) != header_hash {
            return Err(Error::corrupt(path, "embedded config does not match header hash"));
        }
        Ok(Self { config_hash: header_hash, tensors, trailer })
    }

    /// Write via a temporary file and rename, so readers never see a partial file.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn push_dims(buf: &mut Vec<u8>, dims: &[usize]) {
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::corrupt(self.path, format!("truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(state: &TrainState, canonical_config: &str, path: &Path) -> Result<()> {
    Checkpoint::from_state(state, canonical_config)?.write(path)
}

/// Load and, when `expected` is given, refuse a checkpoint written under a
/// different config.
pub fn load_checkpoint(path: &Path, expected: Option<&[u8; 32]>) -> Result<Checkpoint> {
    let ckpt = Checkpoint::read(path)?;
    if let Some(want) = expected {
        if &ckpt.config_hash != want {
            return Err(Error::State(format!(
                "checkpoint {} was written under config {}, current config is {}",
                path.display(),
                hex::encode(ckpt.config_hash),
                hex::encode(want)
            )));
        }
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::tensor_bits;
    use rand::RngCore;

    fn state() -> TrainState {
        let dev = Device::Cpu;
        let params: TensorMap = [
            ("backbone.w".to_string(), Tensor::new(&[[1.5f32, -2.0], [0.25, 3.0]], &dev).unwrap()),
            ("align.mta.proj.weight".to_string(), Tensor::new(&[0.5f32], &dev).unwrap()),
        ]
        .into_iter()
        .collect();
        let mut s = TrainState::new(&params, &[0.9, 0.99], 7).unwrap();
        s.step = 12;
        s.rng.next_u64();
        s
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let s = state();
        let ck = Checkpoint::from_state(&s, "cfg = 1\n").unwrap();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert!(back.tensors.bit_equal(&ck.tensors).unwrap());
        assert_eq!(back.trailer, ck.trailer);
        let restored = back.to_state(DType::F32).unwrap();
        assert_eq!(restored.step, 12);
        assert!(restored.params.snapshot().unwrap().bit_equal(&s.params.snapshot().unwrap()).unwrap());
        let mut a = s.rng.clone();
        let mut b = restored.rng.clone();
        assert_eq!(a.next_u64(), b.next_u64());
        assert_eq!(restored.ema.len(), 2);
    }

    #[test]
    fn truncation_is_corruption() {
        let bytes = Checkpoint::from_state(&state(), "x").unwrap().to_bytes().unwrap();
        for cut in [0, 5, 20, 60, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut], Path::new("t")),
                Err(Error::Corrupt { .. })
            ));
        }
    }

    #[test]
    fn version_and_hash_mismatch_refused() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        save_checkpoint(&state(), "a", &p).unwrap();
        assert!(load_checkpoint(&p, Some(&config_hash("a"))).is_ok());
        assert!(matches!(load_checkpoint(&p, Some(&config_hash("b"))), Err(Error::State(_))));

        let mut bytes = fs::read(&p).unwrap();
        bytes[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes, &p), Err(Error::State(_))));
    }

    #[test]
    fn strip_removes_head_everywhere() {
        let mut ck = Checkpoint::from_state(&state(), "x").unwrap();
        // param + two moments + two shadows.
        assert_eq!(ck.strip_alignment_head(), 5);
        assert!(ck.tensors.names().all(|n| !n.contains("align.")));
        assert_eq!(ck.params().len(), 1);
        assert_eq!(ck.ema(0.99).unwrap().len(), 1);
    }

    #[test]
    fn f64_tensors_survive() {
        let params: TensorMap = [("w".to_string(), Tensor::new(&[0.1f64, 1e-300], &Device::Cpu).unwrap())]
            .into_iter()
            .collect();
        let s = TrainState::new(&params, &[], 0).unwrap();
        let ck = Checkpoint::from_state(&s, "").unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap(), Path::new("m")).unwrap();
        assert_eq!(
            tensor_bits(back.params().get("w").unwrap()).unwrap(),
            tensor_bits(params.get("w").unwrap()).unwrap()
        );
    }
}
