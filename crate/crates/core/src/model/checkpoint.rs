//! Binary checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic        8 bytes  "SBTOYMDL"
//! version      u32
//! num_layers   u32
//! hidden_dim   u32
//! vocab_size   u32
//! max_context  u32
//! seed         u64
//! head_mode    u8       0 = trained, 1 = oracle
//! tensors      repeated: u64 element count, then that many f64
//! ```
//!
//! Tensors follow [`ToyModel::base_tensors`] order, then the exit heads for
//! layers `1..L`.

use std::io::{Read, Write};
use std::path::Path;

use super::{HeadMode, LayerParams, ToyModel, ToyModelSpec, FFN_EXPANSION};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SBTOYMDL";
pub const CHECKPOINT_VERSION: u32 = 1;

impl ToyModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for dim in [
            self.spec.num_layers,
            self.spec.hidden_dim,
            self.spec.vocab_size,
            self.spec.max_context,
        ] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.spec.seed.to_le_bytes());
        out.push(match self.head_mode {
            HeadMode::Trained => 0,
            HeadMode::Oracle => 1,
        });
        let heads = self.exit_heads.iter().map(|h| &h[..]);
        for t in self.base_tensors().into_iter().chain(heads) {
            out.extend_from_slice(&(t.len() as u64).to_le_bytes());
            for x in t {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ToyModel> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic; not a model checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let spec = ToyModelSpec {
            num_layers: r.u32()? as usize,
            hidden_dim: r.u32()? as usize,
            vocab_size: r.u32()? as usize,
            max_context: r.u32()? as usize,
            seed: r.u64()?,
        };
        spec.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        let head_mode = match r.take(1)?[0] {
            0 => HeadMode::Trained,
            1 => HeadMode::Oracle,
            m => return Err(Error::Checkpoint(format!("unknown head mode {m}"))),
        };
        let d = spec.hidden_dim;
        let v = spec.vocab_size;
        let f = FFN_EXPANSION * d;

        let embedding = r.tensor("embedding", v * d)?;
        let mut layers = Vec::with_capacity(spec.num_layers);
        for _ in 0..spec.num_layers {
            layers.push(LayerParams {
                attn_gain: r.tensor("attn_gain", d)?,
                wq: r.tensor("wq", d * d)?,
                wk: r.tensor("wk", d * d)?,
                wv: r.tensor("wv", d * d)?,
                wo: r.tensor("wo", d * d)?,
                ffn_gain: r.tensor("ffn_gain", d)?,
                w_up: r.tensor("w_up", f * d)?,
                w_down: r.tensor("w_down", d * f)?,
            });
        }
        let final_gain = r.tensor("final_gain", d)?;
        let lm_head = r.tensor("lm_head", v * d)?;
        let exit_heads = (1..spec.num_layers)
            .map(|_| r.tensor("exit_head", v * d))
            .collect::<Result<Vec<_>>>()?;
        if r.at != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(ToyModel { spec, embedding, layers, final_gain, lm_head, exit_heads, head_mode })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ToyModel> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.at..end];
                self.at = end;
                Ok(s)
            }
            None => Err(Error::Checkpoint(format!("truncated at byte {}", self.at))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self, name: &str, expected: usize) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n != expected {
            return Err(Error::Checkpoint(format!("tensor {name}: expected {expected} elements, found {n}")));
        }
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}
