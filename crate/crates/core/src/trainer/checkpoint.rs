//! OGCK checkpoint: little-endian binary.
//!
//! ```text
//! "OGCK" | version u32 | config_len u32 | ModelConfig JSON
//! count u32 | count x (name_len u32, name, rank u32, dims u32..., param f32s, m f32s, v f32s)
//! step u64 | rng seed [u8; 32] | rng stream u64 | rng word position u128
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::AdamState;
use crate::error::{Error, Result};
use crate::network::{ModelConfig, ModelParams, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"OGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Exact position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ModelParams<f32>,
    pub adam: AdamState,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn step(&self) -> u64 {
        self.adam.step
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.model).expect("config serializes");
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for buf in [
                &t.data,
                &self.adam.m.get(name).expect("moments").data,
                &self.adam.v.get(name).expect("moments").data,
            ] {
                for v in buf {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out.extend_from_slice(&self.adam.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { buf: bytes };
        let magic = r.array::<4>("magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = r.u32("header")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let len = r.u32("config")? as usize;
        let model: ModelConfig = serde_json::from_slice(r.take(len, "config")?)?;
        model.validate()?;
        let count = r.u32("buffer table")? as usize;
        let (mut params, mut m, mut v) = (BTreeMap::new(), BTreeMap::new(), BTreeMap::new());
        for _ in 0..count {
            let name_len = r.u32("buffer table")? as usize;
            let name = String::from_utf8(r.take(name_len, "buffer table")?.to_vec())
                .map_err(|_| Error::Inconsistent("buffer name is not UTF-8".into()))?;
            let rank = r.u32("buffer table")? as usize;
            if rank > 4 {
                return Err(Error::Inconsistent(format!("buffer `{name}` has rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| r.u32("buffer table").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            for map in [&mut params, &mut m, &mut v] {
                let data = r.floats(n, "buffer payload")?;
                map.insert(
                    name.clone(),
                    Tensor {
                        shape: shape.clone(),
                        data,
                    },
                );
            }
        }
        let step = u64::from_le_bytes(r.array::<8>("step")?);
        let seed = r.array::<32>("rng state")?;
        let stream = u64::from_le_bytes(r.array::<8>("rng state")?);
        let word_pos = u128::from_le_bytes(r.array::<16>("rng state")?);
        if !r.buf.is_empty() {
            return Err(Error::Inconsistent(format!("{} trailing bytes", r.buf.len())));
        }
        let params = ModelParams::from_tensors(params);
        params.check_layout(&model)?;
        Ok(Checkpoint {
            model,
            params,
            adam: AdamState {
                m: ModelParams::from_tensors(m),
                v: ModelParams::from_tensors(v),
                step,
            },
            rng: RngState { seed, stream, word_pos },
        })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Truncated(what));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array::<4>(what)?))
    }

    fn floats(&mut self, n: usize, what: &'static str) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or(Error::Truncated(what))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

/// Reads a checkpoint; with `expected` set, its model config must match exactly.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let ckpt = Checkpoint::from_bytes(&fs::read(path)?)?;
    if let Some(want) = expected {
        if *want != ckpt.model {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint was trained with {}, expected {}",
                serde_json::to_string(&ckpt.model)?,
                serde_json::to_string(want)?
            )));
        }
    }
    Ok(ckpt)
}
