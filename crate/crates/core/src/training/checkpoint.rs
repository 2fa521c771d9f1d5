//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic            8 bytes  "FTALCKPT"
//! format_version   u32
//! model_config     u32 length + canonical JSON
//! step             u64
//! params           u32 count + arrays
//! aux              u32 count + arrays      (projection heads)
//! adam_step        u64
//! moments          u32 count + (u64 len + f64 m[len] + f64 v[len]) per array
//! rng              u8 flag, then seed[32] + u128 word_pos + u64 cursor + u64 epoch
//! ```
//!
//! An array is `u32 name length + name + u32 ndim + u64 dims[ndim] + f64
//! data`.

use std::fs;
use std::path::Path;

use super::optim::AdamState;
use crate::data::StreamState;
use crate::error::{Error, Result};
use crate::transformer::{ModelConfig, NamedArray, ParameterSet};

pub const MAGIC: &[u8; 8] = b"FTALCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub step: u64,
    pub params: Vec<NamedArray>,
    /// Extra trainable arrays that are not part of the model itself.
    pub aux: Vec<NamedArray>,
    /// Moments cover `params` followed by `aux`.
    pub optimizer: AdamState,
    pub rng_state: Option<StreamState>,
}

impl Checkpoint {
    /// A step-0 checkpoint of freshly initialised parameters.
    pub fn from_params(params: &ParameterSet) -> Self {
        Checkpoint {
            model_config: params.config.clone(),
            step: 0,
            optimizer: AdamState::new(&params.arrays),
            params: params.arrays.clone(),
            aux: Vec::new(),
            rng_state: None,
        }
    }

    pub fn parameter_set(&self) -> Result<ParameterSet> {
        ParameterSet::from_arrays(self.model_config.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let cfg = serde_json::to_string(&self.model_config).expect("model config serializes");
        put_bytes(&mut w, cfg.as_bytes());
        w.extend_from_slice(&self.step.to_le_bytes());
        put_arrays(&mut w, &self.params);
        put_arrays(&mut w, &self.aux);
        w.extend_from_slice(&self.optimizer.step.to_le_bytes());
        put_u32(&mut w, self.optimizer.m.len());
        for (m, v) in self.optimizer.m.iter().zip(&self.optimizer.v) {
            w.extend_from_slice(&(m.len() as u64).to_le_bytes());
            put_f64s(&mut w, m);
            put_f64s(&mut w, v);
        }
        match &self.rng_state {
            None => w.push(0),
            Some(s) => {
                w.push(1);
                w.extend_from_slice(&s.seed);
                w.extend_from_slice(&s.epoch_word_pos.to_le_bytes());
                w.extend_from_slice(&(s.cursor as u64).to_le_bytes());
                w.extend_from_slice(&s.epoch.to_le_bytes());
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let cfg_len = r.u32()? as usize;
        let model_config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)
            .map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
        let step = r.u64()?;
        let params = r.arrays()?;
        let aux = r.arrays()?;
        let adam_step = r.u64()?;
        let n = r.u32()? as usize;
        let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            let len = r.len()?;
            m.push(r.f64s(len)?);
            v.push(r.f64s(len)?);
        }
        let rng_state = match r.take(1)?[0] {
            0 => None,
            1 => {
                let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
                let epoch_word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
                Some(StreamState {
                    seed,
                    epoch_word_pos,
                    cursor: r.u64()? as usize,
                    epoch: r.u64()?,
                })
            }
            f => return Err(Error::Checkpoint(format!("bad rng flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let total: Vec<usize> = params.iter().chain(&aux).map(|a| a.data.len()).collect();
        if m.iter().map(Vec::len).collect::<Vec<_>>() != total {
            return Err(Error::Checkpoint("optimizer moments do not match parameters".into()));
        }
        let ckpt = Checkpoint {
            model_config,
            step,
            params,
            aux,
            optimizer: AdamState { step: adam_step, m, v },
            rng_state,
        };
        ckpt.parameter_set()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Loads and checks that the stored architecture is `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if !ckpt.model_config.same_shape(expected) {
            return Err(Error::Checkpoint(format!(
                "{} holds model {:?}, expected {:?}",
                path.display(),
                ckpt.model_config,
                expected
            )));
        }
        Ok(ckpt)
    }
}

fn put_u32(w: &mut Vec<u8>, x: usize) {
    w.extend_from_slice(&u32::try_from(x).expect("fits in u32").to_le_bytes());
}

fn put_bytes(w: &mut Vec<u8>, b: &[u8]) {
    put_u32(w, b.len());
    w.extend_from_slice(b);
}

fn put_f64s(w: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_arrays(w: &mut Vec<u8>, arrays: &[NamedArray]) {
    put_u32(w, arrays.len());
    for a in arrays {
        put_bytes(w, a.name.as_bytes());
        put_u32(w, a.shape.len());
        for &d in &a.shape {
            w.extend_from_slice(&(d as u64).to_le_bytes());
        }
        put_f64s(w, &a.data);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// A u64 element count, bounded by the bytes left so corrupt input
    /// cannot trigger a huge allocation.
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > ((self.bytes.len() - self.pos) / 8) as u64 {
            return Err(Error::Checkpoint(format!("array length {n} exceeds file size")));
        }
        Ok(n as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn arrays(&mut self) -> Result<Vec<NamedArray>> {
        let n = self.u32()? as usize;
        let mut out = Vec::new();
        for _ in 0..n {
            let name_len = self.u32()? as usize;
            let name = String::from_utf8(self.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
            let ndim = self.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(self.len()?);
            }
            let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let count = count
                .filter(|&c| c <= (self.bytes.len() - self.pos) / 8)
                .ok_or_else(|| Error::Checkpoint(format!("array {name} exceeds file size")))?;
            let data = self.f64s(count)?;
            out.push(NamedArray { name, shape, data });
        }
        Ok(out)
    }
}
