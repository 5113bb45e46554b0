//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MORV"  u32 version
//! u32 len, config text (key = value lines)
//! u64 epochs completed
//! u32 count, then per tensor:
//!     u32 len, name, u8 dtype, u32 rank, u64 dims[rank], payload
//! u8 has_optimizer
//!     u64 step, f64 lr, beta1, beta2, eps, u32 count,
//!     count × (u32 rank, u64 dims, f64 payload) for m, then the same for v
//! rng: 32-byte key, u64 stream, u128 word position
//! ```
//!
//! Decoding rejects trailing bytes, so `encode(decode(b)) == b`.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{MorError, Result};
use crate::model::MorVit;
use crate::optim::OptimizerState;
use crate::params::ModelParams;
use crate::rng::RngState;
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"MORV";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::F64(t) => t.shape(),
        }
    }

    pub fn to_real<T: Real>(&self) -> Tensor<T> {
        match self {
            TensorData::F32(t) => t.cast(),
            TensorData::F64(t) => t.cast(),
        }
    }

    fn from_real<T: Real>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => TensorData::F32(t.cast()),
            DType::F64 => TensorData::F64(t.cast()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: u64,
    pub tensors: Vec<(String, TensorData)>,
    pub optimizer: Option<OptimizerState>,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn from_model<T: Real>(
        config: &RunConfig,
        model: &MorVit<T>,
        epoch: u64,
        optimizer: Option<&OptimizerState>,
        rng: RngState,
    ) -> Self {
        let mut tensors = Vec::new();
        model
            .params
            .visit(|name, t| tensors.push((name.to_string(), TensorData::from_real(t))));
        Self {
            config: config.clone(),
            epoch,
            tensors,
            optimizer: optimizer.cloned(),
            rng,
        }
    }

    /// Rebuilds the model, converting tensors to `T` if needed.
    pub fn model<T: Real>(&self) -> Result<MorVit<T>> {
        let cfg = &self.config.model;
        let template: ModelParams<Tensor<T>> = crate::params::init_params(cfg, &mut crate::rng::Rng::seed_from(0));
        let names = template.names();
        if names.len() != self.tensors.len() || names.iter().zip(&self.tensors).any(|(a, (b, _))| a != b) {
            return Err(MorError::Config("checkpoint tensors do not match its configuration".into()));
        }
        let mut it = self.tensors.iter();
        let params = template.map(|_, _| it.next().expect("counted").1.to_real());
        MorVit::from_parts(cfg.clone(), params)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, VERSION);
        put_bytes(&mut w, self.config.serialize().as_bytes());
        put_u64(&mut w, self.epoch);
        put_u32(&mut w, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_bytes(&mut w, name.as_bytes());
            w.push(t.dtype().tag());
            put_shape(&mut w, t.shape());
            match t {
                TensorData::F32(t) => t.data().iter().for_each(|v| w.extend_from_slice(&v.to_le_bytes())),
                TensorData::F64(t) => t.data().iter().for_each(|v| w.extend_from_slice(&v.to_le_bytes())),
            }
        }
        match &self.optimizer {
            None => w.push(0),
            Some(o) => {
                w.push(1);
                put_u64(&mut w, o.step);
                for x in [o.lr, o.beta1, o.beta2, o.eps] {
                    w.extend_from_slice(&x.to_le_bytes());
                }
                put_u32(&mut w, o.m.len() as u32);
                for t in o.m.iter().chain(&o.v) {
                    put_shape(&mut w, t.shape());
                    t.data().iter().for_each(|v| w.extend_from_slice(&v.to_le_bytes()));
                }
            }
        }
        w.extend_from_slice(&self.rng.key);
        put_u64(&mut w, self.rng.stream);
        w.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(MorError::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(MorError::format(path, format!("unsupported checkpoint version {version}")));
        }
        let text = std::str::from_utf8(r.bytes()?).map_err(|_| MorError::format(path, "config is not UTF-8"))?;
        let config = RunConfig::parse(text).map_err(|e| MorError::format(path, format!("embedded config: {e}")))?;
        let epoch = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| MorError::format(path, "tensor name is not UTF-8"))?;
            let tag = r.u8()?;
            let dtype = DType::from_tag(tag).ok_or_else(|| MorError::format(path, format!("unknown dtype tag {tag}")))?;
            let shape = r.shape()?;
            let n: usize = shape.iter().product();
            let t = match dtype {
                DType::F32 => {
                    let raw = r.take(n * 4)?;
                    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    TensorData::F32(Tensor::new(&shape, data)?)
                }
                DType::F64 => TensorData::F64(r.f64_tensor(shape)?),
            };
            tensors.push((name, t));
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
                let k = r.u32()? as usize;
                let mut moments = Vec::with_capacity(2 * k.min(1 << 16));
                for _ in 0..2 * k {
                    let shape = r.shape()?;
                    moments.push(r.f64_tensor(shape)?);
                }
                let v = moments.split_off(k);
                Some(OptimizerState {
                    step,
                    lr,
                    beta1,
                    beta2,
                    eps,
                    m: moments,
                    v,
                })
            }
            other => return Err(MorError::format(path, format!("bad optimizer flag {other}"))),
        };
        let key: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        if r.pos != bytes.len() {
            return Err(MorError::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            epoch,
            tensors,
            optimizer,
            rng: RngState { key, stream, word_pos },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| MorError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| MorError::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(w: &mut Vec<u8>, b: &[u8]) {
    put_u32(w, b.len() as u32);
    w.extend_from_slice(b);
}

fn put_shape(w: &mut Vec<u8>, shape: &[usize]) {
    put_u32(w, shape.len() as u32);
    for &d in shape {
        put_u64(w, d as u64);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            MorError::format(self.path, format!("truncated checkpoint at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn shape(&mut self) -> Result<Vec<usize>> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(MorError::format(self.path, format!("implausible tensor rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| MorError::format(self.path, format!("implausible tensor shape {shape:?}")))?;
        Ok(shape)
    }

    fn f64_tensor(&mut self, shape: Vec<usize>) -> Result<Tensor<f64>> {
        let n: usize = shape.iter().product();
        let raw = self.take(n * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(&shape, data)
    }
}
