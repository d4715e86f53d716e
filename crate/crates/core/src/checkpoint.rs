//! Binary checkpoint container for model parameters and optimizer state.
//!
//! Byte layout, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes  "ENARFCK1"
//! dtype        u32      4 = float32, 8 = float64
//! resolution   u32      tri-plane resolution R
//! extent       f64      tri-plane half extent
//! parts        u32      K
//! feat_ch      u32      feature channels per plane (0 without tri-planes)
//! prob_ch      u32      probability channels per plane (K or 0)
//! meta_len     u32      length of the JSON metadata that follows
//! meta         bytes    {"config": ModelConfig, "canonical": CanonicalPose}
//! n_tensors    u32
//! per tensor:  name_len u16, name (utf-8), ndim u8, dims u32 × ndim,
//!              fan_in u32 (0 = none), values dtype × Π dims
//! has_adam     u8       0 or 1
//! if has_adam: step u64, adam config (lr, decay, beta1, beta2, eps as f64,
//!              equalize u8), then the first- and second-moment vectors,
//!              each as n_tensors blocks of values in tensor order
//! ```
//!
//! Float32 matches the portable plane format; float64 round-trips training
//! state exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffengine::{AdamConfig, AdamState, ParamLayout, ParamSlice, ParamStore};
use crate::error::{Error, Result};
use crate::kinematics::CanonicalPose;
use crate::model::{Model, ModelConfig};
use crate::triplane::FEATURE_CHANNELS;

pub const MAGIC: &[u8; 8] = b"ENARFCK1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u32 {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        match c {
            4 => Ok(Dtype::F32),
            8 => Ok(Dtype::F64),
            _ => Err(Error::Format(format!("unknown dtype code {c}"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    canonical: CanonicalPose,
}

/// Everything needed to rebuild a model and continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub canonical: CanonicalPose,
    pub params: ParamStore,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(model: &Model, params: ParamStore, adam: Option<AdamState>) -> Result<Self> {
        if params.layout != *model.layout() {
            return Err(Error::Validation(
                "parameters do not match the model layout".into(),
            ));
        }
        if adam
            .as_ref()
            .is_some_and(|a| a.m.len() != params.len() || a.v.len() != params.len())
        {
            return Err(Error::Validation(
                "optimizer state does not match the parameters".into(),
            ));
        }
        Ok(Self {
            config: model.config().clone(),
            canonical: model.canonical().clone(),
            params,
            adam,
        })
    }

    pub fn model(&self) -> Result<Model> {
        Model::new(self.config.clone(), self.canonical.clone())
    }

    pub fn to_bytes(&self, dtype: Dtype) -> Result<Vec<u8>> {
        let mut w = Writer {
            buf: Vec::new(),
            dtype,
        };
        w.buf.extend_from_slice(MAGIC);
        w.u32(dtype.code());
        let model = self.model()?;
        let k = model.parts();
        w.u32(len_u32(self.config.resolution)?);
        w.f64(self.config.extent);
        w.u32(len_u32(k)?);
        let v = model.variant();
        w.u32(if v.uses_triplane() {
            FEATURE_CHANNELS as u32
        } else {
            0
        });
        w.u32(if v.uses_prob_planes() { len_u32(k)? } else { 0 });
        let meta = serde_json::to_vec(&Meta {
            config: self.config.clone(),
            canonical: self.canonical.clone(),
        })
        .map_err(|e| Error::Format(e.to_string()))?;
        w.u32(len_u32(meta.len())?);
        w.buf.extend_from_slice(&meta);
        let slices = self.params.layout.slices();
        w.u32(len_u32(slices.len())?);
        for s in slices {
            let name = s.name.as_bytes();
            let nl = u16::try_from(name.len())
                .map_err(|_| Error::Format("tensor name too long".into()))?;
            w.buf.extend_from_slice(&nl.to_le_bytes());
            w.buf.extend_from_slice(name);
            let nd = u8::try_from(s.shape.len())
                .map_err(|_| Error::Format("too many dimensions".into()))?;
            w.buf.push(nd);
            for &d in &s.shape {
                w.u32(len_u32(d)?);
            }
            w.u32(len_u32(s.fan_in.unwrap_or(0))?);
            w.values(&self.params.values[s.range()]);
        }
        match &self.adam {
            None => w.buf.push(0),
            Some(a) => {
                w.buf.push(1);
                w.buf.extend_from_slice(&a.step.to_le_bytes());
                let c = &a.config;
                for x in [c.lr, c.decay, c.beta1, c.beta2, c.eps] {
                    w.f64(x);
                }
                w.buf.push(u8::from(c.equalize));
                w.values(&a.m);
                w.values(&a.v);
            }
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            dtype: Dtype::F64,
        };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        r.dtype = Dtype::from_code(r.u32()?)?;
        let resolution = r.u32()? as usize;
        let extent = r.f64()?;
        let parts = r.u32()? as usize;
        let feat_ch = r.u32()? as usize;
        let prob_ch = r.u32()? as usize;
        let meta_len = r.u32()? as usize;
        let meta: Meta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Format(e.to_string()))?;
        let model = Model::new(meta.config.clone(), meta.canonical.clone())?;
        let v = model.variant();
        let expect_feat = if v.uses_triplane() {
            FEATURE_CHANNELS
        } else {
            0
        };
        let expect_prob = if v.uses_prob_planes() { parts } else { 0 };
        if resolution != meta.config.resolution
            || extent.to_bits() != meta.config.extent.to_bits()
            || parts != model.parts()
            || feat_ch != expect_feat
            || prob_ch != expect_prob
        {
            return Err(Error::Format(
                "header disagrees with the embedded model description".into(),
            ));
        }
        let n = r.u32()? as usize;
        let mut slices = Vec::with_capacity(n.min(1024));
        let mut values = Vec::new();
        for _ in 0..n {
            let nl = u16::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(nl)?)
                .map_err(|_| Error::Format("tensor name is not utf-8".into()))?
                .to_string();
            let nd = r.take(1)?[0] as usize;
            let shape = (0..nd)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let fan_in = match r.u32()? {
                0 => None,
                f => Some(f as usize),
            };
            let s = ParamSlice {
                name,
                offset: values.len(),
                shape,
                fan_in,
            };
            r.values(s.len(), &mut values)?;
            slices.push(s);
        }
        let layout = ParamLayout::from_slices(slices)?;
        if layout != *model.layout() {
            return Err(Error::Format(
                "tensor table does not match the model layout".into(),
            ));
        }
        let params = ParamStore::from_values(layout, values)?;
        let adam = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = u64::from_le_bytes(r.array()?);
                let config = AdamConfig {
                    lr: r.f64()?,
                    decay: r.f64()?,
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    eps: r.f64()?,
                    equalize: r.take(1)?[0] != 0,
                };
                let mut m = Vec::with_capacity(params.len());
                r.values(params.len(), &mut m)?;
                let mut v = Vec::with_capacity(params.len());
                r.values(params.len(), &mut v)?;
                Some(AdamState { config, step, m, v })
            }
            f => return Err(Error::Format(format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            config: meta.config,
            canonical: meta.canonical,
            params,
            adam,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
        std::fs::write(path, self.to_bytes(dtype)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{n} does not fit in u32")))
}

struct Writer {
    buf: Vec<u8>,
    dtype: Dtype,
}

impl Writer {
    fn u32(&mut self, x: u32) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }

    fn f64(&mut self, x: f64) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }

    fn values(&mut self, v: &[f64]) {
        for &x in v {
            match self.dtype {
                Dtype::F32 => self.buf.extend_from_slice(&(x as f32).to_le_bytes()),
                Dtype::F64 => self.buf.extend_from_slice(&x.to_le_bytes()),
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    dtype: Dtype,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn values(&mut self, n: usize, out: &mut Vec<f64>) -> Result<()> {
        let width = self.dtype.code() as usize;
        let raw = self.take(
            n.checked_mul(width)
                .ok_or_else(|| Error::Format("tensor too large".into()))?,
        )?;
        match self.dtype {
            Dtype::F32 => out.extend(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64),
            ),
            Dtype::F64 => out.extend(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap())),
            ),
        }
        Ok(())
    }
}
