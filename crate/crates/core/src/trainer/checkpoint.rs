//! Versioned binary checkpoint: config, pipelines, parameters and centers,
//! sealed with a SHA-256 trailer.
//!
//! Layout (little-endian):
//! `"DDMC"`, version u32, config text, config hash, pipelines JSON,
//! image dims (3 x u32), tensor count u32, tensors, center flag u8, centers,
//! then 32 digest bytes over everything before them. Strings are u32
//! length-prefixed; a tensor is rank u32, dims u32 each, then f64 values.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::hex;
use super::{model_shape, RunConfig};
use crate::augment::AugmentationPipeline;
use crate::datasets::ImageDims;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"DDMC";
const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub dims: ImageDims,
    pub params: ModelParams,
    pub pipelines: Vec<AugmentationPipeline>,
    /// Frozen cluster centers, absent when training ended before any M-step.
    pub centers: Option<Vec<Tensor>>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    put_u32(out, t.shape().len());
    for &d in t.shape() {
        put_u32(out, d);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        match self.pos.checked_add(len).filter(|&e| e <= self.bytes.len()) {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(format!("truncated checkpoint: wanted {len} bytes"))),
        }
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()?;
        let at = self.pos;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Parse {
            offset: at,
            msg: "invalid utf-8".into(),
        })
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()?;
        if rank > 4 {
            return Err(self.err(format!("implausible tensor rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| self.err("tensor too large"))?;
        let raw = self.take(len.checked_mul(8).ok_or_else(|| self.err("tensor too large"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(&shape, data)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION as usize);
        put_str(&mut out, &self.config.to_text());
        put_str(&mut out, &self.config.hash_hex());
        let pipelines = serde_json::to_string(&self.pipelines)
            .map_err(|e| Error::Contract(format!("pipelines do not serialize: {e}")))?;
        put_str(&mut out, &pipelines);
        for d in [self.dims.height, self.dims.width, self.dims.channels] {
            put_u32(&mut out, d);
        }
        let tensors = self.params.tensors();
        put_u32(&mut out, tensors.len());
        for t in tensors {
            put_tensor(&mut out, t);
        }
        match &self.centers {
            None => out.push(0),
            Some(cs) => {
                out.push(1);
                put_u32(&mut out, cs.len());
                for c in cs {
                    put_tensor(&mut out, c);
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + DIGEST_LEN || &bytes[..4] != MAGIC {
            return Err(Error::Parse {
                offset: 0,
                msg: "not a DDMC checkpoint".into(),
            });
        }
        let (body, trailer) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(Error::Integrity("checkpoint digest does not match its contents".into()));
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(r.err(format!("unsupported checkpoint version {version}")));
        }
        let config = RunConfig::parse_text(&r.string()?)?;
        let stored_hash = r.string()?;
        if stored_hash != config.hash_hex() {
            return Err(Error::Integrity(format!(
                "embedded config hash {stored_hash} does not match config {}",
                config.hash_hex()
            )));
        }
        let at = r.pos;
        let pipelines: Vec<AugmentationPipeline> = serde_json::from_str(&r.string()?).map_err(|e| Error::Parse {
            offset: at,
            msg: format!("pipelines: {e}"),
        })?;
        let dims = ImageDims::new(r.u32()?, r.u32()?, r.u32()?);
        let mut params = ModelParams::new(model_shape(&config, dims.len()), config.tau, 0);
        let count = r.u32()?;
        let mut slots = params.tensors_mut();
        if count != slots.len() {
            return Err(r.err(format!("expected {} parameter tensors, found {count}", slots.len())));
        }
        for slot in slots.iter_mut() {
            let t = r.tensor()?;
            if t.shape() != slot.shape() {
                return Err(Error::dim("checkpoint", slot.shape(), t.shape()));
            }
            **slot = t;
        }
        let centers = match r.take(1)?[0] {
            0 => None,
            1 => {
                let k = r.u32()?;
                Some((0..k).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?)
            }
            other => return Err(r.err(format!("bad center flag {other}"))),
        };
        if r.pos != body.len() {
            return Err(r.err(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self {
            config,
            dims,
            params,
            pipelines,
            centers,
        })
    }

    /// Hex digest stored in the trailer of [`Checkpoint::to_bytes`].
    pub fn digest_hex(bytes: &[u8]) -> Option<String> {
        (bytes.len() >= DIGEST_LEN).then(|| hex(&bytes[bytes.len() - DIGEST_LEN..]))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
