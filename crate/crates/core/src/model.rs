//! Encoder + decoder parameter container and the EQRG checkpoint format.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "EQRG" | u32 version | u32 T | T x u32 topology | f64 weights... | u32 crc32
//! ```
//!
//! Topology words: `c0, n_hidden, hidden.., c_out, graph_mode, k,
//! radius_lo, radius_hi, n_dec_hidden, dec_hidden..`, where the radius is an
//! f64 split into two u32 halves. Weights follow [`ModelParams::tensors`].
//! The CRC covers every byte before it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, DecoderParams};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{invalid, Error, Result};
use crate::rng::RandomStream;
use crate::vn::{GraphConfig, GraphMode};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EQRG";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn fast() -> Self {
        Self {
            encoder: EncoderConfig::fast(),
            decoder: DecoderConfig::default(),
        }
    }

    fn topology(&self) -> Vec<u32> {
        let e = &self.encoder;
        let mut t = vec![e.c0 as u32, e.hidden.len() as u32];
        t.extend(e.hidden.iter().map(|&h| h as u32));
        t.push(e.c_out as u32);
        t.push(match e.graph.mode {
            GraphMode::Knn => 0,
            GraphMode::Ball => 1,
        });
        t.push(e.graph.k as u32);
        let bits = e.graph.radius.to_bits();
        t.push(bits as u32);
        t.push((bits >> 32) as u32);
        t.push(self.decoder.hidden.len() as u32);
        t.extend(self.decoder.hidden.iter().map(|&h| h as u32));
        t
    }

    fn from_topology(t: &[u32]) -> Result<Self> {
        let bad = || Error::Integrity("truncated topology block".into());
        let mut it = t.iter().map(|&x| x as usize);
        let mut next = || it.next().ok_or_else(bad);
        let c0 = next()?;
        let n_hidden = next()?;
        let hidden = (0..n_hidden).map(|_| next()).collect::<Result<Vec<_>>>()?;
        let c_out = next()?;
        let mode = match next()? {
            0 => GraphMode::Knn,
            1 => GraphMode::Ball,
            m => return Err(Error::Integrity(format!("unknown graph mode {m}"))),
        };
        let k = next()?;
        let lo = next()? as u64;
        let hi = next()? as u64;
        let n_dec = next()?;
        let dec_hidden = (0..n_dec).map(|_| next()).collect::<Result<Vec<_>>>()?;
        if next().is_ok() {
            return Err(Error::Integrity("trailing topology words".into()));
        }
        let cfg = Self {
            encoder: EncoderConfig {
                c0,
                hidden,
                c_out,
                graph: GraphConfig {
                    mode,
                    k,
                    radius: f64::from_bits(lo | (hi << 32)),
                },
            },
            decoder: DecoderConfig { hidden: dec_hidden },
        };
        cfg.encoder
            .validate()
            .map_err(|e| Error::Integrity(format!("topology: {e}")))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, rng: &mut RandomStream) -> Result<Self> {
        let encoder = EncoderParams::init(&config.encoder, &mut rng.split(0))?;
        let decoder = DecoderParams::init(config.encoder.c_out, &config.decoder, &mut rng.split(1))?;
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            encoder: self.encoder.zeros_like(),
            decoder: self.decoder.zeros_like(),
        }
    }

    /// Encoder tensors followed by decoder tensors.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.encoder.tensors();
        t.extend(self.decoder.tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.decoder.tensors_mut());
        t
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Self) {
        for (d, s) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (a, b) in d.iter_mut().zip(s) {
                *a += b;
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let topo = self.config.topology();
        let mut out = Vec::with_capacity(16 + 4 * topo.len() + 8 * self.num_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(topo.len() as u32).to_le_bytes());
        for w in topo {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for t in self.tensors() {
            for x in t {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Integrity("checkpoint too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Integrity(format!(
                "checkpoint CRC mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        if &body[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Integrity("bad checkpoint magic".into()));
        }
        let word = |i: usize| -> Result<u32> {
            body.get(i..i + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| Error::Integrity("truncated checkpoint header".into()))
        };
        let version = word(4)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Integrity(format!("unsupported checkpoint version {version}")));
        }
        let n_topo = word(8)? as usize;
        let topo = (0..n_topo).map(|i| word(12 + 4 * i)).collect::<Result<Vec<_>>>()?;
        let config = ModelConfig::from_topology(&topo)?;
        let mut params = Self::init(&config, &mut RandomStream::new(0))
            .map_err(|e| Error::Integrity(format!("topology: {e}")))?;
        let weights = &body[12 + 4 * n_topo..];
        if weights.len() != 8 * params.num_params() {
            return Err(Error::Integrity(format!(
                "expected {} weight bytes, found {}",
                8 * params.num_params(),
                weights.len()
            )));
        }
        let mut chunks = weights.chunks_exact(8);
        for t in params.tensors_mut() {
            for x in t.iter_mut() {
                *x = f64::from_le_bytes(chunks.next().unwrap().try_into().unwrap());
            }
        }
        if !params.is_finite() {
            return Err(Error::Integrity("checkpoint holds non-finite weights".into()));
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Validates that `params` matches `config`; used when loading configs alongside checkpoints.
pub fn check_topology(params: &ModelParams, config: &ModelConfig) -> Result<()> {
    if params.config.topology() != config.topology() {
        return Err(invalid("checkpoint topology differs from the requested config"));
    }
    Ok(())
}
