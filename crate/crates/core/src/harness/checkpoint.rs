//! Binary checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "PDWN" | version u32 | payload length u64 | payload | CRC32(payload) u32
//! ```
//!
//! The payload holds the model kind, the run's settings as `key=value`
//! text, the training step, the RNG position, and every named parameter as
//! `name, rank, dims, raw f64 data`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::Params;
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"PDWN";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// `teacher`, `student` or `classifier`.
    pub kind: String,
    pub config: String,
    pub step: u64,
    pub rng: RngState,
    pub params: Params,
}

struct Encoder(Vec<u8>);

impl Encoder {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("field overruns payload at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::CorruptCheckpoint("invalid utf-8".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut p = Encoder(Vec::new());
        p.str(&self.kind);
        p.str(&self.config);
        p.u64(self.step);
        p.u64(self.rng.seed);
        p.u64(self.rng.stream);
        p.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        p.u32(self.params.len() as u32);
        for (name, t) in self.params.iter() {
            p.str(name);
            p.u32(t.rank() as u32);
            for &d in t.shape() {
                p.u64(d as u64);
            }
            for &v in t.data() {
                p.0.extend_from_slice(&v.to_le_bytes());
            }
        }
        let payload = p.0;
        let mut out = Vec::with_capacity(payload.len() + HEADER_LEN + 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() {
            return Err(Error::Truncated);
        }
        if bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let total = usize::try_from(len)
            .ok()
            .and_then(|l| l.checked_add(HEADER_LEN + 4))
            .ok_or(Error::Truncated)?;
        if bytes.len() < total {
            return Err(Error::Truncated);
        }
        if bytes.len() > total {
            return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", bytes.len() - total)));
        }
        let payload = &bytes[HEADER_LEN..total - 4];
        let stored = u32::from_le_bytes(bytes[total - 4..].try_into().unwrap());
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }

        let mut d = Decoder { buf: payload, pos: 0 };
        let kind = d.str()?;
        let config = d.str()?;
        let step = d.u64()?;
        let rng = RngState {
            seed: d.u64()?,
            stream: d.u64()?,
            word_pos: d.u128()?,
        };
        let count = d.u32()?;
        let mut params = Params::new();
        for _ in 0..count {
            let name = d.str()?;
            let rank = d.u32()? as usize;
            let shape = (0..rank)
                .map(|_| d.u64().map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &s| acc.checked_mul(s))
                .ok_or_else(|| Error::CorruptCheckpoint(format!("`{name}` has an absurd shape")))?;
            let raw = d.take(n.checked_mul(8).ok_or(Error::Truncated)?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if params.get(&name).is_some() {
                return Err(Error::CorruptCheckpoint(format!("duplicate parameter `{name}`")));
            }
            params.insert(name, Tensor::new(shape, data)?);
        }
        if d.pos != payload.len() {
            return Err(Error::CorruptCheckpoint("unread payload bytes".into()));
        }
        Ok(Checkpoint {
            kind,
            config,
            step,
            rng,
            params,
        })
    }

    /// Writes through a temporary file and a rename, so an interrupted save
    /// never clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless this checkpoint holds a model of `kind`.
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::CorruptCheckpoint(format!("expected a {kind} checkpoint, found {}", self.kind)))
        }
    }
}
