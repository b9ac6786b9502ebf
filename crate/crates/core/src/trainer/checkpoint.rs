//! Binary checkpoint container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "OCNT" | u32 version | u8 element width (4 or 8) | u32 entry count
//! per entry: u32 name length | name (UTF-8) | u32 rank | rank × u64 dims | payload
//! u32 config length | config text (key=value lines)
//! rng: 32-byte seed | u64 stream | u128 word position
//! ```

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::numerics::{DType, Scalar, Tensor};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"OCNT";
pub const VERSION: u32 = 1;

/// Position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ParamStore<T>,
    pub config: KeyValues,
    pub rng: RngState,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::DTYPE.byte_width() as u8);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out
    }

    /// Parses a checkpoint written with the same element width as `T`. Trainability
    /// flags are not stored; every loaded tensor is marked trainable.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(r.error(0, "bad magic, not a checkpoint"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.error(4, &format!("unsupported version {version} (expected {VERSION})")));
        }
        let width_at = r.pos;
        let width = r.take(1, "element width")?[0];
        match DType::from_byte_width(width) {
            Some(d) if d == T::DTYPE => {}
            Some(d) => return Err(r.error(width_at, &format!("stored as {d:?}, requested {:?}", T::DTYPE))),
            None => return Err(r.error(width_at, &format!("unknown element width {width}"))),
        }
        let count = r.u32("entry count")?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| r.error(at, "name is not UTF-8"))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            if rank > 8 {
                return Err(r.error(r.pos - 4, &format!("implausible rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("dim")? as usize);
            }
            let numel: usize = shape.iter().product();
            let payload_at = r.pos;
            let size = numel
                .checked_mul(width as usize)
                .ok_or_else(|| r.error(payload_at, "payload size overflows"))?;
            let payload = r.take(size, "payload")?;
            let data: Vec<T> = payload.chunks_exact(width as usize).map(T::read_le).collect();
            let t = Tensor::new(shape, data).map_err(|e| r.error(payload_at, &format!("entry `{name}`: {e}")))?;
            params.insert(name, t.with_grad(true));
        }
        let text_len = r.u32("config length")? as usize;
        let at = r.pos;
        let text = std::str::from_utf8(r.take(text_len, "config")?).map_err(|_| r.error(at, "config is not UTF-8"))?;
        let config = KeyValues::parse(text).map_err(|e| r.error(at, &e.to_string()))?;
        let mut seed = [0u8; 32];
        seed.copy_from_slice(r.take(32, "rng seed")?);
        let stream = r.u64("rng stream")?;
        let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes"));
        if r.pos != bytes.len() {
            return Err(r.error(r.pos, &format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            params,
            config,
            rng: RngState { seed, stream, word_pos },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Element width recorded in a checkpoint file.
pub fn stored_dtype(bytes: &[u8]) -> Result<DType> {
    if bytes.len() < 9 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint {
            offset: 0,
            reason: "bad magic, not a checkpoint".into(),
        });
    }
    DType::from_byte_width(bytes[8]).ok_or(Error::Checkpoint {
        offset: 8,
        reason: format!("unknown element width {}", bytes[8]),
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: usize, reason: &str) -> Error {
        Error::Checkpoint {
            offset,
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(
                self.pos,
                &format!("truncated while reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}
