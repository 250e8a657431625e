//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VEC1"  u16 version  [u8; 32] config fingerprint
//! u32 n   n × record        (parameters)
//! u32 m   m × record        (optimizer accumulators)
//! u64 epoch  u64 steps
//! [u8; 32] rng seed  u64 rng stream  u128 rng word position
//!
//! record = u32 name_len, name (utf-8), u32 ndim, ndim × u32 dim, f64 × Π dim
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VEC1";
pub const CHECKPOINT_VERSION: u16 = 1;

pub type Fingerprint = [u8; 32];

/// SHA-256 over a domain tag and the canonical JSON of each part.
pub fn fingerprint<T: Serialize + ?Sized>(tag: &str, parts: &[&T]) -> Fingerprint {
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    h.update([0u8]);
    for p in parts {
        let json = serde_json::to_vec(p).expect("config serializes");
        h.update((json.len() as u64).to_le_bytes());
        h.update(&json);
    }
    h.finalize().into()
}

/// Serializable position of a ChaCha stream.
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
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

impl Default for RngState {
    fn default() -> Self {
        Self::capture(&ChaCha8Rng::seed_from_u64(0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: Fingerprint,
    pub params: ParamSet,
    pub optimizer: ParamSet,
    pub epoch: u64,
    pub steps: u64,
    pub rng: RngState,
}

fn put_records(out: &mut Vec<u8>, set: &ParamSet) {
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    for (name, t) in set.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    context: &'a str,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            context: self.context.to_owned(),
            offset: self.pos,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated: need {n} bytes, {} remain",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array()?))
    }

    fn records(&mut self) -> Result<ParamSet> {
        let n = self.u32()?;
        let mut set = ParamSet::new();
        for _ in 0..n {
            let len = self.u32()? as usize;
            let start = self.pos;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| Error::Format {
                    context: self.context.to_owned(),
                    offset: start,
                    message: "record name is not utf-8".into(),
                })?
                .to_owned();
            let ndim = self.u32()? as usize;
            if ndim > 8 {
                return Err(self.fail(format!("implausible rank {ndim} for `{name}`")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(self.u32()? as usize);
            }
            let count: usize = shape.iter().product();
            let raw = self.take(
                count
                    .checked_mul(8)
                    .ok_or_else(|| self.fail("size overflow"))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if set
                .insert(name.clone(), Tensor::new(shape, data)?)
                .is_some()
            {
                return Err(self.fail(format!("duplicate record `{name}`")));
            }
        }
        Ok(set)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint);
        put_records(&mut out, &self.params);
        put_records(&mut out, &self.optimizer);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.steps.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], context: &str) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            context,
        };
        if r.take(4)? != CHECKPOINT_MAGIC {
            r.pos = 0;
            return Err(r.fail("bad magic, expected \"VEC1\""));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.fail(format!("unsupported version {version}")));
        }
        let fingerprint = r.array::<32>()?;
        let params = r.records()?;
        let optimizer = r.records()?;
        let epoch = r.u64()?;
        let steps = r.u64()?;
        let rng = RngState {
            seed: r.array()?,
            stream: r.u64()?,
            word_pos: r.u128()?,
        };
        if r.pos != bytes.len() {
            return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            fingerprint,
            params,
            optimizer,
            epoch,
            steps,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint and, when `expected` is given, checks its fingerprint.
    pub fn load(path: &Path, expected: Option<&Fingerprint>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt = Self::from_bytes(&bytes, &path.display().to_string())?;
        if let Some(fp) = expected {
            ckpt.verify(fp)?;
        }
        Ok(ckpt)
    }

    pub fn verify(&self, expected: &Fingerprint) -> Result<()> {
        if &self.fingerprint != expected {
            return Err(Error::Fingerprint {
                expected: hex::encode(expected),
                found: hex::encode(self.fingerprint),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn sample() -> Checkpoint {
        let mut params = ParamSet::new();
        params.insert(
            "a.w",
            Tensor::matrix(2, 3, vec![1.0, -2.5, 3.25, 0.0, -0.0, 1e-300]).unwrap(),
        );
        params.insert("b", Tensor::vector(vec![f64::MAX]));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        rng.next_u64();
        Checkpoint {
            fingerprint: fingerprint("t", &[&1u32]),
            optimizer: params.zeros_like(),
            params,
            epoch: 3,
            steps: 600,
            rng: RngState::capture(&rng),
        }
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.rng.restore().next_u64(), c.rng.restore().next_u64());
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample().to_bytes();
        for cut in [0, 3, 5, 20, bytes.len() / 2, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut], "mem").unwrap_err();
            match err {
                Error::Format { offset, .. } => assert!(offset <= cut),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_fingerprint() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, "mem"),
            Err(Error::Format { offset: 0, .. })
        ));
        let c = sample();
        assert!(c.verify(&fingerprint("t", &[&2u32])).is_err());
        assert!(c.verify(&fingerprint("t", &[&1u32])).is_ok());
    }
}
