//! Checkpoint file format.
//!
//! Layout: magic `CFMC`, u32 version, u64-length-prefixed canonical TOML
//! snapshot (config + run state), tensor table (u32 count; per tensor a
//! u16-length-prefixed UTF-8 name, u8 dtype tag, u32 rank, u64 dims, then
//! the little-endian f64 payload), and a trailing FNV-1a 64-bit checksum of
//! every preceding byte. Round-trips are bitwise; any corruption is caught
//! by magic/version/length/checksum checks.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::tensor::RngStream;

const MAGIC: &[u8; 4] = b"CFMC";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

/// Name, shape, payload.
pub type NamedTensor = (String, Vec<usize>, Vec<f64>);

/// Where a checkpoint came from and how to resume it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunState {
    /// Stage that produced this checkpoint: stage1 / stage2 / adversarial / fm-baseline.
    pub stage: String,
    /// Cumulative epochs across all completed stages.
    pub epochs_completed: u64,
    /// One entry per completed stage, e.g. "stage1:50".
    pub history: Vec<String>,
    /// RNG lane states at save time.
    pub streams: BTreeMap<String, RngStream>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Snapshot {
    config: Config,
    state: RunState,
}

/// A saved model: config snapshot, run state, and every named tensor
/// (network parameters and optimizer moments).
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub config: Config,
    pub state: RunState,
    pub tensors: Vec<NamedTensor>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn new(config: Config, state: RunState, tensors: Vec<NamedTensor>) -> Self {
        Checkpoint { version: FORMAT_VERSION, config, state, tensors }
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|(n, _, _)| n == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let snapshot = Snapshot { config: self.config.clone(), state: self.state.clone() };
        let text = toml::to_string(&snapshot).map_err(|e| Error::Checkpoint(e.to_string()))?;

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.tensors {
            let expect: usize = shape.iter().product();
            if expect != data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: payload {} != shape product {expect}",
                    data.len()
                )));
            }
            if name.len() > u16::MAX as usize {
                return Err(Error::Checkpoint(format!("tensor name too long: {name}")));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let checksum = fnv1a(&out);
        out.extend_from_slice(&checksum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 8 + 4 + 8 {
            return Err(Error::Checkpoint("file too short for header".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        let computed = fnv1a(body);
        if stored != computed {
            return Err(Error::Checkpoint(format!(
                "checksum mismatch: stored {stored:#018x}, computed {computed:#018x}"
            )));
        }

        let mut cur = Cursor { buf: body, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version {version} unsupported (expected {FORMAT_VERSION})"
            )));
        }
        let text_len = cur.u64()? as usize;
        let text = std::str::from_utf8(cur.take(text_len)?)
            .map_err(|e| Error::Checkpoint(format!("snapshot not UTF-8: {e}")))?;
        let snapshot: Snapshot =
            toml::from_str(text).map_err(|e| Error::Checkpoint(format!("snapshot: {e}")))?;

        let count = cur.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = cur.u16()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|e| Error::Checkpoint(format!("tensor name not UTF-8: {e}")))?
                .to_string();
            let dtype = cur.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::Checkpoint(format!("tensor {name}: unknown dtype {dtype}")));
            }
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = cur.take(numel * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, shape, data));
        }
        if cur.pos != body.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after tensor table",
                body.len() - cur.pos
            )));
        }
        Ok(Checkpoint { version, config: snapshot.config, state: snapshot.state, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_checkpoint() -> Checkpoint {
        let mut state = RunState {
            stage: "stage1".into(),
            epochs_completed: 50,
            history: vec!["stage1:50".into()],
            streams: BTreeMap::new(),
        };
        state.streams.insert("data".into(), RngStream::new(7).child(2));
        Checkpoint::new(
            Config::default(),
            state,
            vec![
                ("vf.hidden0.weight".into(), vec![2, 3], vec![0.1, -0.2, 0.3, 1.5, -2.5, 0.0]),
                ("vf.head.bias".into(), vec![2], vec![f64::MIN_POSITIVE, -0.0]),
            ],
        )
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ckpt = sample_checkpoint();
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.version, ckpt.version);
        assert_eq!(back.config, ckpt.config);
        assert_eq!(back.state, ckpt.state);
        assert_eq!(back.tensors.len(), ckpt.tensors.len());
        for ((n1, s1, d1), (n2, s2, d2)) in ckpt.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(s1, s2);
            for (a, b) in d1.iter().zip(d2) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        // Serialization itself is deterministic.
        assert_eq!(bytes, back.to_bytes().unwrap());
    }

    #[test]
    fn every_corrupted_byte_is_detected() {
        let bytes = sample_checkpoint().to_bytes().unwrap();
        for i in (0..bytes.len()).step_by(7) {
            let mut bad = bytes.clone();
            bad[i] ^= 0x40;
            assert!(
                Checkpoint::from_bytes(&bad).is_err(),
                "corruption at byte {i} went unnoticed"
            );
        }
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = sample_checkpoint().to_bytes().unwrap();
        for cut in [1, 8, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn version_mismatch_refused() {
        let mut ckpt = sample_checkpoint();
        ckpt.version = 2;
        let bytes = ckpt.to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample_checkpoint();
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.to_bytes().unwrap(), ckpt.to_bytes().unwrap());
    }
}
