//! Named-tensor checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "IDLEKPT1"
//! u32 tensor count
//! per tensor: u32 name length, UTF-8 name, u32 rank, u32 dims[rank], f64 data
//! u64 metadata length, JSON metadata
//! ```

use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"IDLEKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub metadata: Value,
}

impl Checkpoint {
    pub fn new(tensors: Vec<(String, Tensor)>, metadata: Value) -> Self {
        Checkpoint { tensors, metadata }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&u32_of(self.tensors.len(), "tensor count")?.to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&u32_of(name.len(), "name length")?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&u32_of(t.rank(), "rank")?.to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = serde_json::to_vec(&self.metadata)?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(r.error(0, "bad magic"));
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let at = r.pos;
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| r.error(at, "name is not UTF-8"))?
                .to_string();
            let at = r.pos;
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u32("dimension").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if rank == 0 || shape.contains(&0) {
                return Err(r.error(at, &format!("invalid shape {shape:?} for {name}")));
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| r.error(at, "shape overflows"))?;
            let byte_len = numel
                .checked_mul(8)
                .ok_or_else(|| r.error(at, "shape overflows"))?;
            let raw = r.take(byte_len, "tensor data")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let at = r.pos;
        let meta_len = usize::try_from(r.u64("metadata length")?)
            .map_err(|_| r.error(at, "metadata length overflows"))?;
        let at = r.pos;
        let metadata = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| r.error(at, &format!("metadata is not JSON: {e}")))?;
        if r.pos != bytes.len() {
            return Err(r.error(r.pos, "trailing bytes"));
        }
        Ok(Checkpoint { tensors, metadata })
    }

    /// Writes through a temporary sibling and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Checkpoint {
        offset: 0,
        reason: format!("{what} {v} exceeds u32"),
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
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(self.error(self.pos, &format!("truncated {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use serde_json::json;

    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint::new(
            vec![
                (
                    "adapter.w".into(),
                    Tensor::new([2, 3], vec![1.0, -0.0, 2.5, f64::MIN_POSITIVE, 1e300, -7.0])
                        .unwrap(),
                ),
                ("head.b".into(), Tensor::row(&[0.25])),
            ],
            json!({"step": 12, "losses": [0.5, 0.25]}),
        )
    }

    #[test]
    fn layout_starts_with_magic_and_count() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"IDLEKPT1");
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &9u32.to_le_bytes());
        assert_eq!(&bytes[16..25], b"adapter.w");
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ckpt = sample();
        ckpt.save(&path).unwrap();
        let first = fs::read(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);
        loaded.save(&path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in 0..bytes.len() {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            match err {
                Error::Checkpoint { offset, .. } => assert!(offset <= cut),
                other => panic!("unexpected {other}"),
            }
        }
    }

    #[test]
    fn corrupt_headers_report_offsets() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Checkpoint { offset: 0, .. })
        ));

        let mut bytes = sample().to_bytes().unwrap();
        // Rank of the first tensor set to zero.
        bytes[25..29].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Checkpoint { offset: 25, .. })
        ));

        let mut bytes = sample().to_bytes().unwrap();
        bytes.push(0);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn random_tensors_round_trip(values in proptest::collection::vec(any::<f64>(), 1..40), step in any::<u32>()) {
            let ckpt = Checkpoint::new(
                vec![("x".into(), Tensor::new([values.len()], values).unwrap())],
                json!({"step": step}),
            );
            let bytes = ckpt.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }
}
