//! Versioned binary container for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "UIOCKPT\0"
//! version   u32      1
//! kind      u32 len + UTF-8       e.g. "vq", "model", "train-state"
//! header    u64 len + UTF-8 JSON  kind-specific configuration
//! count     u32
//! tensors   count x { u32 name len, name, u64 rows, u64 cols, rows*cols f64 }
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const MAGIC: &[u8; 8] = b"UIOCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub header: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, header: serde_json::Value) -> Self {
        Self { kind: kind.into(), header, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format { offset: 0, message: format!("checkpoint has no tensor {name:?}") })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind.len() as u32).to_le_bytes());
        out.extend_from_slice(self.kind.as_bytes());
        let header = serde_json::to_vec(&self.header).expect("json value serializes");
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let mut r = Reader { b, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format { offset: 0, message: "not a checkpoint (bad magic)".into() });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format { offset: 8, message: format!("unsupported checkpoint version {version}") });
        }
        let kl = r.u32()? as usize;
        let kind = r.string(kl)?;
        let hl = r.u64()? as usize;
        let at = r.pos;
        let header = serde_json::from_slice(r.take(hl)?)
            .map_err(|e| Error::Format { offset: at, message: format!("bad header json: {e}") })?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let nl = r.u32()? as usize;
            let name = r.string(nl)?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let count = rows.checked_mul(cols).ok_or_else(|| r.err("tensor shape overflows"))?;
            let raw = r.take(count.checked_mul(8).ok_or_else(|| r.err("tensor size overflows"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push((name, Tensor::from_vec(rows, cols, data)));
        }
        if r.pos != b.len() {
            return Err(r.err("trailing bytes after last tensor"));
        }
        Ok(Self { kind, header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format { offset: 12, message: format!("expected a {kind:?} checkpoint, found {:?}", self.kind) });
        }
        Ok(())
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, m: &str) -> Error {
        Error::Format { offset: self.pos, message: m.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.b.len() - self.pos < n {
            return Err(Error::Format { offset: self.b.len(), message: format!("truncated: need {n} bytes at {}", self.pos) });
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format { offset: at, message: "invalid UTF-8".into() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut c = Checkpoint::new("model", serde_json::json!({"a": 1}));
        c.push("w", Tensor::from_vec(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]));
        c.push("b", Tensor::zeros(1, 0));
        let b = c.to_bytes();
        let d = Checkpoint::from_bytes(&b).unwrap();
        assert_eq!(d.to_bytes(), b);
        assert_eq!(d.get("w").unwrap().data()[1].to_bits(), (-0.0f64).to_bits());
        assert!(d.expect_kind("vq").is_err());
    }

    #[test]
    fn truncation_is_reported() {
        let mut c = Checkpoint::new("vq", serde_json::json!({}));
        c.push("w", Tensor::zeros(3, 3));
        let b = c.to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&b[..b.len() - 1]), Err(Error::Format { .. })));
        assert!(Checkpoint::from_bytes(b"nope").is_err());
    }
}
