//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"SOFTCKP1"  u32 version  u32 tensor_count
//! per tensor:  u16 name_len, name (UTF-8), u8 rank, rank × u32 dims, f32 data
//! u32 metadata_len, metadata (UTF-8 `key=value` lines, LF-terminated)
//! ```
//!
//! Tensors are written in name order and metadata in key order, so a
//! save→load→save cycle reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use crate::encoder::ParamSet;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const MAGIC: &[u8; 8] = b"SOFTCKP1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(params: &ParamSet, metadata: BTreeMap<String, String>) -> Self {
        Self {
            tensors: params.clone().into_map(),
            metadata,
        }
    }

    pub fn params(&self) -> ParamSet {
        ParamSet::from(self.tensors.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Invalid(format!("tensor name too long: `{name}`")))?;
            let rank = u8::try_from(t.rank())
                .map_err(|_| Error::Invalid(format!("tensor `{name}` rank too large")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(rank);
            for &d in t.dims() {
                let d = u32::try_from(d)
                    .map_err(|_| Error::Invalid(format!("tensor `{name}` extent too large")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Invalid(format!("metadata entry `{k}` not encodable")));
            }
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(r.error(0, "bad magic, not a checkpoint"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32("tensor count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let at = r.pos;
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| r.error(at + 2, "tensor name not UTF-8"))?
                .to_string();
            let rank = r.take(1, "rank")?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32("dimension")? as usize);
            }
            let n: usize = dims.iter().product();
            let data_at = r.pos;
            let raw = r.take(n * 4, "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let t = Tensor::new(&dims, data)
                .map_err(|e| r.error(data_at, &format!("tensor `{name}`: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(r.error(at, &format!("duplicate tensor `{name}`")));
            }
        }
        let len = r.u32("metadata length")? as usize;
        let at = r.pos;
        let text = std::str::from_utf8(r.take(len, "metadata")?)
            .map_err(|_| r.error(at, "metadata not UTF-8"))?;
        let mut metadata = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| r.error(at, &format!("metadata line without `=`: {line:?}")))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        if r.pos != bytes.len() {
            return Err(r.error(r.pos, "trailing bytes after metadata"));
        }
        Ok(Self { tensors, metadata })
    }

    /// Writes the checkpoint and returns the number of bytes written.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<usize> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(bytes.len())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) struct Reader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn error(&self, offset: usize, msg: &str) -> Error {
        Error::Parse {
            offset: offset as u64,
            msg: msg.to_string(),
        }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error(self.pos, &format!("truncated while reading {what}"))),
        }
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "w".to_string(),
            Tensor::new(&[2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap(),
        );
        let mut metadata = BTreeMap::new();
        metadata.insert("step".to_string(), "7".to_string());
        Checkpoint { tensors, metadata }
    }

    #[test]
    fn known_tensor_encodes_to_fixture() {
        let bytes = sample().to_bytes().unwrap();
        let mut want = b"SOFTCKP1".to_vec();
        want.extend([1, 0, 0, 0, 1, 0, 0, 0]);
        want.extend([1, 0, b'w', 2, 2, 0, 0, 0, 2, 0, 0, 0]);
        for v in [1.0f32, -2.0, 0.5, 3.0] {
            want.extend(v.to_le_bytes());
        }
        want.extend([7, 0, 0, 0]);
        want.extend(b"step=7\n");
        assert_eq!(bytes, want);
        assert_eq!(&bytes[28..32], &[0x00, 0x00, 0x80, 0x3f]);
    }

    #[test]
    fn empty_set_is_header_only() {
        let bytes = Checkpoint::default().to_bytes().unwrap();
        assert_eq!(bytes.len(), 8 + 4 + 4 + 4);
        assert_eq!(&bytes[12..16], &[0, 0, 0, 0]);
    }

    #[test]
    fn save_load_save_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let mut ck = sample();
        ck.tensors.insert(
            "v".into(),
            Tensor::vector(vec![0.1, 1.0 / 3.0, -7e-9]).unwrap(),
        );
        ck.save(&a).unwrap();
        Checkpoint::load(&a).unwrap().save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample().to_bytes().unwrap();
        match Checkpoint::from_bytes(&bytes[..30]) {
            Err(Error::Parse { offset, msg }) => {
                assert_eq!(offset, 28);
                assert!(msg.contains("tensor data"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..5]),
            Err(Error::Parse { offset: 0, .. })
        ));
    }

    #[test]
    fn wrong_version_and_magic_are_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::UnsupportedVersion { found: 2, expected: 1 })
        ));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Parse { .. })));
    }

    #[test]
    fn missing_file_is_io_error_with_path() {
        let e = Checkpoint::load("/nonexistent/x.ckpt").unwrap_err();
        assert!(e.is_io());
        assert!(e.to_string().contains("/nonexistent/x.ckpt"));
    }
}
