//! Binary checkpoint: `CSEQ1`, u16 version, u32 entry count, then per entry
//! a u32-prefixed UTF-8 name, a partition byte, u32 rank, u32 dims and the
//! values as little-endian f32. All integers are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::{Array, ParameterStore, Partition};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"CSEQ1";
pub const CHECKPOINT_VERSION: u16 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(store: &ParameterStore) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(16 + store.scalar_count() * 4);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut buf, store.len())?;
    for (name, p) in store.iter() {
        put_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        buf.push(p.partition.to_byte());
        put_u32(&mut buf, p.value.rank())?;
        for &d in p.value.shape() {
            put_u32(&mut buf, d)?;
        }
        for &v in p.value.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParameterStore> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let v = c.take(2)?;
    let version = u16::from_le_bytes([v[0], v[1]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Compatibility(format!(
            "checkpoint format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let count = c.u32()?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let n = c.u32()?;
        let name = String::from_utf8(c.take(n)?.to_vec())
            .map_err(|_| Error::Format("non-utf8 parameter name".into()))?;
        let partition = Partition::from_byte(c.take(1)?[0])?;
        let rank = c.u32()?;
        let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("shape {shape:?} of `{name}` overflows")))?;
        let raw = c.take(len.checked_mul(4).ok_or_else(|| Error::Format("payload overflows".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        if store.contains(&name) {
            return Err(Error::Format(format!("duplicate parameter `{name}`")));
        }
        store.insert(name, Array::new(shape, data)?, partition);
    }
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParameterStore, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(store)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta::Model;
    use crate::model::ModelConfig;

    fn model() -> Model {
        Model::new(
            ModelConfig {
                n_items: 7,
                dim: 4,
                clusters: 2,
                ..Default::default()
            },
            9,
        )
        .unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let bytes = encode_checkpoint(&model().params).unwrap();
        assert_eq!(&bytes[..5], b"CSEQ1");
        assert_eq!(&bytes[5..7], &[1, 0]);
        let loaded = decode_checkpoint(&bytes).unwrap();
        assert_eq!(encode_checkpoint(&loaded).unwrap(), bytes);
        let m = model();
        for (name, p) in loaded.iter() {
            let orig = m.params.get(name).unwrap();
            assert_eq!(p.partition, orig.partition);
            assert!(p.value.max_abs_diff(&orig.value) < 1e-6);
        }
    }

    #[test]
    fn scalar_entries_round_trip() {
        let mut s = ParameterStore::new();
        s.insert("x", Array::scalar(1.5), Partition::Adapted);
        let back = decode_checkpoint(&encode_checkpoint(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = encode_checkpoint(&model().params).unwrap();
        assert!(matches!(decode_checkpoint(b"NOPE1\x01\x00"), Err(Error::Format(_))));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_checkpoint(&extra), Err(Error::Format(_))));
        let mut v2 = bytes;
        v2[5] = 2;
        assert!(matches!(decode_checkpoint(&v2), Err(Error::Compatibility(_))));
    }
}
