//! Fixed-width binary corpus cache.
//!
//! Layout (all integers little-endian u32):
//! `CSEQD1`, user count, item count, then per item `len, utf8 bytes`, then per
//! user `len, utf8 bytes, split byte (0 train / 1 test), sequence length,
//! item indices`.

use std::fs;
use std::path::Path;

use super::corpus::{Corpus, Split, UserSequence};
use crate::error::{Error, Result};

pub const CORPUS_MAGIC: &[u8; 6] = b"CSEQD1";

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(buf, s.len())?;
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn encode_corpus(corpus: &Corpus) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CORPUS_MAGIC);
    put_u32(&mut buf, corpus.user_count())?;
    put_u32(&mut buf, corpus.item_count())?;
    for id in corpus.item_ids() {
        put_str(&mut buf, id)?;
    }
    for u in corpus.users() {
        put_str(&mut buf, &u.external_id)?;
        buf.push(match u.split {
            Split::Train => 0,
            Split::Test => 1,
        });
        put_u32(&mut buf, u.items.len())?;
        for &i in &u.items {
            put_u32(&mut buf, i)?;
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("corpus cache truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format("non-utf8 id in cache".into()))
    }
}

pub fn decode_corpus(bytes: &[u8]) -> Result<Corpus> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(CORPUS_MAGIC.len())? != CORPUS_MAGIC {
        return Err(Error::Format("not a corpus cache (bad magic)".into()));
    }
    let n_users = r.u32()?;
    let n_items = r.u32()?;
    let item_ids = (0..n_items).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let mut users = Vec::with_capacity(n_users);
    for _ in 0..n_users {
        let external_id = r.string()?;
        let split = match r.take(1)?[0] {
            0 => Split::Train,
            1 => Split::Test,
            b => return Err(Error::Format(format!("bad split byte {b}"))),
        };
        let len = r.u32()?;
        let items = (0..len).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        users.push(UserSequence {
            external_id,
            items,
            split,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after corpus cache".into()));
    }
    Corpus::from_parts(users, item_ids)
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    fs::write(path, encode_corpus(corpus)?).map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_corpus(&bytes)
}
