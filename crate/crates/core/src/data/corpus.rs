use std::fs;
use std::path::Path;

use super::{FrameSequence, Utterance};
use crate::error::{Error, Result};

pub const CORPUS_MAGIC: &[u8; 4] = b"DLBC";
pub const CORPUS_VERSION: u32 = 1;

/// Serialises utterances: magic, version, count, then per utterance the
/// frame count, feature dim, little-endian `f32` frames, token count and
/// `u32` tokens.
pub fn encode_corpus(utts: &[Utterance]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CORPUS_MAGIC);
    out.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
    out.extend_from_slice(&(utts.len() as u32).to_le_bytes());
    for u in utts {
        let f = u.frames();
        out.extend_from_slice(&(f.frames() as u32).to_le_bytes());
        out.extend_from_slice(&(f.dim() as u32).to_le_bytes());
        for v in f.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(u.reference().len() as u32).to_le_bytes());
        for t in u.reference() {
            out.extend_from_slice(&t.to_le_bytes());
        }
    }
    out
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn decode_corpus(buf: &[u8]) -> Result<Vec<Utterance>> {
    let mut r = Reader::new(buf);
    if r.bytes(4).map_err(|_| Error::Format("missing corpus header".into()))? != CORPUS_MAGIC {
        return Err(Error::Format("bad corpus magic".into()));
    }
    let version = r.u32()?;
    if version != CORPUS_VERSION {
        return Err(Error::Format(format!("unsupported corpus version {version}")));
    }
    let count = r.u32()? as usize;
    let mut utts = Vec::with_capacity(count.min(1 << 16));
    let mut dim = None;
    for i in 0..count {
        let frames = r.u32()? as usize;
        let f = r.u32()? as usize;
        if frames == 0 || f == 0 || dim.is_some_and(|d| d != f) {
            return Err(Error::Format(format!(
                "dimension mismatch in utterance {i}: {frames}x{f}"
            )));
        }
        dim = Some(f);
        let n = frames
            .checked_mul(f)
            .ok_or_else(|| Error::Format("frame count overflow".into()))?;
        if n > buf.len() {
            return Err(Error::Format(format!("truncated file in utterance {i}")));
        }
        let data = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        let u_len = r.u32()? as usize;
        if u_len > buf.len() {
            return Err(Error::Format(format!("truncated file in utterance {i}")));
        }
        let tokens = (0..u_len).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let frames = FrameSequence::new(frames, f, data).map_err(|e| Error::Format(e.to_string()))?;
        utts.push(Utterance::new(frames, tokens).map_err(|e| Error::Format(e.to_string()))?);
    }
    if !r.at_end() {
        return Err(Error::Format("trailing bytes after corpus".into()));
    }
    Ok(utts)
}

pub fn write_corpus(path: &Path, utts: &[Utterance]) -> Result<()> {
    fs::write(path, encode_corpus(utts))?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<Utterance>> {
    decode_corpus(&fs::read(path)?)
}
