//! Byte-level tokenizer: ids 0–255 are raw bytes, specials follow.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};

pub const BYTE_VOCAB: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    /// Byte string for each id; specials map to empty strings.
    pieces: Vec<Vec<u8>>,
    pub pad: usize,
    pub bos: usize,
    pub eos: usize,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::bytes()
    }
}

impl Vocab {
    /// 256 byte ids followed by pad = 256, bos = 257, eos = 258.
    pub fn bytes() -> Self {
        let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        pieces.extend([Vec::new(), Vec::new(), Vec::new()]);
        Self {
            pieces,
            pad: 256,
            bos: 257,
            eos: 258,
        }
    }

    pub fn size(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_special(&self, id: usize) -> bool {
        id == self.pad || id == self.bos || id == self.eos
    }

    pub fn piece(&self, id: usize) -> Option<&[u8]> {
        self.pieces.get(id).map(Vec::as_slice)
    }

    /// Byte identity, optionally wrapped in bos/eos. Multi-byte pieces of a
    /// loaded vocabulary are not merged: encoding stays byte-level.
    pub fn encode(&self, text: &[u8], wrap: bool) -> Vec<usize> {
        let mut ids = Vec::with_capacity(text.len() + 2);
        if wrap {
            ids.push(self.bos);
        }
        ids.extend(text.iter().map(|&b| b as usize));
        if wrap {
            ids.push(self.eos);
        }
        ids
    }

    /// Concatenates pieces, dropping specials.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            let piece = self.pieces.get(id).ok_or(Error::TokenOutOfRange {
                id,
                vocab: self.size(),
            })?;
            if !self.is_special(id) {
                out.extend_from_slice(piece);
            }
        }
        Ok(out)
    }

    pub fn decode_lossy(&self, ids: &[usize]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode(ids)?).into_owned())
    }

    /// Reads `id<TAB>hex` lines. Ids must be dense from 0; the first 256 must
    /// be the single bytes; empty hex marks a special, taken in order as
    /// pad, bos, eos.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pieces = Vec::new();
        let mut specials = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::Format(format!("vocab line {}: {msg}", lineno + 1));
            let (id, hex) = line.split_once('\t').ok_or_else(|| bad("expected id<TAB>hex"))?;
            let id: usize = id.trim().parse().map_err(|_| bad("bad id"))?;
            if id != pieces.len() {
                return Err(bad("ids must be dense and ascending"));
            }
            let bytes = decode_hex(hex.trim()).ok_or_else(|| bad("bad hex"))?;
            if id < BYTE_VOCAB && bytes != [id as u8] {
                return Err(bad("ids 0-255 must map to their byte"));
            }
            if bytes.is_empty() {
                specials.push(id);
            }
            pieces.push(bytes);
        }
        if pieces.len() < BYTE_VOCAB || specials.len() < 3 {
            return Err(Error::Format(
                "vocab needs 256 byte ids and three specials".into(),
            ));
        }
        let distinct: HashSet<_> = specials.iter().collect();
        debug_assert_eq!(distinct.len(), specials.len());
        Ok(Self {
            pieces,
            pad: specials[0],
            bos: specials[1],
            eos: specials[2],
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (id, p) in self.pieces.iter().enumerate() {
            s.push_str(&id.to_string());
            s.push('\t');
            for b in p {
                s.push_str(&format!("{b:02x}"));
            }
            s.push('\n');
        }
        s
    }
}

fn decode_hex(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let v = Vocab::bytes();
        assert_eq!(v.size(), 259);
        assert_eq!(v.encode(b"AB", false), vec![65, 66]);
        assert!(v.encode(b"", false).is_empty());
        assert_eq!(v.encode(b"", true), vec![257, 258]);
        assert_eq!(v.decode(&[72, 105]).unwrap(), b"Hi");
        assert_eq!(v.decode(&[72, 256, 105, 258]).unwrap(), b"Hi");
        assert!(matches!(v.decode(&[259]), Err(Error::TokenOutOfRange { id: 259, .. })));
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocab::bytes();
        assert_eq!(Vocab::parse(&v.to_text()).unwrap(), v);
        assert!(Vocab::parse("0\t01\n").is_err());
        assert!(Vocab::parse("1\t01\n").is_err());
    }
}
