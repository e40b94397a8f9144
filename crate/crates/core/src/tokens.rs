//! Byte-level tokens. Each byte maps to its own id; two reserved ids mark
//! end- and begin-of-sequence, giving a fixed vocabulary of 258.

use alloc::string::String;
use alloc::vec::Vec;

use crate::{Error, Result};

pub const VOCAB_SIZE: u32 = 258;
pub const EOS: u32 = 256;
pub const BOS: u32 = 257;

/// Rendered stand-ins for the reserved ids when detokenizing.
const EOS_GLYPH: char = '\u{2403}'; // ␃
const BOS_GLYPH: char = '\u{2402}'; // ␂

/// An N x T matrix of token ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    n: usize,
    t: usize,
    ids: Vec<u32>,
}

impl TokenBatch {
    pub fn new(n: usize, t: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != n * t {
            return Err(Error::ShapeMismatch {
                op: "token_batch",
                detail: alloc::format!("{n}x{t} wants {} ids, got {}", n * t, ids.len()),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= VOCAB_SIZE) {
            return Err(Error::TokenOutOfRange { id: bad, vocab: VOCAB_SIZE });
        }
        Ok(Self { n, t, ids })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.ids[i * self.t..(i + 1) * self.t]
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

/// Bytes of the string, one id per byte.
pub fn tokenize(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Bytes decoded lossily as UTF-8; reserved ids render as control glyphs.
/// Never fails.
pub fn detokenize(ids: &[u32]) -> String {
    let mut out = String::new();
    let mut run: Vec<u8> = Vec::new();
    let flush = |run: &mut Vec<u8>, out: &mut String| {
        if !run.is_empty() {
            out.push_str(&String::from_utf8_lossy(run));
            run.clear();
        }
    };
    for &id in ids {
        match id {
            EOS => {
                flush(&mut run, &mut out);
                out.push(EOS_GLYPH);
            }
            BOS => {
                flush(&mut run, &mut out);
                out.push(BOS_GLYPH);
            }
            b => run.push(b as u8),
        }
    }
    flush(&mut run, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn tokenize_is_byte_values() {
        assert_eq!(tokenize("AB"), vec![65, 66]);
        assert_eq!(tokenize(""), Vec::<u32>::new());
    }

    #[test]
    fn round_trip_ascii() {
        let s = "hello, world! 123";
        assert_eq!(detokenize(&tokenize(s)), s);
    }

    #[test]
    fn round_trip_multibyte_utf8() {
        let s = "héllo ☃";
        assert_eq!(detokenize(&tokenize(s)), s);
    }

    #[test]
    fn reserved_ids_render_as_glyphs() {
        let s = detokenize(&[65, EOS, 66, BOS]);
        assert_eq!(s, alloc::format!("A{EOS_GLYPH}B{BOS_GLYPH}"));
    }

    #[test]
    fn batch_rejects_out_of_range() {
        assert!(TokenBatch::new(1, 2, vec![0, 258]).is_err());
        assert!(TokenBatch::new(1, 2, vec![0, 257]).is_ok());
    }
}
