//! Corpus cleaning, the fixed ASCII-128 codec, and training windows.
//!
//! Every model in an ensemble shares this codec, which is what makes their
//! output distributions comparable position by position.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Vector;

/// Input and output dimension of every model.
pub const ALPHABET_SIZE: usize = 128;

/// Longest training sequence.
pub const MAX_WINDOW: usize = 80;

pub const DEFAULT_STRIDE: usize = 40;

/// Character index in `[0, 128)`; numerically equal to the ASCII code.
pub type CharIndex = u8;

pub fn encode(c: char) -> Result<CharIndex> {
    if c.is_ascii() {
        Ok(c as u8)
    } else {
        Err(Error::IndexOutOfRange(c as usize))
    }
}

pub fn decode(index: CharIndex) -> Result<char> {
    if (index as usize) < ALPHABET_SIZE {
        Ok(index as char)
    } else {
        Err(Error::IndexOutOfRange(index as usize))
    }
}

pub fn check_index(index: usize) -> Result<CharIndex> {
    if index < ALPHABET_SIZE {
        Ok(index as CharIndex)
    } else {
        Err(Error::IndexOutOfRange(index))
    }
}

/// Encodes ASCII text as indices; any non-ASCII character is an error.
pub fn encode_str(text: &str) -> Result<Vec<CharIndex>> {
    text.chars().map(encode).collect()
}

pub fn decode_all(indices: &[CharIndex]) -> String {
    indices.iter().map(|&i| (i & 0x7f) as char).collect()
}

pub fn encode_onehot(index: usize) -> Result<Vector> {
    let index = check_index(index)?;
    let mut v = Vector::zeros(ALPHABET_SIZE);
    v[index as usize] = 1.0;
    Ok(v)
}

/// Renders control characters (other than newline and tab) as escapes.
pub fn escape_control(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '\n' | '\t' => out.push(c),
            c if c.is_ascii_control() => out.push_str(&format!("\\x{:02x}", c as u32)),
            c => out.push(c),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub byte_count: u64,
    pub char_histogram: Vec<u64>,
    pub dropped_count: u64,
}

impl CorpusStats {
    fn of(text: &[u8], dropped_count: u64) -> Self {
        let mut char_histogram = vec![0u64; ALPHABET_SIZE];
        for &b in text {
            char_histogram[b as usize] += 1;
        }
        Self {
            byte_count: text.len() as u64,
            char_histogram,
            dropped_count,
        }
    }
}

/// Drops bytes outside ASCII and normalizes CR LF and lone CR to LF.
///
/// Control characters other than CR are kept.
pub fn clean(raw: &[u8]) -> (String, CorpusStats) {
    let mut dropped = 0u64;
    let ascii: Vec<u8> = raw
        .iter()
        .copied()
        .filter(|&b| {
            let keep = b < 0x80;
            if !keep {
                dropped += 1;
            }
            keep
        })
        .collect();

    let mut out = Vec::with_capacity(ascii.len());
    let mut i = 0;
    while i < ascii.len() {
        match ascii[i] {
            b'\r' => {
                out.push(b'\n');
                if ascii.get(i + 1) == Some(&b'\n') {
                    i += 1;
                }
            }
            b => out.push(b),
        }
        i += 1;
    }

    let stats = CorpusStats::of(&out, dropped);
    let text = String::from_utf8(out).expect("ASCII is valid UTF-8");
    (text, stats)
}

/// One training sequence: `target[k]` is the character after `input[k]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusWindow<'a> {
    pub start: usize,
    pub input: &'a [CharIndex],
    pub target: &'a [CharIndex],
}

impl CorpusWindow<'_> {
    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }
}

/// Iterator over overlapping windows; see [`windows`].
#[derive(Debug, Clone)]
pub struct Windows<'a> {
    text: &'a [CharIndex],
    max_len: usize,
    stride: usize,
    next_start: Option<usize>,
}

impl<'a> Iterator for Windows<'a> {
    type Item = CorpusWindow<'a>;

    fn next(&mut self) -> Option<Self::Item> {
        let start = self.next_start?;
        let remaining = self.text.len() - start;
        let len = (remaining - 1).min(self.max_len);
        let window = CorpusWindow {
            start,
            input: &self.text[start..start + len],
            target: &self.text[start + 1..start + len + 1],
        };
        let reached_end = start + len + 1 == self.text.len();
        let next = start + self.stride;
        self.next_start = (!reached_end && next + 2 <= self.text.len()).then_some(next);
        Some(window)
    }
}

/// Splits `text` into windows of at most `max_len` inputs, starting every
/// `stride` characters. Consecutive windows overlap by `max_len - stride`;
/// a final shorter window covers the tail when at least two characters
/// remain for it.
pub fn windows(text: &[CharIndex], max_len: usize, stride: usize) -> Result<Windows<'_>> {
    if text.len() < 2 {
        return Err(Error::TextTooShort {
            needed: 2,
            got: text.len(),
        });
    }
    if max_len == 0 || stride == 0 || stride > max_len {
        return Err(Error::InvalidConfig(format!(
            "window length {max_len} with stride {stride}"
        )));
    }
    Ok(Windows {
        text,
        max_len,
        stride,
        next_start: Some(0),
    })
}
