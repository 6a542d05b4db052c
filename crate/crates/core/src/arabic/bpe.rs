//! Byte-level BPE. Ids `0..256` are bytes, `256..260` the specials, and
//! learned merges follow from 260.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use super::morph::MARKER;
use crate::error::{Error, Result};

pub const PAD: u32 = 256;
pub const BOS: u32 = 257;
pub const EOS: u32 = 258;
pub const SEP: u32 = 259;
pub const FIRST_MERGE: u32 = 260;
pub const SPECIAL_NAMES: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<sep>"];

pub fn is_special(id: u32) -> bool {
    (PAD..FIRST_MERGE).contains(&id)
}

/// Splits text into pre-tokens: whitespace attaches to the following
/// word. With `segmented`, [`MARKER`] also ends a pre-token and is dropped.
pub fn pre_tokens(text: &str, segmented: bool) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut prev_ws = true;
    for (i, c) in text.char_indices() {
        if segmented && c == MARKER {
            if start < i {
                out.push(&text[start..i]);
            }
            start = i + c.len_utf8();
            prev_ws = true;
            continue;
        }
        let ws = c.is_whitespace();
        if ws && !prev_ws && start < i {
            out.push(&text[start..i]);
            start = i;
        }
        prev_ws = ws;
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeVocab {
    merges: Vec<(u32, u32)>,
    tokens: Vec<Vec<u8>>,
    ranks: BTreeMap<(u32, u32), u32>,
}

fn count_pairs(words: &[(Vec<u32>, u64)]) -> BTreeMap<(u32, u32), u64> {
    let mut counts = BTreeMap::new();
    for (w, n) in words {
        for p in w.windows(2) {
            *counts.entry((p[0], p[1])).or_insert(0) += n;
        }
    }
    counts
}

/// Replaces non-overlapping occurrences of `pair`, left to right.
fn merge_word(w: &[u32], pair: (u32, u32), id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(w.len());
    let mut i = 0;
    while i < w.len() {
        if i + 1 < w.len() && (w[i], w[i + 1]) == pair {
            out.push(id);
            i += 2;
        } else {
            out.push(w[i]);
            i += 1;
        }
    }
    out
}

impl BpeVocab {
    /// Learns merges over the pre-tokens of `texts` until `vocab_size`
    /// ids exist or no adjacent pair is left. The most frequent pair wins;
    /// ties go to the smallest `(left, right)` id pair.
    pub fn train<'a, I>(texts: I, vocab_size: usize, segmented: bool) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if vocab_size <= FIRST_MERGE as usize {
            return Err(Error::Config(format!(
                "vocab_size {vocab_size} must exceed {FIRST_MERGE} (bytes plus specials)"
            )));
        }
        let mut chunks: BTreeMap<&[u8], u64> = BTreeMap::new();
        let mut any = false;
        for t in texts {
            any |= !t.is_empty();
            for p in pre_tokens(t, segmented) {
                *chunks.entry(p.as_bytes()).or_insert(0) += 1;
            }
        }
        if !any {
            return Err(Error::Config("cannot train BPE on an empty corpus".into()));
        }
        let mut words: Vec<(Vec<u32>, u64)> = chunks
            .into_iter()
            .map(|(b, n)| (b.iter().map(|&x| x as u32).collect(), n))
            .collect();
        let mut counts = count_pairs(&words);
        let mut merges = Vec::new();
        let mut next = FIRST_MERGE;
        while (next as usize) < vocab_size {
            let mut best: Option<((u32, u32), u64)> = None;
            for (&p, &c) in &counts {
                if c > 0 && best.is_none_or(|(_, bc)| c > bc) {
                    best = Some((p, c));
                }
            }
            let Some((pair, _)) = best else { break };
            for (w, n) in &mut words {
                if !w.windows(2).any(|p| (p[0], p[1]) == pair) {
                    continue;
                }
                for p in w.windows(2) {
                    *counts.get_mut(&(p[0], p[1])).unwrap() -= *n;
                }
                *w = merge_word(w, pair, next);
                for p in w.windows(2) {
                    *counts.entry((p[0], p[1])).or_insert(0) += *n;
                }
            }
            counts.retain(|_, c| *c > 0);
            merges.push(pair);
            next += 1;
        }
        Self::from_merges(merges)
    }

    pub fn from_merges(merges: Vec<(u32, u32)>) -> Result<Self> {
        let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        tokens.extend(SPECIAL_NAMES.iter().map(|s| s.as_bytes().to_vec()));
        let mut ranks = BTreeMap::new();
        for (r, &(a, b)) in merges.iter().enumerate() {
            let id = tokens.len() as u32;
            if a >= id || b >= id || is_special(a) || is_special(b) {
                return Err(Error::Format(format!("merge {r} ({a}, {b}) refers to an unknown or special id")));
            }
            if ranks.insert((a, b), r as u32).is_some() {
                return Err(Error::Format(format!("duplicate merge ({a}, {b})")));
            }
            let mut t = tokens[a as usize].clone();
            t.extend_from_slice(&tokens[b as usize]);
            tokens.push(t);
        }
        Ok(BpeVocab { merges, tokens, ranks })
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    /// Bytes of token `id`; specials yield their display names.
    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    fn encode_chunk(&self, chunk: &[u8], out: &mut Vec<u32>) {
        let mut w: Vec<u32> = chunk.iter().map(|&b| b as u32).collect();
        loop {
            let best = w
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&r| (r, (p[0], p[1]))))
                .min();
            let Some((r, pair)) = best else { break };
            w = merge_word(&w, pair, FIRST_MERGE + r);
        }
        out.extend_from_slice(&w);
    }

    /// Lossless encoding of arbitrary text.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len() / 2);
        for p in pre_tokens(text, false) {
            self.encode_chunk(p.as_bytes(), &mut out);
        }
        out
    }

    /// Encodes presegmented text; boundary markers are consumed.
    pub fn encode_segmented(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len() / 2);
        for p in pre_tokens(text, true) {
            self.encode_chunk(p.as_bytes(), &mut out);
        }
        out
    }

    /// Concatenated bytes of non-special ids. Unknown ids are an error.
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let Some(t) = self.tokens.get(id as usize) else {
                return Err(Error::Index {
                    what: "token",
                    index: id as usize,
                    bound: self.tokens.len(),
                });
            };
            if !is_special(id) {
                out.extend_from_slice(t);
            }
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    /// Id of the token whose bytes equal `s`.
    pub fn id_of(&self, s: &str) -> Option<u32> {
        let b = s.as_bytes();
        if b.len() == 1 {
            return Some(b[0] as u32);
        }
        let mut ids = Vec::new();
        self.encode_chunk(b, &mut ids);
        match ids.as_slice() {
            [id] => Some(*id),
            _ => self
                .tokens
                .iter()
                .enumerate()
                .skip(FIRST_MERGE as usize)
                .find(|(_, t)| t.as_slice() == b)
                .map(|(i, _)| i as u32),
        }
    }

    /// Per id: do the token bytes contain a diacritic code point
    /// (U+064B..=U+065F or U+0670)?
    pub fn diacritic_flags(&self) -> Vec<bool> {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| {
                !is_special(i as u32)
                    && t.windows(2)
                        .any(|w| w[0] == 0xD9 && ((0x8B..=0x9F).contains(&w[1]) || w[1] == 0xB0))
            })
            .collect()
    }

    /// Hex SHA-256 over the merge list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"BPE1");
        h.update((self.merges.len() as u32).to_le_bytes());
        for &(a, b) in &self.merges {
            h.update(a.to_le_bytes());
            h.update(b.to_le_bytes());
        }
        hex_lower(&h.finalize())
    }
}

pub(crate) fn hex_lower(bytes: &[u8]) -> String {
    const HEX: &[u8; 16] = b"0123456789abcdef";
    let mut s = String::with_capacity(bytes.len() * 2);
    for &b in bytes {
        s.push(HEX[(b >> 4) as usize] as char);
        s.push(HEX[(b & 15) as usize] as char);
    }
    s
}
