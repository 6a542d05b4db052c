//! Token shards and their JSON manifest.
//!
//! ```text
//! shard-NNNNN.bin  "SHRD" | version u16 | count u16
//!                  per doc: len u32 | ids u32×len
//! manifest.json    policy, vocabulary hash, shard list with SHA-256,
//!                  per-source and per-dialect counts, per-document index
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use nahw_core::arabic::{Dialect, NormalizationPolicy};
use nahw_core::{Error, Result as CoreResult};
use serde::{Deserialize, Serialize};

use super::binio::{Reader, Writer};
use crate::error::{CliError, Result};
use crate::fsutil;

pub const MAGIC: &[u8; 4] = b"SHRD";
pub const VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 8;
pub const MAX_DOCS_PER_SHARD: usize = u16::MAX as usize;
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn encode(docs: &[Vec<u32>]) -> CoreResult<Vec<u8>> {
    let count = u16::try_from(docs.len())
        .map_err(|_| Error::Format(format!("{} documents exceed one shard", docs.len())))?;
    let mut w = Writer::new();
    w.bytes(MAGIC).u16(VERSION).u16(count);
    for d in docs {
        w.u32_len(d.len())?;
        for &t in d {
            w.u32(t);
        }
    }
    Ok(w.buf)
}

/// A parsed shard borrowing its bytes. Documents are located by an offset
/// table built once, then read without copying.
#[derive(Debug, Clone)]
pub struct ShardView<'a> {
    data: &'a [u8],
    offsets: Vec<(usize, usize)>,
}

impl<'a> ShardView<'a> {
    pub fn parse(data: &'a [u8]) -> CoreResult<Self> {
        let mut r = Reader::new(data, "SHRD");
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let count = r.u16()? as usize;
        let mut offsets = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let start = r.position();
            r.take(len.checked_mul(4).ok_or_else(|| Error::Format("SHRD: length overflow".into()))?)?;
            offsets.push((start, len));
        }
        r.finish()?;
        Ok(ShardView { data, offsets })
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Raw little-endian ids of document `i`.
    pub fn raw(&self, i: usize) -> &'a [u8] {
        let (start, len) = self.offsets[i];
        &self.data[start..start + 4 * len]
    }

    pub fn iter_doc(&self, i: usize) -> impl Iterator<Item = u32> + 'a {
        self.raw(i).chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
    }

    pub fn doc(&self, i: usize) -> Vec<u32> {
        self.iter_doc(i).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardEntry {
    pub file: String,
    pub sha256: String,
    pub n_docs: usize,
    pub n_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocEntry {
    pub id: String,
    pub source: String,
    pub dialect: Dialect,
    pub confidence: f64,
    pub sentences: usize,
    pub shard: usize,
    pub index: usize,
    pub n_tokens: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Counts {
    pub by_source: BTreeMap<String, usize>,
    pub by_dialect: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u16,
    pub policy: NormalizationPolicy,
    pub presegment: bool,
    pub vocab_hash: String,
    pub vocab_size: usize,
    pub input_docs: usize,
    pub dropped_empty: usize,
    pub n_docs: usize,
    pub counts: Counts,
    pub shards: Vec<ShardEntry>,
    pub docs: Vec<DocEntry>,
}

/// One tokenized document ready for writing.
#[derive(Debug, Clone)]
pub struct PreparedDoc {
    pub id: String,
    pub source: String,
    pub dialect: Dialect,
    pub confidence: f64,
    pub sentences: usize,
    pub tokens: Vec<u32>,
}

pub struct ManifestInfo {
    pub policy: NormalizationPolicy,
    pub presegment: bool,
    pub vocab_hash: String,
    pub vocab_size: usize,
    pub input_docs: usize,
}

/// Writes `docs` (already in id order) as shards plus `manifest.json`.
pub fn write(dir: &Path, info: ManifestInfo, docs: &[PreparedDoc], docs_per_shard: usize) -> Result<Manifest> {
    if docs_per_shard == 0 || docs_per_shard > MAX_DOCS_PER_SHARD {
        return Err(CliError::Config(format!(
            "docs_per_shard {docs_per_shard} outside 1..={MAX_DOCS_PER_SHARD}"
        )));
    }
    let mut counts = Counts::default();
    let mut shards = Vec::new();
    let mut entries = Vec::with_capacity(docs.len());
    for (s, chunk) in docs.chunks(docs_per_shard).enumerate() {
        let toks: Vec<Vec<u32>> = chunk.iter().map(|d| d.tokens.clone()).collect();
        let bytes = encode(&toks)?;
        let file = format!("shard-{s:05}.bin");
        fsutil::write_bytes(&dir.join(&file), &bytes)?;
        shards.push(ShardEntry {
            file,
            sha256: fsutil::sha256_hex(&[&bytes]),
            n_docs: chunk.len(),
            n_tokens: toks.iter().map(Vec::len).sum(),
        });
        for (i, d) in chunk.iter().enumerate() {
            *counts.by_source.entry(d.source.clone()).or_default() += 1;
            *counts.by_dialect.entry(d.dialect.as_str().to_string()).or_default() += 1;
            entries.push(DocEntry {
                id: d.id.clone(),
                source: d.source.clone(),
                dialect: d.dialect,
                confidence: d.confidence,
                sentences: d.sentences,
                shard: s,
                index: i,
                n_tokens: d.tokens.len(),
            });
        }
    }
    let manifest = Manifest {
        format_version: VERSION,
        policy: info.policy,
        presegment: info.presegment,
        vocab_hash: info.vocab_hash,
        vocab_size: info.vocab_size,
        input_docs: info.input_docs,
        dropped_empty: info.input_docs - docs.len(),
        n_docs: docs.len(),
        counts,
        shards,
        docs: entries,
    };
    fsutil::write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// A manifest with its shard bytes, hashes verified.
pub struct ShardSet {
    pub manifest: Manifest,
    pub data: Vec<Vec<u8>>,
}

impl ShardSet {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest: Manifest = fsutil::read_json(&dir.join(MANIFEST_FILE))?;
        let mut data = Vec::with_capacity(manifest.shards.len());
        for s in &manifest.shards {
            let path = dir.join(&s.file);
            let bytes = fsutil::read_bytes(&path)?;
            let h = fsutil::sha256_hex(&[&bytes]);
            if h != s.sha256 {
                return Err(CliError::data(
                    &path,
                    format!("corrupt shard: sha256 {h} differs from manifest {}", s.sha256),
                ));
            }
            let view = ShardView::parse(&bytes).map_err(|e| CliError::data(&path, e))?;
            if view.len() != s.n_docs {
                return Err(CliError::data(
                    &path,
                    format!("shard holds {} documents, manifest says {}", view.len(), s.n_docs),
                ));
            }
            data.push(bytes);
        }
        Ok(ShardSet { manifest, data })
    }

    pub fn view(&self, shard: usize) -> ShardView<'_> {
        ShardView::parse(&self.data[shard]).expect("verified at open")
    }

    /// Token sequences in manifest order, optionally restricted to one
    /// dialect.
    pub fn docs(&self, dialect: Option<Dialect>) -> Vec<Vec<u32>> {
        let views: Vec<ShardView<'_>> = (0..self.data.len()).map(|s| self.view(s)).collect();
        self.manifest
            .docs
            .iter()
            .filter(|d| dialect.is_none_or(|x| d.dialect == x))
            .map(|d| views[d.shard].doc(d.index))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_size_matches_layout() {
        let docs = vec![vec![1, 2, 3], vec![], vec![7; 10]];
        let b = encode(&docs).unwrap();
        assert_eq!(b.len(), HEADER_BYTES + (4 + 12) + 4 + (4 + 40));
        let v = ShardView::parse(&b).unwrap();
        assert_eq!(v.len(), 3);
        for (i, d) in docs.iter().enumerate() {
            assert_eq!(&v.doc(i), d);
        }
    }

    #[test]
    fn truncated_shard_is_rejected() {
        let b = encode(&[vec![1, 2, 3]]).unwrap();
        assert!(ShardView::parse(&b[..b.len() - 1]).is_err());
        let mut long = b;
        long.extend([0; 4]);
        assert!(ShardView::parse(&long).is_err());
    }

    fn doc(id: &str, d: Dialect, n: u32) -> PreparedDoc {
        PreparedDoc {
            id: id.into(),
            source: "other".into(),
            dialect: d,
            confidence: 1.0,
            sentences: 1,
            tokens: (0..n).collect(),
        }
    }

    fn info(n: usize) -> ManifestInfo {
        ManifestInfo {
            policy: NormalizationPolicy::default(),
            presegment: false,
            vocab_hash: "h".into(),
            vocab_size: 300,
            input_docs: n,
        }
    }

    #[test]
    fn manifest_round_trip_and_filter() {
        let dir = tempfile::tempdir().unwrap();
        let docs = vec![doc("a", Dialect::MSA, 3), doc("b", Dialect::EGY, 5), doc("c", Dialect::EGY, 2)];
        let m = write(dir.path(), info(4), &docs, 2).unwrap();
        assert_eq!((m.n_docs, m.dropped_empty, m.shards.len()), (3, 1, 2));
        let set = ShardSet::open(dir.path()).unwrap();
        assert_eq!(set.manifest, m);
        let all: Vec<Vec<u32>> = docs.iter().map(|d| d.tokens.clone()).collect();
        assert_eq!(set.docs(None), all);
        assert_eq!(set.docs(Some(Dialect::EGY)), all[1..].to_vec());
    }

    #[test]
    fn tampered_shard_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), info(1), &[doc("a", Dialect::MSA, 3)], 8).unwrap();
        let p = dir.path().join("shard-00000.bin");
        let mut b = std::fs::read(&p).unwrap();
        *b.last_mut().unwrap() ^= 1;
        std::fs::write(&p, b).unwrap();
        let e = ShardSet::open(dir.path()).err().unwrap();
        assert_eq!(e.exit_code(), 3);
    }
}
