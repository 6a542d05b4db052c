//! Arabic corpus preparation: cleaning, normalization, diacritics,
//! sentence segmentation, dialect tagging, clitic pre-segmentation and
//! byte-level BPE.

pub mod bpe;
pub mod dialect;
pub mod morph;
pub mod text;

use alloc::string::String;
use core::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use bpe::BpeVocab;
pub use dialect::{Dialect, DialectLexicon, Marker};
pub use morph::{presegment, strip_markers, MARKER};
pub use text::{clean, handle_diacritics, normalize, prepare, segment_sentences, NormalizationPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Bactrian,
    OpenAssistant,
    Wikipedia,
    Other,
}

impl Source {
    pub const ALL: [Source; 4] = [Source::Bactrian, Source::OpenAssistant, Source::Wikipedia, Source::Other];

    pub fn as_str(self) -> &'static str {
        match self {
            Source::Bactrian => "bactrian",
            Source::OpenAssistant => "openassistant",
            Source::Wikipedia => "wikipedia",
            Source::Other => "other",
        }
    }

    /// Unrecognized labels map to [`Source::Other`].
    pub fn parse(s: &str) -> Source {
        Source::ALL
            .into_iter()
            .find(|x| x.as_str().eq_ignore_ascii_case(s))
            .unwrap_or(Source::Other)
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub source: Source,
    pub dialect: Dialect,
    pub dialect_confidence: f64,
}

/// First 16 hex digits of SHA-256 over the source label and raw text.
pub fn document_id(source: Source, raw: &str) -> String {
    let mut h = Sha256::new();
    h.update(source.as_str().as_bytes());
    h.update([0u8]);
    h.update(raw.as_bytes());
    let mut s = bpe::hex_lower(&h.finalize());
    s.truncate(16);
    s
}

/// Runs the text pipeline on one raw document. Returns `None` when no
/// Arabic letter survives cleaning. A supplied dialect label wins over
/// tagging.
pub fn prepare_document(
    raw: &str,
    source: Source,
    dialect: Option<Dialect>,
    policy: &NormalizationPolicy,
    lexicon: &DialectLexicon,
) -> Option<Document> {
    let text = prepare(raw, policy);
    if !text.chars().any(text::is_arabic_letter) {
        return None;
    }
    let (dialect, dialect_confidence) = match dialect {
        Some(d) => (d, 1.0),
        None => lexicon.tag(&text),
    };
    Some(Document {
        id: document_id(source, raw),
        text,
        source,
        dialect,
        dialect_confidence,
    })
}

/// The full text-to-ids path used for training and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    pub vocab: BpeVocab,
    pub policy: NormalizationPolicy,
    pub presegment: bool,
}

impl Tokenizer {
    /// Ids for text that has already been through [`prepare`].
    pub fn encode_prepared(&self, text: &str) -> alloc::vec::Vec<u32> {
        if self.presegment {
            self.vocab.encode_segmented(&presegment(text))
        } else {
            self.vocab.encode(text)
        }
    }

    pub fn encode(&self, raw: &str) -> alloc::vec::Vec<u32> {
        self.encode_prepared(&prepare(raw, &self.policy))
    }

    pub fn decode(&self, ids: &[u32]) -> crate::error::Result<String> {
        self.vocab.decode(ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documents_without_arabic_are_dropped() {
        let p = NormalizationPolicy::default();
        let lex = DialectLexicon::default();
        assert!(prepare_document("English only. 42!", Source::Other, None, &p, &lex).is_none());
        assert!(prepare_document("", Source::Other, None, &p, &lex).is_none());
        let d = prepare_document("الدنيا حر شوية النهاردة.", Source::Other, None, &p, &lex).unwrap();
        assert_eq!(d.dialect, Dialect::EGY);
        assert_eq!(d.id, document_id(Source::Other, "الدنيا حر شوية النهاردة."));
    }
}
