//! `tokenizer.json`: BPE merges with the normalization policy they were
//! trained under.

use std::path::Path;

use nahw_core::arabic::{BpeVocab, NormalizationPolicy, Tokenizer};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::fsutil;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerFile {
    pub vocab_size: usize,
    pub hash: String,
    pub policy: NormalizationPolicy,
    pub presegment: bool,
    pub merges: Vec<(u32, u32)>,
}

impl TokenizerFile {
    pub fn of(t: &Tokenizer) -> Self {
        TokenizerFile {
            vocab_size: t.vocab.vocab_size(),
            hash: t.vocab.hash(),
            policy: t.policy,
            presegment: t.presegment,
            merges: t.vocab.merges().to_vec(),
        }
    }

    pub fn into_tokenizer(self) -> nahw_core::Result<Tokenizer> {
        let vocab = BpeVocab::from_merges(self.merges)?;
        if vocab.hash() != self.hash {
            return Err(nahw_core::Error::Format(format!(
                "tokenizer hash {} does not match its merges ({})",
                self.hash,
                vocab.hash()
            )));
        }
        Ok(Tokenizer {
            vocab,
            policy: self.policy,
            presegment: self.presegment,
        })
    }
}

pub fn save(t: &Tokenizer, path: &Path) -> Result<()> {
    fsutil::write_json(path, &TokenizerFile::of(t))
}

pub fn load(path: &Path) -> Result<Tokenizer> {
    let f: TokenizerFile = fsutil::read_json(path)?;
    f.into_tokenizer().map_err(|e| CliError::data(path, e))
}
