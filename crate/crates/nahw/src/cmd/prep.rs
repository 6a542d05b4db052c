use std::path::Path;

use log::info;
use nahw_core::arabic::{
    prepare_document, presegment, segment_sentences, BpeVocab, DialectLexicon, Source, Tokenizer,
};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::format::shards::{self, Manifest, ManifestInfo, PreparedDoc};
use crate::format::vocab;
use crate::input;

/// Raw JSONL corpus to shards, manifest and tokenizer under `out`.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let p = &cfg.prep;
    let input_path = p
        .input
        .as_deref()
        .ok_or_else(|| CliError::Config("prep needs an input corpus (prep.input or --input)".into()))?;
    let records = input::read_corpus(input_path)?;
    let lexicon = match &p.lexicon {
        Some(l) => input::read_lexicon(l)?,
        None => DialectLexicon::default(),
    }
    .normalized(&p.policy);

    let mut docs: Vec<(nahw_core::arabic::Document, usize)> = records
        .iter()
        .filter_map(|(r, d)| {
            let doc = prepare_document(&r.text, Source::parse(&r.source), *d, &p.policy, &lexicon)?;
            let n = segment_sentences(&doc.text).len();
            Some((doc, n))
        })
        .collect();
    if docs.is_empty() {
        return Err(CliError::data(input_path, "no document survives cleaning"));
    }
    docs.sort_by(|a, b| a.0.id.cmp(&b.0.id));

    let tokenizer = match &p.tokenizer {
        Some(t) => {
            let tok = vocab::load(t)?;
            if tok.policy != p.policy || tok.presegment != p.presegment {
                return Err(CliError::Config(format!(
                    "{}: tokenizer was trained under a different normalization policy or presegmentation",
                    t.display()
                )));
            }
            tok
        }
        None => {
            let texts: Vec<String> = docs
                .iter()
                .map(|(d, _)| if p.presegment { presegment(&d.text) } else { d.text.clone() })
                .collect();
            let vocab = BpeVocab::train(texts.iter().map(String::as_str), p.vocab_size, p.presegment)?;
            Tokenizer {
                vocab,
                policy: p.policy,
                presegment: p.presegment,
            }
        }
    };
    info!("tokenizer: {} ids, hash {}", tokenizer.vocab.vocab_size(), tokenizer.vocab.hash());

    let prepared: Vec<PreparedDoc> = docs
        .into_iter()
        .map(|(d, sentences)| PreparedDoc {
            tokens: tokenizer.encode_prepared(&d.text),
            id: d.id,
            source: d.source.as_str().to_string(),
            dialect: d.dialect,
            confidence: d.dialect_confidence,
            sentences,
        })
        .collect();
    let info = ManifestInfo {
        policy: p.policy,
        presegment: p.presegment,
        vocab_hash: tokenizer.vocab.hash(),
        vocab_size: tokenizer.vocab.vocab_size(),
        input_docs: records.len(),
    };
    let manifest = shards::write(out, info, &prepared, p.docs_per_shard)?;
    vocab::save(&tokenizer, &out.join(super::TOKENIZER_FILE))?;
    cfg.write_echo(out)?;
    Ok(manifest)
}

pub fn summary(m: &Manifest) -> String {
    let mut s = format!(
        "documents: {} kept, {} dropped as empty, {} shards\n",
        m.n_docs,
        m.dropped_empty,
        m.shards.len()
    );
    for (k, v) in &m.counts.by_source {
        s.push_str(&format!("source  {k:<14}{v}\n"));
    }
    for (k, v) in &m.counts.by_dialect {
        s.push_str(&format!("dialect {k:<14}{v}\n"));
    }
    s
}
