//! Readers for the user-supplied inputs: corpus JSONL, dialect lexicons,
//! word vectors and evaluation sets.

use std::path::Path;

use nahw_core::arabic::{Dialect, DialectLexicon};
use nahw_core::eval::{EvalItem, EvalKind, EvalSet};
use serde::Deserialize;

use crate::error::{CliError, Result};
use crate::fsutil;

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct CorpusRecord {
    pub text: String,
    pub source: String,
    #[serde(default)]
    pub dialect: Option<String>,
}

fn dialect_of(path: &Path, label: Option<&str>) -> Result<Option<Dialect>> {
    label
        .map(|s| Dialect::parse(s).ok_or_else(|| CliError::data(path, format!("unknown dialect label {s:?}"))))
        .transpose()
}

pub fn read_corpus(path: &Path) -> Result<Vec<(CorpusRecord, Option<Dialect>)>> {
    let recs: Vec<CorpusRecord> = fsutil::read_jsonl(path)?;
    recs.into_iter()
        .map(|r| {
            let d = dialect_of(path, r.dialect.as_deref())?;
            Ok((r, d))
        })
        .collect()
}

pub fn read_lexicon(path: &Path) -> Result<DialectLexicon> {
    fsutil::read_json(path)
}

/// `token d v1 … vd` per line. A first line of exactly two integers
/// (`count dim`) is treated as a header and skipped.
pub fn parse_vectors(text: &str) -> std::result::Result<Vec<(String, Vec<f64>)>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let rest: Vec<&str> = parts.collect();
        if i == 0 && rest.len() == 1 && token.parse::<usize>().is_ok() && rest[0].parse::<usize>().is_ok() {
            continue;
        }
        let values = rest
            .iter()
            .map(|v| v.parse::<f64>().map_err(|e| format!("line {}: {v:?}: {e}", i + 1)))
            .collect::<std::result::Result<Vec<f64>, String>>()?;
        if values.is_empty() {
            return Err(format!("line {}: token {token:?} has no values", i + 1));
        }
        out.push((token.to_string(), values));
    }
    Ok(out)
}

pub fn read_vectors(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    parse_vectors(&fsutil::read_string(path)?).map_err(|e| CliError::data(path, e))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TextRecord {
    text: String,
    #[serde(default)]
    dialect: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct QaRecord {
    question: String,
    answers: Vec<String>,
    #[serde(default)]
    dialect: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MtRecord {
    source: String,
    references: Vec<String>,
    #[serde(default)]
    dialect: Option<String>,
}

/// Items without a dialect label are reported under `UNK`.
pub fn read_eval_set(kind: EvalKind, path: &Path) -> Result<EvalSet> {
    let item = |text: String, answers: Vec<String>, d: Option<String>| -> Result<EvalItem> {
        Ok(EvalItem {
            dialect: dialect_of(path, d.as_deref())?.unwrap_or(Dialect::UNK),
            text,
            answers,
        })
    };
    let items = match kind {
        EvalKind::Lm | EvalKind::Robustness => fsutil::read_jsonl::<TextRecord>(path)?
            .into_iter()
            .map(|r| item(r.text, Vec::new(), r.dialect))
            .collect::<Result<Vec<_>>>()?,
        EvalKind::Qa => fsutil::read_jsonl::<QaRecord>(path)?
            .into_iter()
            .map(|r| item(r.question, r.answers, r.dialect))
            .collect::<Result<Vec<_>>>()?,
        EvalKind::Mt => fsutil::read_jsonl::<MtRecord>(path)?
            .into_iter()
            .map(|r| item(r.source, r.references, r.dialect))
            .collect::<Result<Vec<_>>>()?,
    };
    let set = EvalSet { kind, items };
    set.validate().map_err(|e| CliError::data(path, e))?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vectors_with_and_without_header() {
        let v = parse_vectors("2 3\nكتاب 1 2 3\nقلم 0.5 -1 2e-1\n").unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v[1], ("قلم".to_string(), vec![0.5, -1.0, 0.2]));
        assert_eq!(parse_vectors("").unwrap(), vec![]);
        assert!(parse_vectors("كتاب 1 x").is_err());
        assert!(parse_vectors("كتاب\n").is_err());
    }

    #[test]
    fn eval_sets_parse_every_kind() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("qa.jsonl");
        std::fs::write(&p, "{\"question\":\"س\",\"answers\":[\"ج\"],\"dialect\":\"EGY\"}\n\n{\"question\":\"ق\",\"answers\":[\"ك\"]}\n").unwrap();
        let s = read_eval_set(EvalKind::Qa, &p).unwrap();
        assert_eq!(s.items[0].dialect, Dialect::EGY);
        assert_eq!(s.items[1].dialect, Dialect::UNK);
        assert_eq!(s.items[1].answers, vec!["ك".to_string()]);
        std::fs::write(&p, "{\"question\":\"س\",\"answers\":[]}\n").unwrap();
        assert_eq!(read_eval_set(EvalKind::Qa, &p).unwrap_err().exit_code(), 3);
        std::fs::write(&p, "{\"text\":\"س\",\"dialect\":\"XYZ\"}\n").unwrap();
        let e = read_eval_set(EvalKind::Lm, &p).unwrap_err();
        assert!(e.to_string().contains("XYZ"), "{e}");
    }

    #[test]
    fn missing_file_names_the_path() {
        let e = read_eval_set(EvalKind::Lm, Path::new("/nonexistent/lm.jsonl")).unwrap_err();
        assert!(e.to_string().contains("/nonexistent/lm.jsonl"));
        assert_eq!(e.exit_code(), 3);
    }
}
