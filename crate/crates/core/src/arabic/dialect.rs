use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use super::text::{normalize, word_tokens, NormalizationPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dialect {
    MSA,
    EGY,
    GLF,
    LEV,
    MGR,
    UNK,
}

impl Dialect {
    /// Scored classes in tie-break order.
    pub const SCORED: [Dialect; 5] = [Dialect::MSA, Dialect::EGY, Dialect::GLF, Dialect::LEV, Dialect::MGR];

    pub fn as_str(self) -> &'static str {
        match self {
            Dialect::MSA => "MSA",
            Dialect::EGY => "EGY",
            Dialect::GLF => "GLF",
            Dialect::LEV => "LEV",
            Dialect::MGR => "MGR",
            Dialect::UNK => "UNK",
        }
    }

    pub fn parse(s: &str) -> Option<Dialect> {
        Dialect::SCORED
            .iter()
            .chain(&[Dialect::UNK])
            .copied()
            .find(|d| d.as_str().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Dialect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Marker {
    pub term: String,
    pub weight: f64,
}

pub const DEFAULT_THRESHOLD: f64 = 0.05;

/// Marker terms per dialect. Terms may span several words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DialectLexicon {
    pub markers: BTreeMap<Dialect, Vec<Marker>>,
}

const DEFAULT_MARKERS: &[(Dialect, &[&str])] = &[
    (
        Dialect::EGY,
        &["النهاردة", "النهارده", "ازيك", "عايز", "عايزة", "كده", "دلوقتي", "بتاع", "اوي", "ازاي", "ايه", "بقى"],
    ),
    (
        Dialect::GLF,
        &["شلونك", "شلون", "وايد", "الحين", "هالحين", "ابغى", "يبي", "شفيك", "تختار", "چذي", "اشوا"],
    ),
    (
        Dialect::LEV,
        &["كتير", "هلق", "هلأ", "منيح", "بدي", "هيك", "شو", "مبارح", "لسا", "حلو", "كيفك"],
    ),
    (
        Dialect::MGR,
        &["كيفاش", "بزاف", "واش", "دابا", "مزيان", "بصح", "كيما", "برشا", "زوين", "ديال", "علاش"],
    ),
];

impl Default for DialectLexicon {
    fn default() -> Self {
        let markers = DEFAULT_MARKERS
            .iter()
            .map(|(d, terms)| {
                (
                    *d,
                    terms
                        .iter()
                        .map(|t| Marker {
                            term: String::from(*t),
                            weight: 1.0,
                        })
                        .collect(),
                )
            })
            .collect();
        DialectLexicon { markers }
    }
}

impl DialectLexicon {
    /// The lexicon with every term passed through `normalize`.
    pub fn normalized(&self, policy: &NormalizationPolicy) -> DialectLexicon {
        let markers = self
            .markers
            .iter()
            .map(|(d, ms)| {
                (
                    *d,
                    ms.iter()
                        .map(|m| Marker {
                            term: normalize(&m.term, policy),
                            weight: m.weight,
                        })
                        .collect(),
                )
            })
            .collect();
        DialectLexicon { markers }
    }

    /// Per-class scores in [`Dialect::SCORED`] order.
    pub fn scores(&self, text: &str) -> [f64; 5] {
        let tokens = word_tokens(text);
        let mut out = [0.0; 5];
        if tokens.is_empty() {
            return out;
        }
        for (i, d) in Dialect::SCORED.iter().enumerate() {
            let Some(ms) = self.markers.get(d) else { continue };
            for m in ms {
                let parts: Vec<&str> = m.term.split_whitespace().collect();
                if parts.is_empty() {
                    continue;
                }
                let hits = tokens.windows(parts.len()).filter(|w| *w == parts.as_slice()).count();
                out[i] += m.weight * hits as f64;
            }
            out[i] /= tokens.len() as f64;
        }
        out
    }

    pub fn tag(&self, text: &str) -> (Dialect, f64) {
        self.tag_with_threshold(text, DEFAULT_THRESHOLD)
    }

    pub fn tag_with_threshold(&self, text: &str, threshold: f64) -> (Dialect, f64) {
        if word_tokens(text).is_empty() {
            return (Dialect::UNK, 0.0);
        }
        let scores = self.scores(text);
        let mut best = 0;
        for i in 1..scores.len() {
            if scores[i] > scores[best] {
                best = i;
            }
        }
        if scores[best] >= threshold {
            (Dialect::SCORED[best], scores[best])
        } else {
            (Dialect::MSA, 0.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex() -> DialectLexicon {
        DialectLexicon::default().normalized(&NormalizationPolicy::default())
    }

    #[test]
    fn table_rows() {
        assert_eq!(lex().tag("الدنيا حر شوية النهاردة").0, Dialect::EGY);
        assert_eq!(lex().tag("كيفاش الجو؟").0, Dialect::MGR);
        assert_eq!(lex().tag("كيف حال الطقس اليوم؟"), (Dialect::MSA, 0.0));
        assert_eq!(lex().tag(""), (Dialect::UNK, 0.0));
    }

    #[test]
    fn confidence_is_weight_over_tokens() {
        let (d, c) = lex().tag("كيفاش الجو");
        assert_eq!(d, Dialect::MGR);
        assert_eq!(c, 0.5);
    }

    #[test]
    fn ties_follow_class_order() {
        let (d, c) = lex().tag("النهاردة بزاف");
        assert_eq!((d, c), (Dialect::EGY, 0.5));
    }

    #[test]
    fn below_threshold_is_msa() {
        let long = "كلمة ".repeat(30) + "كيفاش";
        assert_eq!(lex().tag(&long), (Dialect::MSA, 0.0));
    }

    #[test]
    fn parse_names() {
        assert_eq!(Dialect::parse("egy"), Some(Dialect::EGY));
        assert_eq!(Dialect::parse("xx"), None);
    }
}
