//! String-level metrics: QA exact match / token F1 and smoothed BLEU.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::arabic::text::{collapse_whitespace, handle_diacritics, is_arabic_punct, normalize, NormalizationPolicy};

/// Policy applied before any string comparison: Alif/Ya unified,
/// tatweel and diacritics removed.
pub fn eval_policy() -> NormalizationPolicy {
    NormalizationPolicy {
        strip_diacritics: true,
        ..NormalizationPolicy::default()
    }
}

/// Lowercases, applies [`eval_policy`], turns punctuation into spaces and
/// collapses whitespace.
pub fn eval_normalize(text: &str) -> String {
    let p = eval_policy();
    let t = handle_diacritics(&normalize(text, &p), &p);
    let t: String = t
        .chars()
        .map(|c| {
            if c.is_ascii_punctuation() || is_arabic_punct(c) || c == '\u{2581}' {
                ' '
            } else {
                c.to_ascii_lowercase()
            }
        })
        .collect();
    collapse_whitespace(&t).replace('\n', " ")
}

pub fn eval_tokens(text: &str) -> Vec<String> {
    eval_normalize(text).split(' ').filter(|s| !s.is_empty()).map(String::from).collect()
}

fn bag<T: Ord>(tokens: &[T]) -> BTreeMap<&T, usize> {
    let mut m = BTreeMap::new();
    for t in tokens {
        *m.entry(t).or_insert(0) += 1;
    }
    m
}

/// Multiset F1 of two token sequences. Two empty inputs score 1, one
/// empty input scores 0.
pub fn token_f1<T: Ord>(pred: &[T], gold: &[T]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() { 1.0 } else { 0.0 };
    }
    let g = bag(gold);
    let common: usize = bag(pred)
        .iter()
        .map(|(t, &n)| n.min(g.get(t).copied().unwrap_or(0)))
        .sum();
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / pred.len() as f64;
    let r = common as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// Best token F1 over the gold answers.
pub fn qa_f1(prediction: &str, golds: &[String]) -> f64 {
    let p = eval_tokens(prediction);
    golds
        .iter()
        .map(|g| token_f1(&p, &eval_tokens(g)))
        .fold(0.0, f64::max)
}

pub fn exact_match(prediction: &str, golds: &[String]) -> f64 {
    let p = eval_normalize(prediction);
    if golds.iter().any(|g| eval_normalize(g) == p) {
        1.0
    } else {
        0.0
    }
}

fn ngrams(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut m = BTreeMap::new();
    for w in tokens.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Sentence BLEU with clipped n-gram precisions for `n = 1..=max_n`,
/// add-one smoothing for `n ≥ 2`, and the brevity penalty against the
/// reference length closest to the prediction (shorter on ties).
pub fn bleu(prediction: &str, references: &[String], max_n: usize) -> f64 {
    let pred = eval_tokens(prediction);
    let refs: Vec<Vec<String>> = references.iter().map(|r| eval_tokens(r)).collect();
    if pred.is_empty() || refs.is_empty() || max_n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let p = ngrams(&pred, n);
        let mut max_ref: BTreeMap<&[String], usize> = BTreeMap::new();
        for r in &refs {
            for (g, c) in ngrams(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let matches: usize = p.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
        let total: usize = p.values().sum();
        let precision = if n == 1 {
            if matches == 0 {
                return 0.0;
            }
            matches as f64 / total as f64
        } else {
            (matches + 1) as f64 / (total + 1) as f64
        };
        log_sum += libm::log(precision);
    }
    let c = pred.len();
    let r = refs
        .iter()
        .map(Vec::len)
        .min_by_key(|&l| (l.abs_diff(c), l))
        .unwrap();
    let bp = if c > r { 1.0 } else { libm::exp(1.0 - r as f64 / c as f64) };
    bp * libm::exp(log_sum / max_n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    fn s(x: &str) -> String {
        String::from(x)
    }

    #[test]
    fn f1_examples() {
        assert_eq!(qa_f1("القاهرة", &[s("القاهرة")]), 1.0);
        assert_eq!(exact_match("القاهرة", &[s("القاهرة")]), 1.0);
        assert_eq!(qa_f1("باريس", &[s("القاهرة")]), 0.0);
        let f = qa_f1("مدينة كبيرة", &[s("مدينة كبيرة جدا هناك")]);
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn normalization_before_matching() {
        assert_eq!(exact_match("أَحْمَد!", &[s("احمد")]), 1.0);
        assert_eq!(exact_match("The Cat.", &[s("the cat")]), 1.0);
    }

    #[test]
    fn max_over_golds() {
        assert_eq!(qa_f1("نعم", &[s("لا"), s("نعم")]), 1.0);
    }

    #[test]
    fn bleu_examples() {
        assert_eq!(bleu("a b c d e", &[s("a b c d e")], 4), 1.0);
        assert_eq!(bleu("x y z", &[s("a b c")], 4), 0.0);
        assert_eq!(bleu("", &[s("a")], 4), 0.0);
        let v = bleu("the cat sat", &[s("the cat sat down")], 4);
        assert!((v - 0.716_531_310_573_789_3).abs() < 1e-12);
    }

    #[test]
    fn bleu_clipping() {
        // unigram precision 2/4 after clipping "the"; bigrams: "the the"×3
        // against a reference holding none, smoothed to 1/4; trigrams 1/3;
        // 4-grams 1/2.
        let v = bleu("the the the the", &[s("the cat the mat")], 4);
        let expect = libm::exp((libm::log(0.5) + libm::log(0.25) + libm::log(1.0 / 3.0) + libm::log(0.5)) / 4.0);
        assert!((v - expect).abs() < 1e-12);
    }
}
