use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub const TATWEEL: char = '\u{0640}';

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormalizationPolicy {
    pub unify_alif: bool,
    pub unify_ya: bool,
    pub unify_ta_marbuta: bool,
    pub strip_tatweel: bool,
    pub strip_diacritics: bool,
    pub normalize_digits: bool,
}

impl Default for NormalizationPolicy {
    fn default() -> Self {
        NormalizationPolicy {
            unify_alif: true,
            unify_ya: true,
            unify_ta_marbuta: false,
            strip_tatweel: true,
            strip_diacritics: false,
            normalize_digits: false,
        }
    }
}

pub fn is_diacritic(c: char) -> bool {
    matches!(c, '\u{064B}'..='\u{065F}' | '\u{0670}')
}

/// Arabic base letters, tatweel included.
pub fn is_arabic_letter(c: char) -> bool {
    matches!(c, '\u{0621}'..='\u{064A}' | '\u{0671}')
}

pub fn is_arabic_punct(c: char) -> bool {
    matches!(c, '\u{061F}' | '\u{061B}' | '\u{060C}')
}

pub fn is_neutral_punct(c: char) -> bool {
    matches!(c, '.' | '!' | ':' | '"' | '(' | ')')
}

pub fn is_digit(c: char) -> bool {
    c.is_ascii_digit() || matches!(c, '\u{0660}'..='\u{0669}')
}

fn retained(c: char) -> bool {
    is_arabic_letter(c) || is_diacritic(c) || is_arabic_punct(c) || is_neutral_punct(c) || is_digit(c)
}

/// Collapses whitespace runs and trims. A run containing a line break
/// becomes `'\n'`, any other run a single space.
pub fn collapse_whitespace(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending: Option<char> = None;
    for c in text.chars() {
        if c.is_whitespace() {
            let nl = c == '\n' || c == '\r' || pending == Some('\n');
            pending = Some(if nl { '\n' } else { ' ' });
        } else {
            if let Some(p) = pending.take() {
                if !out.is_empty() {
                    out.push(p);
                }
            }
            out.push(c);
        }
    }
    out
}

/// Drops every character outside the Arabic letter/diacritic ranges,
/// Arabic and neutral punctuation and digits, then collapses whitespace.
pub fn clean(text: &str) -> String {
    let kept: String = text.chars().filter(|&c| c.is_whitespace() || retained(c)).collect();
    collapse_whitespace(&kept)
}

pub fn normalize(text: &str, policy: &NormalizationPolicy) -> String {
    text.chars()
        .filter(|&c| !(policy.strip_tatweel && c == TATWEEL))
        .map(|c| match c {
            'أ' | 'إ' | 'آ' | 'ٱ' if policy.unify_alif => 'ا',
            'ى' if policy.unify_ya => 'ي',
            'ة' if policy.unify_ta_marbuta => 'ه',
            '\u{0660}'..='\u{0669}' if policy.normalize_digits => {
                char::from_u32('0' as u32 + (c as u32 - 0x0660)).unwrap()
            }
            c => c,
        })
        .collect()
}

pub fn handle_diacritics(text: &str, policy: &NormalizationPolicy) -> String {
    if policy.strip_diacritics {
        text.chars().filter(|&c| !is_diacritic(c)).collect()
    } else {
        String::from(text)
    }
}

/// `clean → normalize → diacritics`, with a final whitespace pass so the
/// composition is idempotent.
pub fn prepare(text: &str, policy: &NormalizationPolicy) -> String {
    let t = handle_diacritics(&normalize(&clean(text), policy), policy);
    collapse_whitespace(&t)
}

pub fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '\u{061F}' | '\u{061B}' | '\n')
}

fn is_closer(c: char) -> bool {
    matches!(c, ')' | ']' | '}' | '»' | '"' | '\'' | '\u{201D}' | '\u{2019}')
}

/// Splits after each run of terminators and any closing brackets or
/// quotes right behind it; whitespace inside a sentence is collapsed to
/// single spaces.
pub fn segment_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        cur.push(c);
        if is_terminator(c) && !chars.peek().is_some_and(|&n| is_terminator(n)) {
            while let Some(n) = chars.next_if(|&n| is_closer(n)) {
                cur.push(n);
            }
            push_sentence(&mut out, &cur);
            cur.clear();
        }
    }
    push_sentence(&mut out, &cur);
    out
}

fn push_sentence(out: &mut Vec<String>, piece: &str) {
    let s: String = collapse_whitespace(piece).replace('\n', " ");
    if !s.is_empty() {
        out.push(s);
    }
}

/// Whitespace-separated tokens with surrounding punctuation removed.
pub fn word_tokens(text: &str) -> Vec<&str> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| is_arabic_punct(c) || is_neutral_punct(c) || c == '?' || c == ','))
        .filter(|w| !w.is_empty())
        .collect()
}
