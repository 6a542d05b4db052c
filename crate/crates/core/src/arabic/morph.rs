//! Clitic pre-segmentation ahead of BPE.

use alloc::string::String;
use alloc::vec::Vec;

use super::text::{is_arabic_letter, is_diacritic};

/// Boundary marker between a clitic and its host.
pub const MARKER: char = '\u{2581}';

const PREFIXES: [&str; 6] = ["ال", "و", "ف", "ب", "ك", "ل"];
const SUFFIXES: [&str; 9] = ["ها", "هم", "هن", "كم", "نا", "ني", "ه", "ك", "ي"];
const MAX_PREFIXES: usize = 2;
const MIN_WORD: usize = 5;
const MIN_STEM: usize = 3;

/// A base letter plus the diacritics that follow it.
fn graphemes(word: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, c) in word.char_indices() {
        if i > 0 && !is_diacritic(c) {
            out.push(&word[start..i]);
            start = i;
        }
    }
    if start < word.len() {
        out.push(&word[start..]);
    }
    out
}

fn base(g: &str) -> char {
    g.chars().next().unwrap()
}

fn matches_at(gs: &[&str], at: usize, clitic: &str) -> bool {
    let n = clitic.chars().count();
    at + n <= gs.len() && gs[at..at + n].iter().map(|g| base(g)).eq(clitic.chars())
}

fn segment_word(word: &str, out: &mut String) {
    let gs = graphemes(word);
    if gs.len() < MIN_WORD {
        out.push_str(word);
        return;
    }
    let mut cuts = Vec::new();
    let mut start = 0;
    for _ in 0..MAX_PREFIXES {
        let hit = PREFIXES
            .iter()
            .map(|p| p.chars().count())
            .zip(PREFIXES)
            .find(|&(n, p)| matches_at(&gs, start, p) && gs.len() - start - n >= MIN_STEM);
        match hit {
            Some((n, _)) => {
                start += n;
                cuts.push(start);
            }
            None => break,
        }
    }
    let end = SUFFIXES
        .iter()
        .map(|s| s.chars().count())
        .zip(SUFFIXES)
        .find(|&(n, s)| gs.len() - start >= n + MIN_STEM && matches_at(&gs, gs.len() - n, s))
        .map(|(n, _)| gs.len() - n);
    if let Some(e) = end {
        cuts.push(e);
    }
    for (i, g) in gs.iter().enumerate() {
        if cuts.contains(&i) {
            out.push(MARKER);
        }
        out.push_str(g);
    }
}

/// Inserts [`MARKER`] after leading clitics (at most two, longest match)
/// and before one trailing pronoun suffix, for words of five or more
/// letters. The host stem always keeps at least three letters.
pub fn presegment(text: &str) -> String {
    let mut out = String::with_capacity(text.len() + 16);
    let mut word_start: Option<usize> = None;
    let in_word = |c: char| is_arabic_letter(c) || is_diacritic(c);
    for (i, c) in text.char_indices() {
        match (word_start, in_word(c)) {
            (None, true) if !is_diacritic(c) => word_start = Some(i),
            (Some(s), false) => {
                segment_word(&text[s..i], &mut out);
                word_start = None;
                out.push(c);
            }
            (None, _) => out.push(c),
            _ => {}
        }
    }
    if let Some(s) = word_start {
        segment_word(&text[s..], &mut out);
    }
    out
}

pub fn strip_markers(text: &str) -> String {
    text.chars().filter(|&c| c != MARKER).collect()
}
