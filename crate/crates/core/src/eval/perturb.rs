//! Character-level input noise for robustness curves.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::arabic::text::is_diacritic;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbOp {
    SwapAdjacent,
    Delete,
    SubstituteConfusable,
    StripOneDiacritic,
}

impl PerturbOp {
    pub const ALL: [PerturbOp; 4] = [
        PerturbOp::SwapAdjacent,
        PerturbOp::Delete,
        PerturbOp::SubstituteConfusable,
        PerturbOp::StripOneDiacritic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PerturbOp::SwapAdjacent => "swap_adjacent",
            PerturbOp::Delete => "delete",
            PerturbOp::SubstituteConfusable => "substitute_confusable",
            PerturbOp::StripOneDiacritic => "strip_one_diacritic",
        }
    }

    pub fn parse(s: &str) -> Option<PerturbOp> {
        PerturbOp::ALL.into_iter().find(|o| o.as_str() == s)
    }
}

/// Groups of letters that are commonly confused in writing.
pub const CONFUSABLE_GROUPS: [&[char]; 9] = [
    &['ب', 'ت', 'ث'],
    &['ج', 'ح', 'خ'],
    &['د', 'ذ'],
    &['ر', 'ز'],
    &['س', 'ش'],
    &['ص', 'ض'],
    &['ط', 'ظ'],
    &['ع', 'غ'],
    &['ف', 'ق'],
];

pub fn confusable_group(c: char) -> Option<&'static [char]> {
    CONFUSABLE_GROUPS.iter().copied().find(|g| g.contains(&c))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationConfig {
    pub levels: Vec<f64>,
    pub ops: Vec<PerturbOp>,
    pub seed: u64,
    pub max_new_tokens: usize,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            levels: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            ops: PerturbOp::ALL.to_vec(),
            seed: 0,
            max_new_tokens: 64,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("perturbation levels must not be empty".into()));
        }
        if let Some(l) = self.levels.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(Error::Config(format!("perturbation level {l} outside [0, 1]")));
        }
        if self.ops.is_empty() {
            return Err(Error::Config("at least one perturbation op is required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PerturbStats {
    pub positions: usize,
    pub selected: usize,
    /// Selected positions where some enabled op could act.
    pub affected: usize,
}

fn applicable(op: PerturbOp, buf: &[Option<char>], i: usize) -> bool {
    let Some(c) = buf[i] else { return false };
    match op {
        PerturbOp::SwapAdjacent => buf.get(i + 1).is_some_and(Option::is_some),
        PerturbOp::Delete => true,
        PerturbOp::SubstituteConfusable => confusable_group(c).is_some(),
        PerturbOp::StripOneDiacritic => is_diacritic(c),
    }
}

/// Applies noise at rate `level`: every character position is selected
/// independently, and a selected position receives one op drawn
/// uniformly from the enabled ops that can act there.
pub fn perturb_with_stats(text: &str, level: f64, ops: &[PerturbOp], seed: u64) -> (String, PerturbStats) {
    let mut buf: Vec<Option<char>> = text.chars().map(Some).collect();
    let mut stats = PerturbStats {
        positions: buf.len(),
        ..PerturbStats::default()
    };
    if level <= 0.0 || ops.is_empty() {
        return (String::from(text), stats);
    }
    let mut s = Rng::new(seed).fork_str("perturb").stream();
    let mut usable = Vec::with_capacity(ops.len());
    for i in 0..buf.len() {
        if s.uniform() >= level {
            continue;
        }
        stats.selected += 1;
        usable.clear();
        usable.extend(ops.iter().copied().filter(|&o| applicable(o, &buf, i)));
        if usable.is_empty() {
            continue;
        }
        stats.affected += 1;
        match usable[s.below(usable.len())] {
            PerturbOp::SwapAdjacent => buf.swap(i, i + 1),
            PerturbOp::Delete | PerturbOp::StripOneDiacritic => buf[i] = None,
            PerturbOp::SubstituteConfusable => {
                let c = buf[i].unwrap();
                let g = confusable_group(c).unwrap();
                let others: Vec<char> = g.iter().copied().filter(|&x| x != c).collect();
                buf[i] = Some(others[s.below(others.len())]);
            }
        }
    }
    (buf.into_iter().flatten().collect(), stats)
}

pub fn perturb(text: &str, level: f64, ops: &[PerturbOp], seed: u64) -> String {
    perturb_with_stats(text, level, ops, seed).0
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "ذهب الطالب إلى المدرسة صباحًا وقرأ كتابًا جديدًا عن تاريخ المغرب.";

    #[test]
    fn level_zero_is_identity() {
        for seed in 0..5 {
            assert_eq!(perturb(SAMPLE, 0.0, &PerturbOp::ALL, seed), SAMPLE);
        }
    }

    #[test]
    fn deterministic() {
        let a = perturb(SAMPLE, 0.3, &PerturbOp::ALL, 7);
        assert_eq!(a, perturb(SAMPLE, 0.3, &PerturbOp::ALL, 7));
        assert_ne!(a, SAMPLE);
    }

    #[test]
    fn substitution_stays_in_group() {
        let t = "بتثجحخدذ";
        let out = perturb(t, 1.0, &[PerturbOp::SubstituteConfusable], 3);
        for (a, b) in t.chars().zip(out.chars()) {
            assert_ne!(a, b);
            assert!(confusable_group(a).unwrap().contains(&b));
        }
    }

    #[test]
    fn strip_only_touches_diacritics() {
        let out = perturb("كَتَبَ", 1.0, &[PerturbOp::StripOneDiacritic], 1);
        assert_eq!(out, "كتب");
    }

    #[test]
    fn affected_rate_near_level() {
        let text: String = "سلام ".repeat(20_000);
        let (_, st) = perturb_with_stats(&text, 0.3, &[PerturbOp::Delete], 11);
        let f = st.affected as f64 / st.positions as f64;
        assert!((0.29..=0.31).contains(&f), "{f}");
    }

    #[test]
    fn config_validation() {
        let mut c = PerturbationConfig::default();
        assert!(c.validate().is_ok());
        c.levels.push(1.5);
        assert!(c.validate().is_err());
    }
}
