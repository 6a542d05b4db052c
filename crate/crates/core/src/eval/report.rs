use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{bleu, exact_match, qa_f1};
use super::{greedy_continue, next_word_accuracy, perplexity, robustness_curve, LanguageModel, PerturbationConfig, TextCodec};
use crate::arabic::bpe::hex_lower;
use crate::arabic::Dialect;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalKind {
    Lm,
    Qa,
    Mt,
    Robustness,
}

impl EvalKind {
    pub const ALL: [EvalKind; 4] = [EvalKind::Lm, EvalKind::Qa, EvalKind::Mt, EvalKind::Robustness];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalKind::Lm => "lm",
            EvalKind::Qa => "qa",
            EvalKind::Mt => "mt",
            EvalKind::Robustness => "robustness",
        }
    }

    pub fn parse(s: &str) -> Option<EvalKind> {
        EvalKind::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

/// One evaluation item. `text` is the LM text, QA question, MT source or
/// robustness input; `answers` holds gold answers or references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub dialect: Dialect,
    pub text: String,
    #[serde(default)]
    pub answers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    pub kind: EvalKind,
    pub items: Vec<EvalItem>,
}

impl EvalSet {
    pub fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::Contract(format!("{} eval set is empty", self.kind.as_str())));
        }
        if matches!(self.kind, EvalKind::Qa | EvalKind::Mt) {
            if let Some(i) = self.items.iter().position(|it| it.answers.is_empty()) {
                return Err(Error::Contract(format!(
                    "{} item {i} has no gold answers",
                    self.kind.as_str()
                )));
            }
        }
        Ok(())
    }

    fn hash_into(&self, h: &mut Sha256) {
        let field = |h: &mut Sha256, s: &str| {
            h.update((s.len() as u64).to_le_bytes());
            h.update(s.as_bytes());
        };
        field(h, self.kind.as_str());
        for it in &self.items {
            field(h, it.dialect.as_str());
            field(h, &it.text);
            h.update((it.answers.len() as u64).to_le_bytes());
            for a in &it.answers {
                field(h, a);
            }
        }
    }
}

/// Hex SHA-256 over every set in order.
pub fn eval_sets_hash(sets: &[EvalSet]) -> String {
    let mut h = Sha256::new();
    h.update(b"EVAL1");
    for s in sets {
        s.hash_into(&mut h);
    }
    hex_lower(&h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub dialect: Dialect,
    pub value: f64,
    pub n_items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub name: String,
    pub dialect: Dialect,
    pub level: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_hash: String,
    pub eval_hash: String,
    /// Resolved run configuration as JSON text.
    #[serde(default)]
    pub config: String,
    pub metrics: Vec<MetricRow>,
    pub curves: Vec<CurvePoint>,
    pub warnings: Vec<String>,
}

pub const METRIC_ORDER: [&str; 5] = ["perplexity", "next_word_accuracy", "bleu", "f1", "exact_match"];

fn dialect_order() -> impl Iterator<Item = Dialect> {
    Dialect::SCORED.into_iter().chain([Dialect::UNK])
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let bad_metric = self.metrics.iter().find(|m| !m.value.is_finite());
        if let Some(m) = bad_metric {
            return Err(Error::Contract(format!("{} for {} is not finite", m.metric, m.dialect)));
        }
        if let Some(c) = self.curves.iter().find(|c| !(c.value.is_finite() && c.level.is_finite())) {
            return Err(Error::Contract(format!("{} curve for {} is not finite", c.name, c.dialect)));
        }
        Ok(())
    }

    pub fn value(&self, metric: &str, dialect: Dialect) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.metric == metric && m.dialect == dialect)
            .map(|m| m.value)
    }

    pub fn dialects(&self) -> Vec<Dialect> {
        let present: BTreeSet<Dialect> = self.metrics.iter().map(|m| m.dialect).collect();
        dialect_order().filter(|d| present.contains(d)).collect()
    }

    fn metrics_present(&self) -> Vec<&str> {
        let mut names: Vec<&str> = METRIC_ORDER
            .iter()
            .copied()
            .filter(|n| self.metrics.iter().any(|m| m.metric == *n))
            .collect();
        for m in &self.metrics {
            if !names.contains(&m.metric.as_str()) {
                names.push(&m.metric);
            }
        }
        names
    }

    /// Metrics as rows and dialects as columns, followed by curve points
    /// and warnings.
    pub fn render_table(&self) -> String {
        let dialects = self.dialects();
        let mut s = String::new();
        let _ = writeln!(s, "model {}", self.model_hash);
        let _ = writeln!(s, "eval  {}", self.eval_hash);
        let _ = writeln!(s);
        let _ = write!(s, "{:<20}", "metric");
        for d in &dialects {
            let _ = write!(s, "{:>10}", d.as_str());
        }
        let _ = writeln!(s);
        for name in self.metrics_present() {
            let _ = write!(s, "{name:<20}");
            for d in &dialects {
                match self.value(name, *d) {
                    Some(v) => {
                        let _ = write!(s, "{v:>10.4}");
                    }
                    None => {
                        let _ = write!(s, "{:>10}", "-");
                    }
                }
            }
            let _ = writeln!(s);
        }
        if !self.curves.is_empty() {
            let _ = writeln!(s);
            let _ = writeln!(s, "{:<12}{:<8}{:>8}{:>10}", "curve", "dialect", "level", "value");
            for c in &self.curves {
                let _ = writeln!(s, "{:<12}{:<8}{:>8.2}{:>10.4}", c.name, c.dialect.as_str(), c.level, c.value);
            }
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }

    /// `kind,name,dialect,level,value` with one row per metric cell and
    /// one per curve point. Metric rows leave `level` empty.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("kind,name,dialect,level,value\n");
        for m in &self.metrics {
            let _ = writeln!(s, "metric,{},{},,{}", m.metric, m.dialect, m.value);
        }
        for c in &self.curves {
            let _ = writeln!(s, "curve,{},{},{},{}", c.name, c.dialect, c.level, c.value);
        }
        s
    }
}

/// Side-by-side values of two reports for every metric and dialect they
/// share, with the relative change from `base` to `tuned`.
pub fn render_comparison(base: &EvalReport, tuned: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "base  {}", base.model_hash);
    let _ = writeln!(s, "tuned {}", tuned.model_hash);
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<20}{:<8}{:>10}{:>10}{:>10}", "metric", "dialect", "base", "tuned", "change");
    for name in base.metrics_present() {
        for d in dialect_order() {
            if let (Some(a), Some(b)) = (base.value(name, d), tuned.value(name, d)) {
                let change = if a != 0.0 { format!("{:+.1}%", 100.0 * (b - a) / a) } else { String::from("-") };
                let _ = writeln!(s, "{name:<20}{:<8}{a:>10.4}{b:>10.4}{change:>10}", d.as_str());
            }
        }
    }
    s
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Per-dialect perplexity and next-word accuracy (lm items), F1 and EM
/// (qa), BLEU (mt) and a similarity curve (robustness). Scored dialects
/// without any items get a warning.
pub fn dialect_breakdown<M, C>(
    model: &M,
    codec: &C,
    sets: &[EvalSet],
    perturbation: &PerturbationConfig,
    model_hash: &str,
) -> Result<EvalReport>
where
    M: LanguageModel + ?Sized,
    C: TextCodec + ?Sized,
{
    for s in sets {
        s.validate()?;
    }
    perturbation.validate()?;
    let mut report = EvalReport {
        model_hash: String::from(model_hash),
        eval_hash: eval_sets_hash(sets),
        config: String::new(),
        metrics: Vec::new(),
        curves: Vec::new(),
        warnings: Vec::new(),
    };
    let mut row = |metric: &str, dialect, value, n_items| {
        report.metrics.push(MetricRow {
            metric: String::from(metric),
            dialect,
            value,
            n_items,
        })
    };
    let cap = perturbation.max_new_tokens;
    let mut curves = Vec::new();
    for d in dialect_order() {
        for s in sets {
            let items: Vec<&EvalItem> = s.items.iter().filter(|i| i.dialect == d).collect();
            if items.is_empty() {
                continue;
            }
            let n = items.len();
            match s.kind {
                EvalKind::Lm => {
                    let seqs: Vec<Vec<u32>> = items.iter().map(|i| codec.encode(&i.text)).collect();
                    row("perplexity", d, perplexity(model, &seqs)?, n);
                    row("next_word_accuracy", d, next_word_accuracy(model, &seqs)?, n);
                }
                EvalKind::Qa => {
                    let mut f1 = Vec::with_capacity(n);
                    let mut em = Vec::with_capacity(n);
                    for it in &items {
                        let out = greedy_continue(model, &codec.encode(&it.text), cap)?;
                        let pred = codec.decode(&out)?;
                        f1.push(qa_f1(&pred, &it.answers));
                        em.push(exact_match(&pred, &it.answers));
                    }
                    row("f1", d, mean(&f1), n);
                    row("exact_match", d, mean(&em), n);
                }
                EvalKind::Mt => {
                    let mut b = Vec::with_capacity(n);
                    for it in &items {
                        let out = greedy_continue(model, &codec.encode(&it.text), cap)?;
                        b.push(bleu(&codec.decode(&out)?, &it.answers, 4));
                    }
                    row("bleu", d, mean(&b), n);
                }
                EvalKind::Robustness => {
                    let texts: Vec<&str> = items.iter().map(|i| i.text.as_str()).collect();
                    for (level, value) in robustness_curve(model, codec, &texts, perturbation)? {
                        curves.push(CurvePoint {
                            name: String::from("similarity"),
                            dialect: d,
                            level,
                            value,
                        });
                    }
                }
            }
        }
    }
    report.curves = curves;
    for d in Dialect::SCORED {
        if !sets.iter().any(|s| s.items.iter().any(|i| i.dialect == d)) {
            report.warnings.push(format!("dialect {d} has no eval items and is omitted"));
        }
    }
    report.validate()?;
    Ok(report)
}
