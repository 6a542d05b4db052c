//! Evaluation: perplexity, next-word accuracy, QA and translation
//! metrics, robustness curves and per-dialect reports.

pub mod metrics;
pub mod perturb;
pub mod report;

use alloc::vec::Vec;

use crate::arabic::bpe::{BOS, EOS, SEP};
use crate::arabic::Tokenizer;
use crate::autograd::log_sum_exp;
use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use metrics::{bleu, eval_normalize, eval_tokens, exact_match, qa_f1, token_f1};
pub use perturb::{perturb, perturb_with_stats, PerturbOp, PerturbStats, PerturbationConfig};
pub use report::{
    dialect_breakdown, eval_sets_hash, render_comparison, CurvePoint, EvalItem, EvalKind, EvalReport, EvalSet, MetricRow,
    METRIC_ORDER,
};

/// Anything that maps a token prefix to next-token logits `[len × vocab]`.
pub trait LanguageModel {
    fn vocab_size(&self) -> usize;
    fn max_seq_len(&self) -> usize;
    fn logits(&self, tokens: &[u32]) -> Result<Tensor>;
}

impl LanguageModel for TransformerModel {
    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn max_seq_len(&self) -> usize {
        self.cfg.max_seq_len
    }

    fn logits(&self, tokens: &[u32]) -> Result<Tensor> {
        self.forward(tokens)
    }
}

pub trait TextCodec {
    fn encode(&self, text: &str) -> Vec<u32>;
    fn decode(&self, ids: &[u32]) -> Result<alloc::string::String>;
}

impl TextCodec for Tokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        Tokenizer::encode(self, text)
    }

    fn decode(&self, ids: &[u32]) -> Result<alloc::string::String> {
        Tokenizer::decode(self, ids)
    }
}

/// Calls `f(row_logits, target)` for every teacher-forced position of the
/// BOS-prefixed sequences, splitting long sequences into context-sized
/// chunks.
fn for_each_position<M, F>(model: &M, sequences: &[Vec<u32>], mut f: F) -> Result<usize>
where
    M: LanguageModel + ?Sized,
    F: FnMut(&[f64], u32),
{
    let ctx = model.max_seq_len();
    if ctx == 0 {
        return Err(Error::Contract("model context length is zero".into()));
    }
    let mut n = 0;
    for s in sequences {
        let mut full = Vec::with_capacity(s.len() + 1);
        full.push(BOS);
        full.extend_from_slice(s);
        let mut start = 0;
        while start + 1 < full.len() {
            let end = (start + ctx).min(full.len() - 1);
            let logits = model.logits(&full[start..end])?;
            let (rows, v) = logits.dims2()?;
            if rows != end - start || v != model.vocab_size() {
                return Err(Error::dims("logits", &[end - start, model.vocab_size()], logits.shape()));
            }
            for (r, &t) in full[start + 1..=end].iter().enumerate() {
                f(logits.row(r), t);
                n += 1;
            }
            start = end;
        }
    }
    Ok(n)
}

/// `exp(total NLL / predicted tokens)`, teacher-forced with a BOS prefix.
pub fn perplexity<M: LanguageModel + ?Sized>(model: &M, sequences: &[Vec<u32>]) -> Result<f64> {
    let mut nll = 0.0;
    let n = for_each_position(model, sequences, |row, t| {
        nll += log_sum_exp(row) - row[t as usize];
    })?;
    if n == 0 {
        return Err(Error::Contract("perplexity needs at least one token".into()));
    }
    Ok(libm::exp(nll / n as f64))
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

pub fn next_word_accuracy<M: LanguageModel + ?Sized>(model: &M, sequences: &[Vec<u32>]) -> Result<f64> {
    let mut hits = 0usize;
    let n = for_each_position(model, sequences, |row, t| {
        hits += (argmax(row) == t as usize) as usize;
    })?;
    if n == 0 {
        return Err(Error::Contract("next-word accuracy needs at least one token".into()));
    }
    Ok(hits as f64 / n as f64)
}

/// Greedy continuation of `prompt` (BOS-prefixed). Stops at EOS or SEP,
/// which are not returned, or after `max_new` tokens. The context slides
/// to the most recent `max_seq_len` tokens.
pub fn greedy_continue<M: LanguageModel + ?Sized>(model: &M, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
    let ctx = model.max_seq_len();
    let mut seq = Vec::with_capacity(prompt.len() + max_new + 1);
    seq.push(BOS);
    seq.extend_from_slice(prompt);
    let mut out = Vec::new();
    for _ in 0..max_new {
        let window = &seq[seq.len().saturating_sub(ctx)..];
        let logits = model.logits(window)?;
        let (rows, _) = logits.dims2()?;
        let next = argmax(logits.row(rows - 1)) as u32;
        if next == EOS || next == SEP {
            break;
        }
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}

/// Mean continuation F1 (clean input versus perturbed input) per level.
pub fn robustness_curve<M, C>(model: &M, codec: &C, texts: &[&str], cfg: &PerturbationConfig) -> Result<Vec<(f64, f64)>>
where
    M: LanguageModel + ?Sized,
    C: TextCodec + ?Sized,
{
    cfg.validate()?;
    if texts.is_empty() {
        return Err(Error::Contract("robustness curve needs at least one text".into()));
    }
    let clean: Vec<Vec<u32>> = texts
        .iter()
        .map(|t| greedy_continue(model, &codec.encode(t), cfg.max_new_tokens))
        .collect::<Result<_>>()?;
    let root = Rng::new(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.levels.len());
    for &level in &cfg.levels {
        let mut total = 0.0;
        for (i, t) in texts.iter().enumerate() {
            let seed = root.fork(i as u64).key();
            let noisy = perturb(t, level, &cfg.ops, seed);
            let cont = if noisy == *t {
                clean[i].clone()
            } else {
                greedy_continue(model, &codec.encode(&noisy), cfg.max_new_tokens)?
            };
            total += token_f1(&cont, &clean[i]);
        }
        curve.push((level, total / texts.len() as f64));
    }
    Ok(curve)
}
