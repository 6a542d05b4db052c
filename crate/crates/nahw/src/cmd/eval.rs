use std::path::{Path, PathBuf};

use log::info;
use nahw_core::eval::{dialect_breakdown, render_comparison, EvalKind, EvalReport, EvalSet};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::format::{checkpoint, vocab};
use crate::fsutil;
use crate::input;

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const CURVES_CSV: &str = "curves.csv";
pub const BASE_REPORT_JSON: &str = "base_report.json";
pub const COMPARISON_TXT: &str = "comparison.txt";

#[derive(Debug)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub base: Option<EvalReport>,
}

pub fn load_sets(cfg: &RunConfig) -> Result<Vec<EvalSet>> {
    let e = &cfg.eval;
    let mut sets = Vec::new();
    for (kind, path) in [
        (EvalKind::Lm, &e.lm),
        (EvalKind::Qa, &e.qa),
        (EvalKind::Mt, &e.mt),
        (EvalKind::Robustness, &e.robustness),
    ] {
        if let Some(p) = path {
            sets.push(input::read_eval_set(kind, p)?);
        }
    }
    if sets.is_empty() {
        return Err(CliError::Config("no eval sets configured (eval.lm, eval.qa, eval.mt, eval.robustness)".into()));
    }
    Ok(sets)
}

fn evaluate(cfg: &RunConfig, dir: &Path, sets: &[EvalSet]) -> Result<EvalReport> {
    let ck = checkpoint::load(dir)?;
    let tokenizer = match &cfg.eval.tokenizer {
        Some(p) => {
            let t = vocab::load(p)?;
            if t.vocab.hash() != ck.header.vocab_hash {
                return Err(CliError::Config(format!(
                    "{}: eval tokenizer hash {} does not match checkpoint {} ({})",
                    p.display(),
                    t.vocab.hash(),
                    dir.display(),
                    ck.header.vocab_hash
                )));
            }
            t
        }
        None => ck.tokenizer,
    };
    info!("evaluating {}", dir.display());
    let mut report = dialect_breakdown(&ck.model, &tokenizer, sets, &cfg.eval.perturbation, &ck.model_hash)?;
    report.config = cfg.to_compact_json();
    Ok(report)
}

pub fn run(cfg: &RunConfig, out: &Path) -> Result<EvalOutcome> {
    let dir: PathBuf = cfg
        .eval
        .checkpoint
        .clone()
        .ok_or_else(|| CliError::Config("eval needs a checkpoint directory".into()))?;
    let sets = load_sets(cfg)?;
    let report = evaluate(cfg, &dir, &sets)?;
    fsutil::write_json(&out.join(REPORT_JSON), &report)?;
    fsutil::write_bytes(&out.join(REPORT_TXT), report.render_table().as_bytes())?;
    fsutil::write_bytes(&out.join(CURVES_CSV), report.curves_csv().as_bytes())?;
    let base = match &cfg.eval.compare {
        Some(other) => {
            let base = evaluate(cfg, other, &sets)?;
            fsutil::write_json(&out.join(BASE_REPORT_JSON), &base)?;
            fsutil::write_bytes(&out.join(COMPARISON_TXT), render_comparison(&base, &report).as_bytes())?;
            Some(base)
        }
        None => None,
    };
    cfg.write_echo(out)?;
    Ok(EvalOutcome { report, base })
}
