use nahw_core::eval::{perturb_with_stats, PerturbStats};
use nahw_core::Rng;

use crate::config::RunConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedLine {
    pub level: f64,
    pub text: String,
    pub stats: PerturbStats,
}

/// Perturbs each line at `level`, or at every configured level when none
/// is given. Line `i` uses the seed stream `fork(i)` of the global seed, as
/// the robustness evaluation does for item `i`.
pub fn run(cfg: &RunConfig, lines: &[String], level: Option<f64>) -> Vec<PerturbedLine> {
    let p = &cfg.eval.perturbation;
    let levels = level.map_or_else(|| p.levels.clone(), |l| vec![l]);
    let root = Rng::new(cfg.global.seed);
    let mut out = Vec::new();
    for &level in &levels {
        for (i, line) in lines.iter().enumerate() {
            let (text, stats) = perturb_with_stats(line, level, &p.ops, root.fork(i as u64).key());
            out.push(PerturbedLine { level, text, stats });
        }
    }
    out
}

pub fn render(lines: &[PerturbedLine], with_level: bool) -> String {
    let mut s = String::new();
    for l in lines {
        if with_level {
            s.push_str(&format!("{}\t", l.level));
        }
        s.push_str(&l.text);
        s.push('\n');
    }
    s
}
