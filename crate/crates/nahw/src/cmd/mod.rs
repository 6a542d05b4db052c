//! Subcommands and the argument layer that feeds [`RunConfig`].

pub mod eval;
pub mod inspect;
pub mod perturb;
pub mod prep;
pub mod train;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::config::{parse_assignment, RunConfig};
use crate::error::{CliError, Result};
use crate::fsutil;

pub const TOKENIZER_FILE: &str = "tokenizer.json";

#[derive(Debug, Parser)]
#[command(name = "nahw", version, about = "Arabic corpus preparation, 4-bit LoRA training and evaluation")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override any config value, e.g. `--set train.train.lr_max=1e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub log_level: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Clean, tag and tokenize a JSONL corpus into shards.
    Prep(PrepArgs),
    /// Train adapters on prepared shards.
    Train(TrainArgs),
    /// Score a checkpoint on eval sets and write reports.
    Eval(EvalArgs),
    /// Apply character noise to text, for inspecting robustness inputs.
    Perturb(PerturbArgs),
    /// Print the headers of a shard set, checkpoint or format file.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct PrepArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub shards: Option<PathBuf>,
    /// Total macro-steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Label recorded in the trainer state for multi-stage runs.
    #[arg(long)]
    pub stage: Option<String>,
    /// Start from a previous stage's checkpoint with a fresh optimizer.
    #[arg(long)]
    pub init_from: Option<PathBuf>,
    /// Train only on documents tagged with this dialect.
    #[arg(long)]
    pub dialect: Option<String>,
    /// Word-vector file for embedding initialization.
    #[arg(long)]
    pub vectors: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory.
    pub checkpoint: Option<PathBuf>,
    /// Baseline checkpoint for a side-by-side comparison.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub lm: Option<PathBuf>,
    #[arg(long)]
    pub qa: Option<PathBuf>,
    #[arg(long)]
    pub mt: Option<PathBuf>,
    #[arg(long)]
    pub robustness: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[arg(long, conflicts_with = "input")]
    pub text: Option<String>,
    /// File with one text per line.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Noise level; every configured level when absent.
    #[arg(long)]
    pub level: Option<f64>,
    /// Comma-separated ops: swap_adjacent, delete, substitute_confusable,
    /// strip_one_diacritic.
    #[arg(long, value_delimiter = ',')]
    pub ops: Vec<String>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

fn put(layer: &mut Value, path: &[&str], v: Value) {
    let mut cur = layer;
    for k in &path[..path.len() - 1] {
        cur = cur
            .as_object_mut()
            .expect("object layer")
            .entry(*k)
            .or_insert_with(|| json!({}));
    }
    cur.as_object_mut().expect("object layer").insert(path[path.len() - 1].into(), v);
}

fn path_value(p: &std::path::Path) -> Value {
    json!(p)
}

impl Cli {
    /// Command-line values as config layers, `--set` first and named
    /// flags last.
    pub fn overrides(&self) -> Result<Vec<Value>> {
        let mut layers = self.set.iter().map(|s| parse_assignment(s)).collect::<Result<Vec<_>>>()?;
        let mut f = json!({});
        if let Some(s) = self.seed {
            put(&mut f, &["global", "seed"], json!(s));
        }
        if let Some(o) = &self.out {
            put(&mut f, &["global", "output_dir"], path_value(o));
        }
        if let Some(l) = &self.log_level {
            put(&mut f, &["global", "log_level"], json!(l));
        }
        let opt = |f: &mut Value, path: &[&str], p: &Option<PathBuf>| {
            if let Some(p) = p {
                put(f, path, path_value(p));
            }
        };
        match &self.command {
            Command::Prep(a) => {
                opt(&mut f, &["prep", "input"], &a.input);
                opt(&mut f, &["prep", "lexicon"], &a.lexicon);
                opt(&mut f, &["prep", "tokenizer"], &a.tokenizer);
                if let Some(v) = a.vocab_size {
                    put(&mut f, &["prep", "vocab_size"], json!(v));
                }
            }
            Command::Train(a) => {
                opt(&mut f, &["train", "shards"], &a.shards);
                opt(&mut f, &["train", "resume"], &a.resume);
                opt(&mut f, &["train", "init_from"], &a.init_from);
                opt(&mut f, &["train", "vectors"], &a.vectors);
                if let Some(s) = a.steps {
                    put(&mut f, &["train", "train", "total_steps"], json!(s));
                }
                if let Some(s) = &a.stage {
                    put(&mut f, &["train", "stage"], json!(s));
                }
                if let Some(d) = &a.dialect {
                    put(&mut f, &["train", "dialect"], json!(d));
                }
            }
            Command::Eval(a) => {
                opt(&mut f, &["eval", "checkpoint"], &a.checkpoint);
                opt(&mut f, &["eval", "compare"], &a.compare);
                opt(&mut f, &["eval", "tokenizer"], &a.tokenizer);
                opt(&mut f, &["eval", "lm"], &a.lm);
                opt(&mut f, &["eval", "qa"], &a.qa);
                opt(&mut f, &["eval", "mt"], &a.mt);
                opt(&mut f, &["eval", "robustness"], &a.robustness);
            }
            Command::Perturb(a) => {
                if !a.ops.is_empty() {
                    put(&mut f, &["eval", "perturbation", "ops"], json!(a.ops));
                }
            }
            Command::Inspect(_) => {}
        }
        layers.push(f);
        Ok(layers)
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), self.overrides()?)
    }
}

/// Runs one command, writing human-readable output to `stdout`.
pub fn execute(cli: &Cli, stdout: &mut dyn Write) -> Result<()> {
    let cfg = cli.resolve()?;
    let out = cfg.global.output_dir.clone();
    let w = |stdout: &mut dyn Write, s: &str| stdout.write_all(s.as_bytes()).map_err(CliError::io(std::path::Path::new("<stdout>")));
    match &cli.command {
        Command::Prep(_) => {
            let m = prep::run(&cfg, &out)?;
            w(stdout, &prep::summary(&m))
        }
        Command::Train(_) => {
            let o = train::run(&cfg, &out)?;
            let last = o.records.last().map_or(f64::NAN, |r| r.loss);
            w(
                stdout,
                &format!(
                    "trained steps {}..{} on {} documents, final loss {last:.4}\ncheckpoint {} ({})\n",
                    o.start_step + 1,
                    o.start_step + o.records.len() as u64,
                    o.n_docs,
                    o.final_dir.display(),
                    o.model_hash
                ),
            )
        }
        Command::Eval(_) => {
            let o = eval::run(&cfg, &out)?;
            w(stdout, &o.report.render_table())?;
            if let Some(base) = &o.base {
                w(stdout, "\n")?;
                w(stdout, &nahw_core::eval::render_comparison(base, &o.report))?;
            }
            Ok(())
        }
        Command::Perturb(a) => {
            cfg.eval.perturbation.validate()?;
            let lines: Vec<String> = match (&a.text, &a.input) {
                (Some(t), _) => vec![t.clone()],
                (None, Some(p)) => fsutil::read_string(p)?.lines().map(str::to_string).collect(),
                (None, None) => return Err(CliError::Config("perturb needs --text or --input".into())),
            };
            if let Some(l) = a.level {
                if !(0.0..=1.0).contains(&l) {
                    return Err(CliError::Config(format!("level {l} outside [0, 1]")));
                }
            }
            let res = perturb::run(&cfg, &lines, a.level);
            w(stdout, &perturb::render(&res, a.level.is_none()))
        }
        Command::Inspect(a) => {
            let v = inspect::run(&a.path)?;
            w(stdout, &fsutil::to_json(&v))
        }
    }
}
