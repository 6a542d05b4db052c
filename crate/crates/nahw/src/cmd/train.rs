use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use nahw_core::arabic::{bpe, prepare, Dialect, Tokenizer};
use nahw_core::model::TransformerModel;
use nahw_core::train::{MetricsRecord, PackedDataset, Trainer};
use nahw_core::Rng;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::format::checkpoint::{self, TrainerState};
use crate::format::shards::ShardSet;
use crate::format::{qnf4, vocab};
use crate::fsutil;
use crate::input;

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_DIR: &str = "final";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_dir: PathBuf,
    pub model_hash: String,
    pub records: Vec<MetricsRecord>,
    pub n_docs: usize,
    pub start_step: u64,
}

fn base_fingerprint(model: &TransformerModel) -> Result<String> {
    let mut parts = Vec::new();
    for q in model.base_tensors() {
        parts.push(qnf4::to_bytes(q)?);
    }
    let refs: Vec<&[u8]> = parts.iter().map(Vec::as_slice).collect();
    Ok(fsutil::sha256_hex(&refs))
}

fn same_vocab(dir: &Path, ck: &Tokenizer, tok: &Tokenizer) -> Result<()> {
    if ck.vocab.hash() != tok.vocab.hash() {
        return Err(CliError::Config(format!(
            "{}: checkpoint vocabulary {} differs from the shards' {}",
            dir.display(),
            ck.vocab.hash(),
            tok.vocab.hash()
        )));
    }
    Ok(())
}

/// Lines of an earlier `metrics.csv` up to and including `step`.
fn retained_metrics(path: &Path, step: u64) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(fsutil::read_string(path)?
        .lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= step))
        .map(str::to_string)
        .collect())
}

fn prune_checkpoints(dir: &Path, keep: usize) -> Result<()> {
    let mut steps: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(CliError::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("step-")))
        .collect();
    steps.sort();
    let n = steps.len().saturating_sub(keep);
    for p in &steps[..n] {
        fs::remove_dir_all(p).map_err(CliError::io(p))?;
    }
    Ok(())
}

/// The untrained model a run starts from: seeded initialization,
/// diacritic flags from the tokenizer and optional word vectors.
pub fn fresh_model(cfg: &RunConfig, tokenizer: &Tokenizer) -> Result<TransformerModel> {
    let t = &cfg.train;
    let mut model_cfg = t.model.clone();
    model_cfg.vocab_size = tokenizer.vocab.vocab_size();
    let mut m = TransformerModel::build(&model_cfg, &t.lora, Rng::new(t.train.seed).fork_str("init"))?;
    m.set_diacritic_flags(tokenizer.vocab.diacritic_flags())?;
    if let Some(vp) = &t.vectors {
        let vectors = input::read_vectors(vp)?;
        let policy = tokenizer.policy;
        let n = m.init_embeddings_from_vectors(
            vectors.iter().map(|(w, v)| (w.as_str(), v.as_slice())),
            |w| tokenizer.vocab.id_of(&prepare(w, &policy)),
        )?;
        info!("{n} embedding rows initialized from {}", vp.display());
    }
    Ok(m)
}

pub fn run(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    let t = &cfg.train;
    let shard_dir = t
        .shards
        .as_deref()
        .ok_or_else(|| CliError::Config("train needs a shard directory (train.shards or --shards)".into()))?;
    let set = ShardSet::open(shard_dir)?;
    let tokenizer = vocab::load(&shard_dir.join(super::TOKENIZER_FILE))?;
    if tokenizer.vocab.hash() != set.manifest.vocab_hash {
        return Err(CliError::Config(format!(
            "{}: tokenizer hash differs from the manifest's vocabulary hash",
            shard_dir.display()
        )));
    }
    let dialect = t
        .dialect
        .as_deref()
        .map(|s| Dialect::parse(s).ok_or_else(|| CliError::Config(format!("unknown dialect {s:?}"))))
        .transpose()?;
    let docs = set.docs(dialect);
    if docs.is_empty() {
        return Err(CliError::data(
            shard_dir,
            format!("no documents tagged {}", dialect.map_or("(any)", Dialect::as_str)),
        ));
    }
    let n_docs = docs.len();
    info!("training on {n_docs} documents");
    let data = PackedDataset::new(docs, t.train.seq_len, bpe::SEP, t.train.seed)
        .map_err(|e| CliError::data(shard_dir, e))?;

    let mut model_cfg = t.model.clone();
    model_cfg.vocab_size = tokenizer.vocab.vocab_size();
    let mut init_from_sha = None;

    let mut trainer = if let Some(dir) = &t.resume {
        let ck = checkpoint::load(dir)?;
        same_vocab(dir, &ck.tokenizer, &tokenizer)?;
        let state = ck
            .state
            .ok_or_else(|| CliError::data(dir, "checkpoint has no trainer_state.json"))?;
        let opt = ck
            .optimizer
            .ok_or_else(|| CliError::data(dir, "checkpoint has no optimizer state"))?;
        if ck.header.model != model_cfg || ck.header.lora != t.lora || state.train != t.train {
            return Err(CliError::Config(format!(
                "{}: resumed run must use the checkpoint's model, adapter and training settings",
                dir.display()
            )));
        }
        init_from_sha = state.init_from_adapters_sha256.clone();
        info!("resuming from step {}", state.step);
        Trainer::resume(ck.model, data, t.train.clone(), opt, state.step)?
    } else {
        let model = if let Some(dir) = &t.init_from {
            let ck = checkpoint::load(dir)?;
            same_vocab(dir, &ck.tokenizer, &tokenizer)?;
            if ck.header.model != model_cfg || ck.header.lora != t.lora {
                return Err(CliError::Config(format!(
                    "{}: next stage must keep the previous stage's model and adapter settings",
                    dir.display()
                )));
            }
            info!("stage starts from adapters {}", ck.adapters_sha256);
            init_from_sha = Some(ck.adapters_sha256);
            ck.model
        } else {
            fresh_model(cfg, &tokenizer)?
        };
        Trainer::new(model, data, t.train.clone())?
    };
    let start_step = trainer.step;
    let base_before = base_fingerprint(&trainer.model)?;

    let metrics_path = out.join(METRICS_FILE);
    let kept = if t.resume.is_some() {
        retained_metrics(&metrics_path, start_step)?
    } else {
        Vec::new()
    };
    fs::create_dir_all(out).map_err(CliError::io(out))?;
    let mut metrics = File::create(&metrics_path).map_err(CliError::io(&metrics_path))?;
    let line = |m: &mut File, s: &str| writeln!(m, "{s}").map_err(CliError::io(&metrics_path));
    line(&mut metrics, MetricsRecord::CSV_HEADER)?;
    for l in &kept {
        line(&mut metrics, l)?;
    }
    drop(metrics);
    let mut metrics = OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(CliError::io(&metrics_path))?;
    cfg.write_echo(out)?;

    let state_at = |step: u64| TrainerState {
        step,
        train: t.train.clone(),
        seed: t.train.seed,
        stage: t.stage.clone(),
        dialect: dialect.map(|d| d.as_str().to_string()),
        init_from_adapters_sha256: init_from_sha.clone(),
    };
    let total = t.train.total_steps;
    let mut records = Vec::new();
    while trainer.step < total {
        let clock = Instant::now();
        let mut rec = trainer.train_step().inspect_err(|e| warn!("{e}"))?;
        rec.wall_ms = clock.elapsed().as_millis() as u64;
        line(&mut metrics, &rec.csv_line())?;
        if rec.step % t.train.checkpoint_every == 0 && rec.step < total {
            let dir = out.join(CHECKPOINT_DIR).join(format!("step-{:06}", rec.step));
            checkpoint::save(&dir, &trainer.model, &tokenizer, Some(&trainer.optimizer), Some(&state_at(rec.step)))?;
            prune_checkpoints(&out.join(CHECKPOINT_DIR), t.train.keep_checkpoints)?;
        }
        if rec.step % 50 == 0 || rec.step == total {
            info!("step {} loss {:.4} lr {:.3e}", rec.step, rec.loss, rec.lr);
        }
        records.push(rec);
    }
    if base_fingerprint(&trainer.model)? != base_before {
        return Err(CliError::Training("training aborted: quantized base weights changed during training".into()));
    }
    let final_dir = out.join(FINAL_DIR);
    let model_hash = checkpoint::save(
        &final_dir,
        &trainer.model,
        &tokenizer,
        Some(&trainer.optimizer),
        Some(&state_at(trainer.step)),
    )?;
    Ok(TrainOutcome {
        final_dir,
        model_hash,
        records,
        n_docs,
        start_step,
    })
}
