//! Checkpoint directories.
//!
//! ```text
//! <dir>/model.qnf4       "NMDL" | version u16 | header_len u32 | JSON header
//!                        embedding f32 | final gain, bias f32
//!                        per layer: ln1 gain, ln1 bias, ln2 gain, ln2 bias f32
//!                        per layer: Q K V O up down as QNF4 records
//!                        diacritic flags u8 × vocab
//! <dir>/adapters.lora    see `format::lora`
//! <dir>/optimizer.st8    "OST8" optimizer moments (absent for eval-only dirs)
//! <dir>/trainer_state.json
//! <dir>/tokenizer.json
//! ```

use std::path::{Path, PathBuf};

use nahw_core::arabic::Tokenizer;
use nahw_core::lora::{LoraConfig, Target};
use nahw_core::model::{ModelConfig, TransformerModel};
use nahw_core::optim::{AdamWConfig, Moments, OptimizerKind, OptimizerState};
use nahw_core::quant::Quantized8bitState;
use nahw_core::train::TrainConfig;
use nahw_core::{DType, Error, Rng, Tensor};
use serde::{Deserialize, Serialize};

use super::binio::{Reader, Writer};
use super::{lora, qnf4, vocab};
use crate::error::{CliError, Result};
use crate::fsutil;

pub const MODEL_FILE: &str = "model.qnf4";
pub const ADAPTER_FILE: &str = "adapters.lora";
pub const OPTIMIZER_FILE: &str = "optimizer.st8";
pub const STATE_FILE: &str = "trainer_state.json";
pub const TOKENIZER_FILE: &str = "tokenizer.json";

const MODEL_MAGIC: &[u8; 4] = b"NMDL";
const OPT_MAGIC: &[u8; 4] = b"OST8";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHeader {
    pub model: ModelConfig,
    pub lora: LoraConfig,
    pub vocab_hash: String,
}

fn put_tensor(w: &mut Writer, t: &Tensor) {
    w.f32s_of(t.data());
}

fn get_tensor(r: &mut Reader, shape: &[usize]) -> nahw_core::Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new(shape, DType::Full, r.f32s_wide(n)?)
}

pub fn model_to_bytes(model: &TransformerModel, vocab_hash: &str) -> nahw_core::Result<Vec<u8>> {
    let header = ModelHeader {
        model: model.cfg.clone(),
        lora: model.lora.clone(),
        vocab_hash: vocab_hash.to_string(),
    };
    let json = serde_json::to_vec(&header).expect("serializable header");
    let mut w = Writer::new();
    w.bytes(MODEL_MAGIC).u16(VERSION).u32_len(json.len())?.bytes(&json);
    put_tensor(&mut w, &model.embedding);
    put_tensor(&mut w, &model.final_gain);
    put_tensor(&mut w, &model.final_bias);
    for b in &model.blocks {
        for t in [&b.ln1_gain, &b.ln1_bias, &b.ln2_gain, &b.ln2_bias] {
            put_tensor(&mut w, t);
        }
    }
    for q in model.base_tensors() {
        qnf4::write(&mut w, q)?;
    }
    for &f in &model.diacritic_flags {
        w.u8(f as u8);
    }
    Ok(w.buf)
}

pub fn read_model_header(r: &mut Reader) -> nahw_core::Result<ModelHeader> {
    r.magic(MODEL_MAGIC)?;
    r.version(VERSION)?;
    let n = r.u32()? as usize;
    serde_json::from_slice(r.take(n)?).map_err(|e| Error::Format(format!("model header: {e}")))
}

/// Rebuilds a model. Adapters keep their freshly initialized values until
/// an adapter file is applied.
pub fn model_from_bytes(b: &[u8]) -> nahw_core::Result<(TransformerModel, ModelHeader)> {
    let mut r = Reader::new(b, "model");
    let header = read_model_header(&mut r)?;
    let cfg = &header.model;
    let mut model = TransformerModel::build(cfg, &header.lora, Rng::new(0))?;
    let d = cfg.d_model;
    model.embedding = get_tensor(&mut r, &[cfg.vocab_size, d])?;
    model.final_gain = get_tensor(&mut r, &[d])?;
    model.final_bias = get_tensor(&mut r, &[d])?;
    for b in &mut model.blocks {
        b.ln1_gain = get_tensor(&mut r, &[d])?;
        b.ln1_bias = get_tensor(&mut r, &[d])?;
        b.ln2_gain = get_tensor(&mut r, &[d])?;
        b.ln2_bias = get_tensor(&mut r, &[d])?;
    }
    for b in &mut model.blocks {
        for lin in [&mut b.q, &mut b.k, &mut b.v, &mut b.o, &mut b.up, &mut b.down] {
            let q = qnf4::read(&mut r)?;
            if q.shape() != lin.base.shape() {
                return Err(Error::dims("base tensor", lin.base.shape(), q.shape()));
            }
            lin.base = q;
        }
    }
    let flags = r.take(cfg.vocab_size)?.iter().map(|&f| f != 0).collect();
    model.set_diacritic_flags(flags)?;
    r.finish()?;
    Ok((model, header))
}

pub fn optimizer_to_bytes(opt: &OptimizerState) -> nahw_core::Result<Vec<u8>> {
    let mut w = Writer::new();
    w.bytes(OPT_MAGIC).u16(VERSION);
    w.u8(match opt.kind {
        OptimizerKind::AdamW8bit => 0,
        OptimizerKind::AdamW32 => 1,
        OptimizerKind::Sgd => 2,
    });
    w.u64(opt.step);
    w.f64(opt.cfg.beta1).f64(opt.cfg.beta2).f64(opt.cfg.eps).f64(opt.cfg.weight_decay);
    w.u32_len(opt.moments.len())?;
    let shape = |w: &mut Writer, s: &[usize]| -> nahw_core::Result<()> {
        w.u32_len(s.len())?;
        for &d in s {
            w.u32_len(d)?;
        }
        Ok(())
    };
    for m in &opt.moments {
        match m {
            Moments::None => {
                w.u8(0);
            }
            Moments::Q8 { m, v } => {
                w.u8(1);
                shape(&mut w, m.shape())?;
                w.u32_len(m.block_size())?;
                for s in [m, v] {
                    w.bytes(s.codes()).f32s(s.absmax());
                }
            }
            Moments::F32 { m, v } => {
                w.u8(2);
                shape(&mut w, m.shape())?;
                w.f32s_of(m.data()).f32s_of(v.data());
            }
        }
    }
    Ok(w.buf)
}

pub fn optimizer_from_bytes(b: &[u8]) -> nahw_core::Result<OptimizerState> {
    let mut r = Reader::new(b, "optimizer");
    r.magic(OPT_MAGIC)?;
    r.version(VERSION)?;
    let kind = match r.u8()? {
        0 => OptimizerKind::AdamW8bit,
        1 => OptimizerKind::AdamW32,
        2 => OptimizerKind::Sgd,
        k => return Err(Error::Format(format!("optimizer: unknown kind {k}"))),
    };
    let step = r.u64()?;
    let cfg = AdamWConfig {
        beta1: r.f64()?,
        beta2: r.f64()?,
        eps: r.f64()?,
        weight_decay: r.f64()?,
    };
    let n = r.u32()? as usize;
    let shape = |r: &mut Reader| -> nahw_core::Result<Vec<usize>> {
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("optimizer: implausible rank {rank}")));
        }
        (0..rank).map(|_| r.u32().map(|d| d as usize)).collect()
    };
    let mut moments = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let m = match r.u8()? {
            0 => Moments::None,
            1 => {
                let s = shape(&mut r)?;
                let block = r.u32()? as usize;
                if block == 0 {
                    return Err(Error::Format("optimizer: zero block size".into()));
                }
                let numel: usize = s.iter().product();
                let mut state = || -> nahw_core::Result<Quantized8bitState> {
                    let codes = r.take(numel)?.to_vec();
                    let absmax = r.f32s(numel.div_ceil(block))?;
                    Quantized8bitState::from_parts(s.clone(), block, codes, absmax)
                };
                let m = state()?;
                let v = state()?;
                Moments::Q8 { m, v }
            }
            2 => {
                let s = shape(&mut r)?;
                let m = get_tensor(&mut r, &s)?;
                let v = get_tensor(&mut r, &s)?;
                Moments::F32 { m, v }
            }
            t => return Err(Error::Format(format!("optimizer: unknown moment tag {t}"))),
        };
        moments.push(m);
    }
    r.finish()?;
    Ok(OptimizerState::from_parts(kind, cfg, step, moments))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerState {
    pub step: u64,
    pub train: TrainConfig,
    /// Root of every RNG stream in the run; with `step` this is the full
    /// random state.
    pub seed: u64,
    pub stage: Option<String>,
    pub dialect: Option<String>,
    pub init_from_adapters_sha256: Option<String>,
}

pub struct Checkpoint {
    pub model: TransformerModel,
    pub header: ModelHeader,
    pub tokenizer: Tokenizer,
    pub optimizer: Option<OptimizerState>,
    pub state: Option<TrainerState>,
    pub model_hash: String,
    pub adapters_sha256: String,
}

pub fn save(
    dir: &Path,
    model: &TransformerModel,
    tokenizer: &Tokenizer,
    optimizer: Option<&OptimizerState>,
    state: Option<&TrainerState>,
) -> Result<String> {
    let model_bytes = model_to_bytes(model, &tokenizer.vocab.hash())?;
    let adapter_bytes = lora::to_bytes(model)?;
    fsutil::write_bytes(&dir.join(MODEL_FILE), &model_bytes)?;
    fsutil::write_bytes(&dir.join(ADAPTER_FILE), &adapter_bytes)?;
    if let Some(o) = optimizer {
        fsutil::write_bytes(&dir.join(OPTIMIZER_FILE), &optimizer_to_bytes(o)?)?;
    }
    if let Some(s) = state {
        fsutil::write_json(&dir.join(STATE_FILE), s)?;
    }
    vocab::save(tokenizer, &dir.join(TOKENIZER_FILE))?;
    Ok(fsutil::sha256_hex(&[&model_bytes, &adapter_bytes]))
}

/// SHA-256 over the model and adapter files, the identity reported by
/// evaluation.
pub fn hash(dir: &Path) -> Result<String> {
    let m = fsutil::read_bytes(&dir.join(MODEL_FILE))?;
    let a = fsutil::read_bytes(&dir.join(ADAPTER_FILE))?;
    Ok(fsutil::sha256_hex(&[&m, &a]))
}

fn data_err(path: PathBuf) -> impl FnOnce(Error) -> CliError {
    move |e| match e {
        Error::Config(_) => CliError::from(e),
        _ => CliError::data(&path, e),
    }
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let mp = dir.join(MODEL_FILE);
    let ap = dir.join(ADAPTER_FILE);
    let model_bytes = fsutil::read_bytes(&mp)?;
    let adapter_bytes = fsutil::read_bytes(&ap)?;
    let (mut model, header) = model_from_bytes(&model_bytes).map_err(data_err(mp))?;
    let adapters = lora::from_bytes(&adapter_bytes).map_err(data_err(ap.clone()))?;
    lora::apply(&mut model, &adapters).map_err(data_err(ap))?;
    let tokenizer = vocab::load(&dir.join(TOKENIZER_FILE))?;
    if tokenizer.vocab.hash() != header.vocab_hash {
        return Err(CliError::Config(format!(
            "{}: tokenizer hash {} differs from the model's vocabulary hash {}",
            dir.display(),
            tokenizer.vocab.hash(),
            header.vocab_hash
        )));
    }
    let op = dir.join(OPTIMIZER_FILE);
    let optimizer = if op.exists() {
        let b = fsutil::read_bytes(&op)?;
        Some(optimizer_from_bytes(&b).map_err(data_err(op))?)
    } else {
        None
    };
    let sp = dir.join(STATE_FILE);
    let state = if sp.exists() { Some(fsutil::read_json(&sp)?) } else { None };
    Ok(Checkpoint {
        model,
        header,
        tokenizer,
        optimizer,
        state,
        model_hash: fsutil::sha256_hex(&[&model_bytes, &adapter_bytes]),
        adapters_sha256: fsutil::sha256_hex(&[&adapter_bytes]),
    })
}

/// Adapter tensors in file order, for inspection.
pub fn adapter_summary(model: &TransformerModel) -> Vec<(usize, Target, Vec<usize>, Vec<usize>)> {
    let mut out = Vec::new();
    for (l, b) in model.blocks.iter().enumerate() {
        for t in Target::ALL {
            if let Some(ad) = &b.projection(t).adapter {
                out.push((l, t, ad.a.shape().to_vec(), ad.b.shape().to_vec()));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> TransformerModel {
        let cfg = ModelConfig {
            vocab_size: 270,
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ffn: 32,
            ..ModelConfig::default()
        };
        let mut m = TransformerModel::build(&cfg, &LoraConfig::default(), Rng::new(4)).unwrap();
        let mut s = Rng::new(9).stream();
        for t in m.trainable_mut() {
            for v in t.data_mut() {
                *v = (s.normal() as f32) as f64;
            }
        }
        m.diacritic_flags[261] = true;
        m
    }

    #[test]
    fn model_round_trip() {
        let m = model();
        let b = model_to_bytes(&m, "abc").unwrap();
        let (mut back, h) = model_from_bytes(&b).unwrap();
        assert_eq!(h.vocab_hash, "abc");
        let ad = lora::from_bytes(&lora::to_bytes(&m).unwrap()).unwrap();
        lora::apply(&mut back, &ad).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn optimizer_round_trip() {
        let m = model();
        for kind in [OptimizerKind::AdamW8bit, OptimizerKind::AdamW32, OptimizerKind::Sgd] {
            let shapes: Vec<Vec<usize>> = m.trainable().iter().map(|t| t.shape().to_vec()).collect();
            let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
            let mut o = OptimizerState::new(kind, AdamWConfig::default(), &refs).unwrap();
            let mut params: Vec<Tensor> = m.trainable().into_iter().cloned().collect();
            let grads: Vec<Tensor> = params.iter().map(|p| p.cast(DType::Double)).collect();
            let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
            o.apply(&mut refs, &grads, 1e-3).unwrap();
            let back = optimizer_from_bytes(&optimizer_to_bytes(&o).unwrap()).unwrap();
            assert_eq!(back, o);
        }
    }

    #[test]
    fn truncated_model_is_rejected() {
        let b = model_to_bytes(&model(), "abc").unwrap();
        assert!(model_from_bytes(&b[..b.len() - 3]).is_err());
    }
}
