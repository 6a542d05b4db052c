use std::path::Path;

use serde_json::{json, Value};

use crate::error::{CliError, Result};
use crate::format::binio::Reader;
use crate::format::checkpoint::{self, ADAPTER_FILE, MODEL_FILE, OPTIMIZER_FILE, STATE_FILE};
use crate::format::shards::{ShardView, MANIFEST_FILE};
use crate::format::{lora, qnf4};
use crate::fsutil;

fn shard(b: &[u8]) -> nahw_core::Result<Value> {
    let v = ShardView::parse(b)?;
    let lens: Vec<usize> = (0..v.len()).map(|i| v.raw(i).len() / 4).collect();
    Ok(json!({
        "format": "SHRD",
        "docs": v.len(),
        "tokens": lens.iter().sum::<usize>(),
        "doc_lengths": lens,
    }))
}

fn model(b: &[u8]) -> nahw_core::Result<Value> {
    let (m, h) = checkpoint::model_from_bytes(b)?;
    let tensors: Vec<Value> = m
        .base_tensors()
        .iter()
        .map(|q| {
            json!({
                "shape": q.shape(),
                "block_size": q.block_size(),
                "double_quant": q.double_quant().is_some(),
            })
        })
        .collect();
    Ok(json!({
        "format": "NMDL",
        "header": h,
        "params": m.param_count(),
        "quantized_bytes": m.quantized_bytes(),
        "base_tensors": tensors,
    }))
}

fn adapters(b: &[u8]) -> nahw_core::Result<Value> {
    let f = lora::from_bytes(b)?;
    let layers: Vec<Value> = f
        .layers
        .iter()
        .map(|l| {
            l.iter()
                .map(|(t, a)| json!({"target": t, "a": a.a.shape(), "b": a.b.shape()}))
                .collect()
        })
        .collect();
    Ok(json!({"format": "LORA", "config": f.lora, "scaling": f.lora.scaling(), "layers": layers}))
}

fn optimizer(b: &[u8]) -> nahw_core::Result<Value> {
    let o = checkpoint::optimizer_from_bytes(b)?;
    Ok(json!({
        "format": "OST8",
        "kind": o.kind,
        "step": o.step,
        "adam": o.cfg,
        "tensors": o.moments.len(),
        "state_bytes": o.state_bytes(),
    }))
}

fn qnf4_record(b: &[u8]) -> nahw_core::Result<Value> {
    let h = qnf4::read_header(&mut Reader::new(b, "QNF4"))?;
    qnf4::from_bytes(b)?;
    Ok(json!({"format": "QNF4", "header": h}))
}

fn file(path: &Path) -> Result<Value> {
    let b = fsutil::read_bytes(path)?;
    let parsed = match b.get(..4) {
        Some(b"SHRD") => shard(&b),
        Some(b"NMDL") => model(&b),
        Some(b"LORA") => adapters(&b),
        Some(b"OST8") => optimizer(&b),
        Some(b"QNF4") => qnf4_record(&b),
        _ => {
            return serde_json::from_slice(&b)
                .map_err(|_| CliError::data(path, "not a shard, checkpoint file or JSON document"))
        }
    };
    parsed.map_err(|e| CliError::data(path, e))
}

/// Headers of a shard directory, checkpoint directory or single file.
pub fn run(path: &Path) -> Result<Value> {
    if !path.is_dir() {
        return file(path);
    }
    if path.join(MANIFEST_FILE).exists() {
        let mut m = file(&path.join(MANIFEST_FILE))?;
        if let Some(o) = m.as_object_mut() {
            o.remove("docs");
        }
        return Ok(json!({"kind": "shards", "manifest": m}));
    }
    if path.join(MODEL_FILE).exists() {
        let mut out = serde_json::Map::new();
        out.insert("kind".into(), json!("checkpoint"));
        out.insert("model_hash".into(), json!(checkpoint::hash(path)?));
        for name in [MODEL_FILE, ADAPTER_FILE, OPTIMIZER_FILE, STATE_FILE] {
            let p = path.join(name);
            if p.exists() {
                out.insert(name.into(), file(&p)?);
            }
        }
        return Ok(Value::Object(out));
    }
    Err(CliError::data(path, "directory holds neither a manifest nor a checkpoint"))
}
