//! `LORA` adapter checkpoints.
//!
//! ```text
//! "LORA" | version u16 | rank u32 | alpha f64 | dropout f64 | unscaled u8
//! n_targets u8 | target codes u8×n | n_layers u32
//! per layer, per target: d_out u32 | d_in u32 | A f32×(r·d_in) | B f32×(d_out·r)
//! ```

use nahw_core::lora::{LoraAdapter, LoraConfig, Target};
use nahw_core::model::TransformerModel;
use nahw_core::{DType, Error, Result, Tensor};

use super::binio::{Reader, Writer};

pub const MAGIC: &[u8; 4] = b"LORA";
pub const VERSION: u16 = 1;

fn declared(cfg: &LoraConfig) -> Vec<Target> {
    Target::ALL.into_iter().filter(|&t| cfg.targets(t)).collect()
}

pub fn to_bytes(model: &TransformerModel) -> Result<Vec<u8>> {
    let cfg = &model.lora;
    let targets = declared(cfg);
    let mut w = Writer::new();
    w.bytes(MAGIC).u16(VERSION).u32_len(cfg.rank)?;
    w.f64(cfg.alpha).f64(cfg.dropout).u8(cfg.unscaled as u8);
    w.u8(targets.len() as u8);
    for t in &targets {
        w.u8(t.code());
    }
    w.u32_len(model.blocks.len())?;
    for b in &model.blocks {
        for &t in &targets {
            let lin = b.projection(t);
            let ad = lin
                .adapter
                .as_ref()
                .ok_or_else(|| Error::Contract(format!("declared target {t:?} has no adapter")))?;
            w.u32_len(lin.d_out())?.u32_len(lin.d_in())?;
            w.f32s_of(ad.a.data()).f32s_of(ad.b.data());
        }
    }
    Ok(w.buf)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterFile {
    pub lora: LoraConfig,
    /// Per layer, adapters in declared target order.
    pub layers: Vec<Vec<(Target, LoraAdapter)>>,
}

pub fn read_config(r: &mut Reader) -> Result<(LoraConfig, usize)> {
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let rank = r.u32()? as usize;
    let alpha = r.f64()?;
    let dropout = r.f64()?;
    let unscaled = r.u8()? != 0;
    let n = r.u8()? as usize;
    let targets = (0..n)
        .map(|_| {
            let c = r.u8()?;
            Target::from_code(c).ok_or_else(|| Error::Format(format!("LORA: unknown target code {c}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let lora = LoraConfig {
        rank,
        alpha,
        dropout,
        targets,
        unscaled,
    };
    lora.validate()?;
    Ok((lora, r.u32()? as usize))
}

pub fn from_bytes(b: &[u8]) -> Result<AdapterFile> {
    let mut r = Reader::new(b, "LORA");
    let (lora, n_layers) = read_config(&mut r)?;
    let targets = lora.targets.clone();
    let mut layers = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        let mut layer = Vec::with_capacity(targets.len());
        for &t in &targets {
            let d_out = r.u32()? as usize;
            let d_in = r.u32()? as usize;
            let a = Tensor::new(&[lora.rank, d_in], DType::Full, r.f32s_wide(lora.rank * d_in)?)?;
            let b = Tensor::new(&[d_out, lora.rank], DType::Full, r.f32s_wide(d_out * lora.rank)?)?;
            layer.push((
                t,
                LoraAdapter {
                    a,
                    b,
                    scaling: lora.scaling(),
                },
            ));
        }
        layers.push(layer);
    }
    r.finish()?;
    Ok(AdapterFile { lora, layers })
}

/// Replaces the model's adapters with those of `file`. The rank, scaling
/// and targets must match the model's adapter configuration.
pub fn apply(model: &mut TransformerModel, file: &AdapterFile) -> Result<()> {
    let mine = &model.lora;
    if declared(mine) != file.lora.targets || mine.rank != file.lora.rank || mine.scaling() != file.lora.scaling() {
        return Err(Error::Config(format!(
            "adapter file (rank {}, scaling {}, targets {:?}) does not match the model (rank {}, scaling {}, targets {:?})",
            file.lora.rank,
            file.lora.scaling(),
            file.lora.targets,
            mine.rank,
            mine.scaling(),
            declared(mine)
        )));
    }
    if file.layers.len() != model.blocks.len() {
        return Err(Error::Config(format!(
            "adapter file has {} layers, model has {}",
            file.layers.len(),
            model.blocks.len()
        )));
    }
    for (b, layer) in model.blocks.iter_mut().zip(&file.layers) {
        for (t, ad) in layer {
            let lin = b.projection_mut(*t);
            let want = [lin.d_out(), lin.d_in()];
            if [ad.b.shape()[0], ad.a.shape()[1]] != want {
                return Err(Error::dims("adapter", &want, &[ad.b.shape()[0], ad.a.shape()[1]]));
            }
            lin.adapter = Some(ad.clone());
        }
    }
    Ok(())
}
