//! Tiny decoder-only transformer: tied embeddings, pre-norm blocks,
//! rotary attention with an optional diacritic logit bias, GELU MLP.
//!
//! Q/K/V/O projections are NF4 bases with LoRA adapters; the MLP weights
//! are frozen NF4 tensors without adapters.

use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::lora::{AdaptedLinear, LinearVars, LoraConfig, Target};
use crate::memory::{Category, MemoryLedger};
use crate::quant::{QuantConfig, QuantizedTensor};
use crate::rng::Rng;
use crate::tensor::{DType, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
    /// Additive attention-logit bias on diacritic-bearing keys.
    pub diacritic_bias: f64,
    pub rope_base: f64,
    pub quant: QuantConfig,
    /// Whether the (tied) embedding table is updated during training.
    pub train_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 512,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ffn: 256,
            max_seq_len: 128,
            diacritic_bias: 0.0,
            rope_base: 10_000.0,
            quant: QuantConfig::default(),
            train_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ffn == 0 {
            return bad(format!("model dimensions must be positive: {self:?}"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !(self.d_model / self.n_heads).is_multiple_of(2) {
            return bad(format!("head dimension {} must be even for rotary embeddings", self.d_model / self.n_heads));
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be at least 1".into());
        }
        if !self.diacritic_bias.is_finite() || !(self.rope_base > 0.0) {
            return bad("diacritic_bias must be finite and rope_base positive".into());
        }
        self.quant.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count, frozen and trainable together.
    pub fn param_count(&self, lora: &LoraConfig) -> usize {
        let (v, d, f) = (self.vocab_size, self.d_model, self.d_ffn);
        let adapters = lora.targets.len() * lora.rank * 2 * d;
        v * d + self.n_layers * (4 * d * d + 2 * d * f + 4 * d + adapters) + 2 * d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub q: AdaptedLinear,
    pub k: AdaptedLinear,
    pub v: AdaptedLinear,
    pub o: AdaptedLinear,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub up: AdaptedLinear,
    pub down: AdaptedLinear,
}

impl Block {
    pub fn projection(&self, t: Target) -> &AdaptedLinear {
        match t {
            Target::Q => &self.q,
            Target::K => &self.k,
            Target::V => &self.v,
            Target::O => &self.o,
        }
    }

    pub fn projection_mut(&mut self, t: Target) -> &mut AdaptedLinear {
        match t {
            Target::Q => &mut self.q,
            Target::K => &mut self.k,
            Target::V => &mut self.v,
            Target::O => &mut self.o,
        }
    }

    fn linears(&self) -> [&AdaptedLinear; 6] {
        [&self.q, &self.k, &self.v, &self.o, &self.up, &self.down]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    pub cfg: ModelConfig,
    pub lora: LoraConfig,
    /// `[vocab × d_model]`, also the output projection.
    pub embedding: Tensor,
    pub blocks: Vec<Block>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    /// Per vocabulary id: does the token carry a diacritic.
    pub diacritic_flags: Vec<bool>,
}

#[derive(Debug, Clone, Copy)]
struct BlockVars {
    ln1: (Var, Var),
    q: LinearVars,
    k: LinearVars,
    v: LinearVars,
    o: LinearVars,
    ln2: (Var, Var),
    up: LinearVars,
    down: LinearVars,
}

/// Model parameters placed on a tape.
#[derive(Debug, Clone)]
pub struct Bound {
    embedding: Var,
    blocks: Vec<BlockVars>,
    final_norm: (Var, Var),
    /// Handles in [`TransformerModel::trainable`] order.
    pub trainable: Vec<Var>,
}

/// How a loss/gradient evaluation runs.
#[derive(Debug, Clone)]
pub struct StepOptions {
    pub dtype: DType,
    pub train: bool,
    pub rng: Rng,
    pub checkpointing: bool,
    pub ledger: Option<Rc<RefCell<MemoryLedger>>>,
}

impl StepOptions {
    pub fn new(dtype: DType, rng: Rng) -> Self {
        StepOptions {
            dtype,
            train: true,
            rng,
            checkpointing: false,
            ledger: None,
        }
    }

    fn tape(&self) -> Tape {
        match &self.ledger {
            Some(l) => Tape::with_ledger(self.dtype, l.clone()),
            None => Tape::new(self.dtype),
        }
    }
}

fn normal_tensor(shape: &[usize], std: f64, rng: Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut s = rng.stream();
    Tensor::new(shape, DType::Full, (0..n).map(|_| std * s.normal()).collect()).expect("shape")
}

impl TransformerModel {
    pub fn build(cfg: &ModelConfig, lora: &LoraConfig, rng: Rng) -> Result<Self> {
        cfg.validate()?;
        lora.validate()?;
        let d = cfg.d_model;
        let quantized = |shape: &[usize], r: Rng| QuantizedTensor::quantize(&normal_tensor(shape, INIT_STD, r), &cfg.quant);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let r = rng.fork_str("layer").fork(l as u64);
            let proj = |t: Target| -> Result<AdaptedLinear> {
                let base = quantized(&[d, d], r.fork_str("weight").fork(t.code() as u64))?;
                if lora.targets(t) {
                    AdaptedLinear::attach(base, lora, r.fork_str("adapter").fork(t.code() as u64))
                } else {
                    Ok(AdaptedLinear::frozen(base))
                }
            };
            blocks.push(Block {
                ln1_gain: Tensor::full(&[d], DType::Full, 1.0),
                ln1_bias: Tensor::zeros(&[d], DType::Full),
                q: proj(Target::Q)?,
                k: proj(Target::K)?,
                v: proj(Target::V)?,
                o: proj(Target::O)?,
                ln2_gain: Tensor::full(&[d], DType::Full, 1.0),
                ln2_bias: Tensor::zeros(&[d], DType::Full),
                up: AdaptedLinear::frozen(quantized(&[cfg.d_ffn, d], r.fork_str("up"))?),
                down: AdaptedLinear::frozen(quantized(&[d, cfg.d_ffn], r.fork_str("down"))?),
            });
        }
        Ok(TransformerModel {
            cfg: cfg.clone(),
            lora: lora.clone(),
            embedding: normal_tensor(&[cfg.vocab_size, d], INIT_STD, rng.fork_str("embedding")),
            blocks,
            final_gain: Tensor::full(&[d], DType::Full, 1.0),
            final_bias: Tensor::zeros(&[d], DType::Full),
            diacritic_flags: vec![false; cfg.vocab_size],
        })
    }

    pub fn set_diacritic_flags(&mut self, flags: Vec<bool>) -> Result<()> {
        if flags.len() != self.cfg.vocab_size {
            return Err(Error::Config(format!(
                "diacritic mask has {} entries for a vocabulary of {}",
                flags.len(),
                self.cfg.vocab_size
            )));
        }
        self.diacritic_flags = flags;
        Ok(())
    }

    /// Every parameter, frozen ones included.
    pub fn param_count(&self) -> usize {
        let blocks: usize = self
            .blocks
            .iter()
            .map(|b| {
                b.linears().iter().map(|l| l.base.numel() + l.adapter_params()).sum::<usize>()
                    + b.ln1_gain.numel()
                    + b.ln1_bias.numel()
                    + b.ln2_gain.numel()
                    + b.ln2_bias.numel()
            })
            .sum();
        self.embedding.numel() + blocks + self.final_gain.numel() + self.final_bias.numel()
    }

    pub fn adapter_param_count(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| b.linears())
            .map(|l| l.adapter_params())
            .sum()
    }

    pub fn trainable_fraction(&self) -> f64 {
        self.adapter_param_count() as f64 / self.param_count() as f64
    }

    pub fn quantized_bytes(&self) -> u64 {
        self.blocks
            .iter()
            .flat_map(|b| b.linears())
            .map(|l| l.base.storage_bytes())
            .sum()
    }

    /// Base tensors in a fixed order: per layer Q, K, V, O, up, down.
    pub fn base_tensors(&self) -> Vec<&QuantizedTensor> {
        self.blocks.iter().flat_map(|b| b.linears()).map(|l| &l.base).collect()
    }

    /// Charges resident weights to `ledger`: NF4 bases and frozen
    /// full-precision tensors as quantized weights, trainable tensors as
    /// adapters.
    pub fn register(&self, ledger: &mut MemoryLedger) -> Result<()> {
        let f32_bytes = |n: usize| 4 * n as u64;
        let norms = self.blocks.len() * 4 * self.cfg.d_model + 2 * self.cfg.d_model;
        let mut frozen = self.quantized_bytes() + f32_bytes(norms);
        let mut trainable = f32_bytes(self.adapter_param_count());
        if self.cfg.train_embeddings {
            trainable += f32_bytes(self.embedding.numel());
        } else {
            frozen += f32_bytes(self.embedding.numel());
        }
        ledger.enforce(Category::QuantizedWeights, frozen)?;
        ledger.enforce(Category::Adapters, trainable)
    }

    /// Names of trainable tensors, aligned with [`Self::trainable`].
    pub fn trainable_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.cfg.train_embeddings {
            out.push("embedding".into());
        }
        for (l, b) in self.blocks.iter().enumerate() {
            for t in Target::ALL {
                if b.projection(t).adapter.is_some() {
                    out.push(format!("layers.{l}.{t:?}.A"));
                    out.push(format!("layers.{l}.{t:?}.B"));
                }
            }
        }
        out
    }

    pub fn trainable(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        if self.cfg.train_embeddings {
            out.push(&self.embedding);
        }
        for b in &self.blocks {
            for t in Target::ALL {
                if let Some(ad) = &b.projection(t).adapter {
                    out.push(&ad.a);
                    out.push(&ad.b);
                }
            }
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if self.cfg.train_embeddings {
            out.push(&mut self.embedding);
        }
        for b in &mut self.blocks {
            let [q, k, v, o] = [&mut b.q, &mut b.k, &mut b.v, &mut b.o];
            for lin in [q, k, v, o] {
                if let Some(ad) = &mut lin.adapter {
                    out.push(&mut ad.a);
                    out.push(&mut ad.b);
                }
            }
        }
        out
    }

    fn emb_slots(&self) -> usize {
        usize::from(self.cfg.train_embeddings)
    }

    /// Index of layer `l`'s first adapter tensor in trainable order.
    fn trainable_offset(&self, l: usize) -> usize {
        self.emb_slots()
            + self.blocks[..l]
                .iter()
                .map(|b| 2 * Target::ALL.iter().filter(|&&t| b.projection(t).adapter.is_some()).count())
                .sum::<usize>()
    }

    fn bind_embedding(&self, tape: &mut Tape, dtype: DType, trainable: bool, ov: Option<(usize, Var)>) -> Var {
        match ov {
            Some((0, v)) if self.cfg.train_embeddings => v,
            _ => tape.leaf(self.embedding.cast(dtype), trainable && self.cfg.train_embeddings),
        }
    }

    fn bind_block(
        &self,
        tape: &mut Tape,
        l: usize,
        dtype: DType,
        trainable: bool,
        ov: Option<(usize, Var)>,
        handles: &mut Vec<Var>,
    ) -> BlockVars {
        let b = &self.blocks[l];
        let mut slot = self.trainable_offset(l);
        let mut lin = |tape: &mut Tape, al: &AdaptedLinear, handles: &mut Vec<Var>| {
            let mut vars = al.bind(tape, dtype, trainable);
            if let (Some(a), Some(bb)) = (vars.a.as_mut(), vars.b.as_mut()) {
                for (var, s) in [(a, slot), (bb, slot + 1)] {
                    if let Some((i, o)) = ov {
                        if i == s {
                            *var = o;
                        }
                    }
                    handles.push(*var);
                }
                slot += 2;
            }
            vars
        };
        let ln1 = (tape.constant(b.ln1_gain.cast(dtype)), tape.constant(b.ln1_bias.cast(dtype)));
        let q = lin(tape, &b.q, handles);
        let k = lin(tape, &b.k, handles);
        let v = lin(tape, &b.v, handles);
        let o = lin(tape, &b.o, handles);
        let ln2 = (tape.constant(b.ln2_gain.cast(dtype)), tape.constant(b.ln2_bias.cast(dtype)));
        let up = b.up.bind(tape, dtype, false);
        let down = b.down.bind(tape, dtype, false);
        BlockVars { ln1, q, k, v, o, ln2, up, down }
    }

    /// Places all parameters on `tape`. With `trainable` set, embedding and
    /// adapter tensors become gradient-carrying leaves. `ov` substitutes the
    /// trainable tensor at the given index with an existing node.
    pub fn bind(&self, tape: &mut Tape, dtype: DType, trainable: bool, ov: Option<(usize, Var)>) -> Bound {
        let embedding = self.bind_embedding(tape, dtype, trainable, ov);
        let mut handles = Vec::new();
        if self.cfg.train_embeddings {
            handles.push(embedding);
        }
        let blocks = (0..self.blocks.len())
            .map(|l| self.bind_block(tape, l, dtype, trainable, ov, &mut handles))
            .collect();
        let final_norm = (tape.constant(self.final_gain.cast(dtype)), tape.constant(self.final_bias.cast(dtype)));
        Bound {
            embedding,
            blocks,
            final_norm,
            trainable: handles,
        }
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        if tokens.len() > self.cfg.max_seq_len {
            return Err(Error::Index {
                what: "sequence length",
                index: tokens.len(),
                bound: self.cfg.max_seq_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&id| id as usize >= self.cfg.vocab_size) {
            return Err(Error::Index {
                what: "token",
                index: id as usize,
                bound: self.cfg.vocab_size,
            });
        }
        Ok(())
    }

    /// Causal mask plus the diacritic bias on flagged keys.
    pub fn attention_mask(&self, tokens: &[u32]) -> Tensor {
        let t = tokens.len();
        let beta = self.cfg.diacritic_bias;
        let mut m = vec![0.0; t * t];
        for i in 0..t {
            for j in 0..t {
                m[i * t + j] = if j > i {
                    f64::NEG_INFINITY
                } else if beta != 0.0 && self.diacritic_flags[tokens[j] as usize] {
                    beta
                } else {
                    0.0
                };
            }
        }
        Tensor::from_vec(&[t, t], m).expect("mask shape")
    }

    fn attention(&self, tape: &mut Tape, q: Var, k: Var, v: Var, mask: &Tensor) -> Result<Var> {
        let dh = self.cfg.head_dim();
        let inv = 1.0 / libm::sqrt(dh as f64);
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let qh = tape.rope(qh, self.cfg.rope_base)?;
            let kh = tape.rope(kh, self.cfg.rope_base)?;
            let s = tape.matmul_bt(qh, kh)?;
            let s = tape.scale(s, inv);
            let s = tape.add_const(s, mask)?;
            let p = tape.softmax_rows(s)?;
            heads.push(tape.matmul(p, vh)?);
        }
        tape.concat_cols(&heads)
    }

    #[allow(clippy::too_many_arguments)]
    fn block_forward(
        &self,
        tape: &mut Tape,
        l: usize,
        bv: &BlockVars,
        x: Var,
        mask: &Tensor,
        train: bool,
        rng: Rng,
    ) -> Result<Var> {
        let b = &self.blocks[l];
        let rng = rng.fork(l as u64);
        let h = tape.layer_norm(x, bv.ln1.0, bv.ln1.1, LAYER_NORM_EPS)?;
        let q = b.q.apply(tape, &bv.q, h, train, rng.fork(0))?;
        let k = b.k.apply(tape, &bv.k, h, train, rng.fork(1))?;
        let v = b.v.apply(tape, &bv.v, h, train, rng.fork(2))?;
        let att = self.attention(tape, q, k, v, mask)?;
        let o = b.o.apply(tape, &bv.o, att, train, rng.fork(3))?;
        let x = tape.add(x, o)?;
        let h = tape.layer_norm(x, bv.ln2.0, bv.ln2.1, LAYER_NORM_EPS)?;
        let u = b.up.apply(tape, &bv.up, h, train, rng.fork(4))?;
        let u = tape.gelu(u);
        let dn = b.down.apply(tape, &bv.down, u, train, rng.fork(5))?;
        tape.add(x, dn)
    }

    fn head(&self, tape: &mut Tape, emb: Var, norm: (Var, Var), x: Var) -> Result<Var> {
        let h = tape.layer_norm(x, norm.0, norm.1, LAYER_NORM_EPS)?;
        tape.matmul_bt(h, emb)
    }

    /// Logits `[T × V]` on an existing tape.
    pub fn forward_on(&self, tape: &mut Tape, bound: &Bound, tokens: &[u32], train: bool, rng: Rng) -> Result<Var> {
        self.check_tokens(tokens)?;
        let mask = self.attention_mask(tokens);
        let mut x = tape.gather(bound.embedding, tokens)?;
        for (l, bv) in bound.blocks.iter().enumerate() {
            x = self.block_forward(tape, l, bv, x, &mask, train, rng)?;
        }
        self.head(tape, bound.embedding, bound.final_norm, x)
    }

    /// Mean next-token loss of `inputs` against `targets` on an existing tape.
    pub fn loss_on(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        inputs: &[u32],
        targets: &[u32],
        train: bool,
        rng: Rng,
    ) -> Result<Var> {
        if inputs.len() != targets.len() {
            return Err(Error::dims("loss", &[inputs.len()], &[targets.len()]));
        }
        let logits = self.forward_on(tape, bound, inputs, train, rng)?;
        tape.cross_entropy(logits, targets)
    }

    pub fn forward_dtype(&self, tokens: &[u32], dtype: DType) -> Result<Tensor> {
        let mut tape = Tape::new(dtype);
        let bound = self.bind(&mut tape, dtype, false, None);
        let y = self.forward_on(&mut tape, &bound, tokens, false, Rng::new(0))?;
        Ok(tape.value(y).clone())
    }

    /// Evaluation-mode logits in full precision.
    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor> {
        self.forward_dtype(tokens, DType::Full)
    }

    /// Training-mode logits; dropout draws from `rng`.
    pub fn forward_train(&self, tokens: &[u32], rng: Rng) -> Result<Tensor> {
        let mut tape = Tape::new(DType::Full);
        let bound = self.bind(&mut tape, DType::Full, false, None);
        let y = self.forward_on(&mut tape, &bound, tokens, true, rng)?;
        Ok(tape.value(y).clone())
    }

    /// Loss and gradients (double precision, [`Self::trainable`] order)
    /// for one sequence.
    pub fn loss_and_grads(&self, inputs: &[u32], targets: &[u32], opts: &StepOptions) -> Result<(f64, Vec<Tensor>)> {
        if opts.checkpointing {
            return self.loss_and_grads_checkpointed(inputs, targets, opts);
        }
        let mut tape = opts.tape();
        let bound = self.bind(&mut tape, opts.dtype, true, None);
        let loss = self.loss_on(&mut tape, &bound, inputs, targets, opts.train, opts.rng)?;
        tape.check_budget()?;
        tape.backward(loss)?;
        let grads = self.collect(&tape, &bound.trainable);
        Ok((tape.value(loss).data()[0], grads))
    }

    fn collect(&self, tape: &Tape, handles: &[Var]) -> Vec<Tensor> {
        handles
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape(), DType::Double))
            })
            .collect()
    }

    /// Same result as the plain path with only block-boundary activations
    /// kept alive; each block is re-run during the backward sweep.
    fn loss_and_grads_checkpointed(
        &self,
        inputs: &[u32],
        targets: &[u32],
        opts: &StepOptions,
    ) -> Result<(f64, Vec<Tensor>)> {
        if inputs.len() != targets.len() {
            return Err(Error::dims("loss", &[inputs.len()], &[targets.len()]));
        }
        self.check_tokens(inputs)?;
        let dtype = opts.dtype;
        let mask = self.attention_mask(inputs);
        let n_layers = self.blocks.len();
        let charge = |t: &Tensor| -> Result<u64> {
            let bytes = (t.numel() * t.dtype().size_bytes()) as u64;
            if let Some(l) = &opts.ledger {
                l.borrow_mut().enforce(Category::Activations, bytes)?;
            }
            Ok(bytes)
        };
        let mut held = 0u64;
        let result = (|| {
            let mut bounds = Vec::with_capacity(n_layers + 1);
            {
                let mut tape = opts.tape();
                let emb = self.bind_embedding(&mut tape, dtype, false, None);
                let x0 = tape.gather(emb, inputs)?;
                tape.check_budget()?;
                bounds.push(tape.value(x0).clone());
                held += charge(&bounds[0])?;
            }
            for l in 0..n_layers {
                let mut tape = opts.tape();
                let bv = self.bind_block(&mut tape, l, dtype, false, None, &mut Vec::new());
                let x = tape.constant(bounds[l].clone());
                let out = self.block_forward(&mut tape, l, &bv, x, &mask, opts.train, opts.rng)?;
                tape.check_budget()?;
                bounds.push(tape.value(out).clone());
                held += charge(&bounds[l + 1])?;
            }

            let mut grads: Vec<Option<Tensor>> = vec![None; self.trainable().len()];
            let (loss, mut seed, emb_head) = {
                let mut tape = opts.tape();
                let x = tape.leaf(bounds[n_layers].clone(), true);
                let emb = self.bind_embedding(&mut tape, dtype, true, None);
                let norm = (tape.constant(self.final_gain.cast(dtype)), tape.constant(self.final_bias.cast(dtype)));
                let logits = self.head(&mut tape, emb, norm, x)?;
                let loss = tape.cross_entropy(logits, targets)?;
                tape.check_budget()?;
                tape.backward(loss)?;
                let g = tape.grad(x).expect("head input grad");
                let ge = if self.cfg.train_embeddings { tape.grad(emb) } else { None };
                (tape.value(loss).data()[0], g, ge)
            };
            for l in (0..n_layers).rev() {
                let mut tape = opts.tape();
                let mut handles = Vec::new();
                let bv = self.bind_block(&mut tape, l, dtype, true, None, &mut handles);
                let x = tape.leaf(bounds[l].clone(), true);
                let out = self.block_forward(&mut tape, l, &bv, x, &mask, opts.train, opts.rng)?;
                tape.check_budget()?;
                tape.backward_from(out, seed.data())?;
                let off = self.trainable_offset(l);
                for (i, g) in self.collect(&tape, &handles).into_iter().enumerate() {
                    grads[off + i] = Some(g);
                }
                seed = tape.grad(x).expect("block input grad");
            }
            if self.cfg.train_embeddings {
                let mut tape = opts.tape();
                let emb = self.bind_embedding(&mut tape, dtype, true, None);
                let x0 = tape.gather(emb, inputs)?;
                tape.backward_from(x0, seed.data())?;
                let mut total = emb_head.expect("embedding grad from head");
                let g = tape.grad(emb).expect("embedding grad from gather");
                total.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                grads[0] = Some(total);
            }
            Ok((loss, grads.into_iter().map(|g| g.expect("every trainable tensor visited")).collect()))
        })();
        if let Some(l) = &opts.ledger {
            l.borrow_mut().release(Category::Activations, held);
        }
        result
    }

    /// Overwrites embedding rows for tokens found in `vectors`. Returns the
    /// number of distinct rows written. Nothing changes on error.
    pub fn init_embeddings_from_vectors<'a, I, F>(&mut self, vectors: I, lookup: F) -> Result<usize>
    where
        I: IntoIterator<Item = (&'a str, &'a [f64])>,
        F: Fn(&str) -> Option<u32>,
    {
        let d = self.cfg.d_model;
        let mut updates = Vec::new();
        for (token, vec) in vectors {
            if vec.len() != d {
                return Err(Error::Config(format!(
                    "word vector for {token:?} has dimension {}, model expects {d}",
                    vec.len()
                )));
            }
            if let Some(id) = lookup(token) {
                if (id as usize) < self.cfg.vocab_size {
                    updates.push((id as usize, vec));
                }
            }
        }
        let mut seen = vec![false; self.cfg.vocab_size];
        let mut count = 0;
        let dtype = self.embedding.dtype();
        let data = self.embedding.data_mut();
        for (id, vec) in updates {
            for (dst, &src) in data[id * d..(id + 1) * d].iter_mut().zip(vec) {
                *dst = dtype.round(src);
            }
            if !seen[id] {
                seen[id] = true;
                count += 1;
            }
        }
        Ok(count)
    }
}
