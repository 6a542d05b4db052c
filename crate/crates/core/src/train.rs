//! Training loop: packed data, gradient accumulation, clipping, AdamW
//! with 8-bit states, optional recomputation, and the memory ledger.

use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec::Vec;
use core::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{Category, MemoryBudget, MemoryLedger};
use crate::model::{StepOptions, TransformerModel};
use crate::optim::{AdamWConfig, OptimizerKind, OptimizerState};
use crate::rng::Rng;
use crate::schedule::{effective_batch, lr_at};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    /// 32-bit activations.
    Full,
    /// 16-bit activations, 32-bit master weights.
    Mixed,
    /// 64-bit everything; for equivalence and gradient checks.
    Double,
}

impl Precision {
    pub fn activation_dtype(self) -> DType {
        match self {
            Precision::Full => DType::Full,
            Precision::Mixed => DType::Reduced,
            Precision::Double => DType::Double,
        }
    }

    pub fn master_dtype(self) -> DType {
        match self {
            Precision::Double => DType::Double,
            _ => DType::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub micro_batch: usize,
    pub accumulation_steps: usize,
    pub lr_max: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub max_grad_norm: f64,
    pub seq_len: usize,
    pub seed: u64,
    pub precision: Precision,
    pub checkpointing: bool,
    pub budgets: MemoryBudget,
    pub optimizer: OptimizerKind,
    pub adam: AdamWConfig,
    pub checkpoint_every: u64,
    pub keep_checkpoints: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            micro_batch: 1,
            accumulation_steps: 16,
            lr_max: 5e-5,
            warmup_steps: 100,
            total_steps: 10_000,
            max_grad_norm: 0.3,
            seq_len: 64,
            seed: 0,
            precision: Precision::Full,
            checkpointing: false,
            budgets: MemoryBudget::default(),
            optimizer: OptimizerKind::AdamW8bit,
            adam: AdamWConfig::default(),
            checkpoint_every: 1000,
            keep_checkpoints: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0 < self.warmup_steps && self.warmup_steps < self.total_steps) {
            return fail(format!(
                "need 0 < warmup_steps ({}) < total_steps ({})",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.lr_max > 0.0) || !(self.max_grad_norm > 0.0) {
            return fail("lr_max and max_grad_norm must be positive".into());
        }
        if self.micro_batch == 0 || self.accumulation_steps == 0 || self.seq_len == 0 {
            return fail("micro_batch, accumulation_steps and seq_len must be positive".into());
        }
        if self.checkpoint_every == 0 || self.keep_checkpoints == 0 {
            return fail("checkpoint_every and keep_checkpoints must be positive".into());
        }
        self.adam.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub device_hw_bytes: u64,
    pub host_hw_bytes: u64,
    pub wall_ms: u64,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str = "step,loss,lr,grad_norm,device_hw_bytes,host_hw_bytes,wall_ms";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.loss, self.lr, self.grad_norm, self.device_hw_bytes, self.host_hw_bytes, self.wall_ms
        )
    }
}

/// Largest magnitude and the root sum of squares after dividing by it,
/// so that `norm = max · rss` never overflows in between.
fn scaled_norm(grads: &[Tensor]) -> (f64, f64) {
    let m = grads
        .iter()
        .flat_map(|g| g.data())
        .fold(0.0f64, |a, &x| a.max(libm::fabs(x)));
    if m == 0.0 || !m.is_finite() {
        return (m, 1.0);
    }
    let s: f64 = grads.iter().flat_map(|g| g.data()).map(|&x| (x / m) * (x / m)).sum();
    (m, libm::sqrt(s))
}

/// Overflow-safe global L2 norm over all tensors.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    let (m, rss) = scaled_norm(grads);
    m * rss
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the factor applied (1 when untouched).
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64, step: u64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::Config(format!("max_grad_norm {max_norm} must be positive")));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(j) = g.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::Training {
                step,
                reason: format!("non-finite gradient in tensor {i} at element {j}"),
            });
        }
    }
    let (m, rss) = scaled_norm(grads);
    if m * rss <= max_norm {
        return Ok(1.0);
    }
    let per_unit = max_norm / rss;
    for g in grads.iter_mut() {
        g.data_mut().iter_mut().for_each(|x| *x = (*x / m) * per_unit);
    }
    Ok(per_unit / m)
}

/// Documents packed into fixed-length windows. Each epoch shuffles the
/// document order with the run seed and joins documents with a separator.
#[derive(Debug, Clone)]
pub struct PackedDataset {
    docs: Vec<Vec<u32>>,
    seq_len: usize,
    sep: u32,
    seed: u64,
    n_windows: usize,
    cached: Option<(u64, Vec<u32>)>,
}

impl PackedDataset {
    pub fn new(docs: Vec<Vec<u32>>, seq_len: usize, sep: u32, seed: u64) -> Result<Self> {
        let docs: Vec<Vec<u32>> = docs.into_iter().filter(|d| !d.is_empty()).collect();
        let stream_len: usize = docs.iter().map(|d| d.len() + 1).sum();
        if seq_len == 0 || stream_len < seq_len + 1 {
            return Err(Error::Contract(format!(
                "{stream_len} packed tokens cannot fill one window of {}",
                seq_len + 1
            )));
        }
        Ok(PackedDataset {
            docs,
            seq_len,
            sep,
            seed,
            n_windows: (stream_len - 1) / seq_len,
            cached: None,
        })
    }

    pub fn n_windows(&self) -> usize {
        self.n_windows
    }

    pub fn n_tokens(&self) -> usize {
        self.docs.iter().map(Vec::len).sum()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn stream(&self, epoch: u64) -> Vec<u32> {
        let mut order: Vec<usize> = (0..self.docs.len()).collect();
        Rng::new(self.seed).fork_str("epoch").fork(epoch).stream().shuffle(&mut order);
        let mut out = Vec::new();
        for i in order {
            out.extend_from_slice(&self.docs[i]);
            out.push(self.sep);
        }
        out
    }

    /// Window `idx` across the infinite sequence of epochs, as
    /// `(inputs, targets)` shifted by one token.
    pub fn window(&mut self, idx: u64) -> (Vec<u32>, Vec<u32>) {
        let epoch = idx / self.n_windows as u64;
        let w = (idx % self.n_windows as u64) as usize;
        if self.cached.as_ref().map(|c| c.0) != Some(epoch) {
            self.cached = Some((epoch, self.stream(epoch)));
        }
        let s = &self.cached.as_ref().unwrap().1;
        let win = &s[w * self.seq_len..w * self.seq_len + self.seq_len + 1];
        (win[..self.seq_len].to_vec(), win[1..].to_vec())
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: TransformerModel,
    pub optimizer: OptimizerState,
    pub ledger: Rc<RefCell<MemoryLedger>>,
    pub step: u64,
    data: PackedDataset,
}

impl Trainer {
    pub fn new(model: TransformerModel, data: PackedDataset, cfg: TrainConfig) -> Result<Self> {
        let shapes: Vec<Vec<usize>> = model.trainable().iter().map(|t| t.shape().to_vec()).collect();
        let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        let optimizer = OptimizerState::new(cfg.optimizer, cfg.adam, &shape_refs)?;
        Self::resume(model, data, cfg, optimizer, 0)
    }

    /// Continues a run from saved model, optimizer state and step.
    pub fn resume(
        mut model: TransformerModel,
        data: PackedDataset,
        cfg: TrainConfig,
        optimizer: OptimizerState,
        step: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.seq_len > model.cfg.max_seq_len || data.seq_len() != cfg.seq_len {
            return Err(Error::Config(format!(
                "seq_len {} must match the dataset ({}) and fit max_seq_len {}",
                cfg.seq_len,
                data.seq_len(),
                model.cfg.max_seq_len
            )));
        }
        if optimizer.moments.len() != model.trainable().len() || optimizer.kind != cfg.optimizer {
            return Err(Error::Config("optimizer state does not match the model's trainable tensors".into()));
        }
        if step > cfg.total_steps {
            return Err(Error::Config(format!("resume step {step} beyond total_steps {}", cfg.total_steps)));
        }
        let master = cfg.precision.master_dtype();
        for p in model.trainable_mut() {
            *p = p.cast(master);
        }
        let ledger = Rc::new(RefCell::new(MemoryLedger::new(cfg.budgets)));
        {
            let mut l = ledger.borrow_mut();
            model.register(&mut l)?;
            l.enforce(Category::Other, 4 * data.n_tokens() as u64)?;
            l.enforce(Category::OptimizerStates, optimizer.state_bytes())?;
        }
        Ok(Trainer {
            cfg,
            model,
            optimizer,
            ledger,
            step,
            data,
        })
    }

    pub fn effective_batch(&self) -> usize {
        effective_batch(&self.cfg)
    }

    /// One macro-step: `accumulation_steps` micro-batches, averaged,
    /// clipped, then one optimizer update.
    pub fn train_step(&mut self) -> Result<MetricsRecord> {
        let t = self.step + 1;
        let lr = lr_at(t, &self.cfg)?;
        let eff = self.effective_batch() as u64;
        let (b, n) = (self.cfg.micro_batch, self.cfg.accumulation_steps);
        let mut opts = StepOptions::new(self.cfg.precision.activation_dtype(), Rng::new(0));
        opts.checkpointing = self.cfg.checkpointing;
        opts.ledger = Some(self.ledger.clone());
        let dropout = Rng::new(self.cfg.seed).fork_str("dropout");

        let mut acc: Vec<Tensor> = self
            .model
            .trainable()
            .iter()
            .map(|p| Tensor::zeros(p.shape(), DType::Double))
            .collect();
        let mut loss_sum = 0.0;
        for micro in 0..n {
            let windows: Vec<(Vec<u32>, Vec<u32>)> = (0..b)
                .map(|i| self.data.window((t - 1) * eff + (micro * b + i) as u64))
                .collect();
            let total_len: usize = windows.iter().map(|w| w.0.len()).sum();
            for (i, (inp, tgt)) in windows.iter().enumerate() {
                opts.rng = dropout.fork((t - 1) * eff + (micro * b + i) as u64);
                let (loss, grads) = self.model.loss_and_grads(inp, tgt, &opts)?;
                if !loss.is_finite() {
                    return Err(Error::Training {
                        step: t,
                        reason: format!("non-finite loss {loss}"),
                    });
                }
                loss_sum += loss;
                let w = inp.len() as f64 / total_len as f64;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += w * y);
                }
            }
        }
        for a in &mut acc {
            a.data_mut().iter_mut().for_each(|x| *x /= n as f64);
        }
        let grad_norm = global_norm(&acc);
        clip_gradients(&mut acc, self.cfg.max_grad_norm, t)?;
        self.optimizer.apply(&mut self.model.trainable_mut(), &acc, lr)?;
        self.step = t;
        let l = self.ledger.borrow();
        Ok(MetricsRecord {
            step: t,
            loss: loss_sum / eff as f64,
            lr,
            grad_norm,
            device_hw_bytes: l.device_high_water(),
            host_hw_bytes: l.host_high_water(),
            wall_ms: 0,
        })
    }

    /// Runs until `total_steps`, calling `on_step` after every macro-step.
    pub fn run<F>(&mut self, mut on_step: F) -> Result<Vec<MetricsRecord>>
    where
        F: FnMut(&Trainer, &MetricsRecord) -> Result<()>,
    {
        let mut out = Vec::new();
        while self.step < self.cfg.total_steps {
            let rec = self.train_step()?;
            on_step(self, &rec)?;
            out.push(rec);
        }
        Ok(out)
    }
}
