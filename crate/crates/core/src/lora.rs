//! Low-rank adapters over frozen NF4 linear layers.
//!
//! `y = dequant(W)·x + s·B·(A·dropout(x)) + bias` with `s = alpha / r`
//! (or `s = 1` when `unscaled` is set). `A` starts as `N(0, 1/r)` and
//! `B` as zeros, so a fresh adapter leaves every output unchanged.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::quant::QuantizedTensor;
use crate::rng::Rng;
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Target {
    Q,
    K,
    V,
    O,
}

impl Target {
    pub const ALL: [Target; 4] = [Target::Q, Target::K, Target::V, Target::O];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Target> {
        Target::ALL.get(c as usize).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: Vec<Target>,
    /// Drop the `alpha / r` factor and add `B·A` unscaled.
    pub unscaled: bool,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 32.0,
            dropout: 0.05,
            targets: Target::ALL.to_vec(),
            unscaled: false,
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        if self.unscaled {
            1.0
        } else {
            self.alpha / self.rank as f64
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("LoRA alpha {} must be positive", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("LoRA dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn targets(&self, t: Target) -> bool {
        self.targets.contains(&t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// `[r × d_in]`
    pub a: Tensor,
    /// `[d_out × r]`
    pub b: Tensor,
    pub scaling: f64,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// `scaling · B · A`, `[d_out × d_in]`.
    pub fn delta(&self) -> Tensor {
        let ba = self.b.cast(DType::Double).matmul(&self.a.cast(DType::Double)).expect("adapter dims");
        let data = ba.data().iter().map(|v| v * self.scaling).collect();
        Tensor::from_vec(ba.shape(), data).expect("delta shape")
    }
}

/// Tape handles for one layer's operands.
#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub a: Option<Var>,
    pub b: Option<Var>,
    pub bias: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedLinear {
    pub base: QuantizedTensor,
    pub adapter: Option<LoraAdapter>,
    pub bias: Option<Tensor>,
    pub dropout: f64,
}

impl AdaptedLinear {
    /// Wraps a frozen weight with no adapter.
    pub fn frozen(base: QuantizedTensor) -> Self {
        AdaptedLinear {
            base,
            adapter: None,
            bias: None,
            dropout: 0.0,
        }
    }

    /// Attaches a fresh adapter: `A ~ N(0, 1/r)`, `B = 0`.
    pub fn attach(base: QuantizedTensor, cfg: &LoraConfig, rng: Rng) -> Result<Self> {
        cfg.validate()?;
        let (d_out, d_in) = dims(&base)?;
        let r = cfg.rank;
        if r > d_in.min(d_out) {
            return Err(Error::Config(format!(
                "LoRA rank {r} exceeds min(d_in={d_in}, d_out={d_out})"
            )));
        }
        let std = 1.0 / libm::sqrt(r as f64);
        let mut s = rng.stream();
        let a = Tensor::new(&[r, d_in], DType::Full, (0..r * d_in).map(|_| std * s.normal()).collect())?;
        let b = Tensor::zeros(&[d_out, r], DType::Full);
        Ok(AdaptedLinear {
            base,
            adapter: Some(LoraAdapter {
                a,
                b,
                scaling: cfg.scaling(),
            }),
            bias: None,
            dropout: cfg.dropout,
        })
    }

    pub fn d_in(&self) -> usize {
        self.base.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.base.shape()[0]
    }

    /// Puts operands on the tape. The dequantized weight is a constant;
    /// adapter matrices are trainable leaves when `trainable` is set.
    pub fn bind(&self, tape: &mut Tape, dtype: DType, trainable: bool) -> LinearVars {
        let weight = tape.constant(self.base.dequantize(dtype));
        let (a, b) = match &self.adapter {
            Some(ad) => (
                Some(tape.leaf(ad.a.cast(dtype), trainable)),
                Some(tape.leaf(ad.b.cast(dtype), trainable)),
            ),
            None => (None, None),
        };
        let bias = self.bias.as_ref().map(|t| tape.constant(t.cast(dtype)));
        LinearVars { weight, a, b, bias }
    }

    /// `x[T × d_in] → [T × d_out]`. Dropout touches the adapter input only.
    pub fn apply(&self, tape: &mut Tape, vars: &LinearVars, x: Var, train: bool, rng: Rng) -> Result<Var> {
        let d_in = self.d_in();
        let (_, cols) = tape.value(x).dims2()?;
        if cols != d_in {
            return Err(Error::dims("adapted_linear", tape.value(x).shape(), self.base.shape()));
        }
        let mut y = tape.matmul_bt(x, vars.weight)?;
        if let (Some(ad), Some(a), Some(b)) = (&self.adapter, vars.a, vars.b) {
            let xd = tape.dropout(x, self.dropout, rng, train)?;
            let ax = tape.matmul_bt(xd, a)?;
            let bax = tape.matmul_bt(ax, b)?;
            let branch = tape.scale(bax, ad.scaling);
            y = tape.add(y, branch)?;
        }
        if let Some(bias) = vars.bias {
            y = tape.add_row(y, bias)?;
        }
        Ok(y)
    }

    /// Standalone forward on a fresh tape.
    pub fn forward(&self, x: &Tensor, train: bool, rng: Rng) -> Result<Tensor> {
        let dtype = x.dtype();
        let mut tape = Tape::new(dtype);
        let vars = self.bind(&mut tape, dtype, false);
        let xv = tape.constant(x.clone());
        let y = self.apply(&mut tape, &vars, xv, train, rng)?;
        Ok(tape.value(y).clone())
    }

    /// Dense `W' = dequant(W) + s·B·A` in double precision.
    pub fn merge(&self) -> Tensor {
        let mut w = self.base.dequantize(DType::Double);
        if let Some(ad) = &self.adapter {
            let delta = ad.delta();
            w.data_mut().iter_mut().zip(delta.data()).for_each(|(a, b)| *a += b);
        }
        w
    }

    pub fn adapter_params(&self) -> usize {
        self.adapter.as_ref().map_or(0, |a| a.param_count())
    }
}

fn dims(q: &QuantizedTensor) -> Result<(usize, usize)> {
    match q.shape() {
        [o, i] => Ok((*o, *i)),
        s => Err(Error::Contract(format!("linear weight must be rank 2, got {s:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::QuantConfig;
    use alloc::vec;

    fn quantized(d_out: usize, d_in: usize, seed: u64) -> QuantizedTensor {
        let mut s = Rng::new(seed).stream();
        let w = Tensor::new(&[d_out, d_in], DType::Full, (0..d_out * d_in).map(|_| 0.02 * s.normal()).collect()).unwrap();
        QuantizedTensor::quantize(&w, &QuantConfig::default()).unwrap()
    }

    fn probe(t: usize, d: usize, seed: u64) -> Tensor {
        let mut s = Rng::new(seed).stream();
        Tensor::new(&[t, d], DType::Full, (0..t * d).map(|_| s.normal()).collect()).unwrap()
    }

    #[test]
    fn default_scaling() {
        assert_eq!(LoraConfig::default().scaling(), 4.0);
        let lit = LoraConfig {
            unscaled: true,
            ..LoraConfig::default()
        };
        assert_eq!(lit.scaling(), 1.0);
    }

    #[test]
    fn rank_too_large() {
        let cfg = LoraConfig {
            rank: 9,
            ..LoraConfig::default()
        };
        assert!(matches!(
            AdaptedLinear::attach(quantized(8, 16, 1), &cfg, Rng::new(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fresh_adapter_is_identity() {
        let base = quantized(24, 16, 2);
        let layer = AdaptedLinear::attach(base.clone(), &LoraConfig::default(), Rng::new(3)).unwrap();
        let plain = AdaptedLinear::frozen(base.clone());
        for seed in 0..10 {
            let x = probe(5, 16, seed);
            let y = layer.forward(&x, false, Rng::new(seed)).unwrap();
            let y0 = plain.forward(&x, false, Rng::new(seed)).unwrap();
            assert_eq!(y, y0);
            let reference = x.matmul(&base.dequantize(DType::Full).transpose2().unwrap()).unwrap();
            assert_eq!(y.data(), reference.data());
        }
    }

    #[test]
    fn scalar_case() {
        let w = QuantizedTensor::quantize(
            &Tensor::new(&[1, 1], DType::Full, vec![2.0]).unwrap(),
            &QuantConfig {
                double_quant: false,
                ..QuantConfig::default()
            },
        )
        .unwrap();
        let layer = AdaptedLinear {
            base: w,
            adapter: Some(LoraAdapter {
                a: Tensor::new(&[1, 1], DType::Full, vec![3.0]).unwrap(),
                b: Tensor::new(&[1, 1], DType::Full, vec![4.0]).unwrap(),
                scaling: 4.0,
            }),
            bias: None,
            dropout: 0.05,
        };
        let x = Tensor::new(&[1, 1], DType::Full, vec![5.0]).unwrap();
        assert_eq!(layer.forward(&x, false, Rng::new(0)).unwrap().data(), &[250.0]);
        assert_eq!(layer.merge().data(), &[50.0]);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut layer = AdaptedLinear::attach(quantized(16, 16, 4), &LoraConfig::default(), Rng::new(5)).unwrap();
        layer.adapter.as_mut().unwrap().b = probe(16, 8, 6);
        let x = probe(3, 16, 7);
        let a = layer.forward(&x, false, Rng::new(1)).unwrap();
        let b = layer.forward(&x, false, Rng::new(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn merge_of_fresh_adapter_is_base() {
        let base = quantized(16, 32, 8);
        let layer = AdaptedLinear::attach(base.clone(), &LoraConfig::default(), Rng::new(9)).unwrap();
        assert_eq!(layer.merge(), base.dequantize(DType::Double));
    }

    #[test]
    fn merged_matches_adapted() {
        let mut layer = AdaptedLinear::attach(quantized(32, 32, 10), &LoraConfig::default(), Rng::new(11)).unwrap();
        let b: Vec<f64> = probe(32, 8, 12).data().iter().map(|v| 0.01 * v).collect();
        layer.adapter.as_mut().unwrap().b = Tensor::new(&[32, 8], DType::Full, b).unwrap();
        let merged = layer.merge().cast(DType::Full);
        for seed in 0..100 {
            let x = probe(1, 32, 100 + seed);
            let y = layer.forward(&x, false, Rng::new(0)).unwrap();
            let ym = x.cast(DType::Double).matmul(&merged.cast(DType::Double).transpose2().unwrap()).unwrap();
            assert!(y.max_abs_diff(&ym) < 1e-6);
        }
    }

    #[test]
    fn param_count() {
        let layer = AdaptedLinear::attach(quantized(128, 128, 1), &LoraConfig::default(), Rng::new(1)).unwrap();
        assert_eq!(layer.adapter_params(), 2 * 8 * 128);
    }

    #[test]
    fn gradients_reach_adapter_not_base() {
        let layer = AdaptedLinear::attach(quantized(8, 8, 13), &LoraConfig::default(), Rng::new(14)).unwrap();
        let mut tape = Tape::new(DType::Full);
        let vars = layer.bind(&mut tape, DType::Full, true);
        let x = tape.constant(probe(4, 8, 15));
        let y = layer.apply(&mut tape, &vars, x, true, Rng::new(16)).unwrap();
        let loss = tape.cross_entropy(y, &[0, 1, 2, 3]).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(vars.a.unwrap()).is_some());
        let gb = tape.grad(vars.b.unwrap()).unwrap();
        assert!(gb.data().iter().any(|&g| g != 0.0));
        assert!(tape.grad(vars.weight).is_none());
    }

    #[test]
    fn alpha_b_rescaling_is_invariant() {
        let mut layer = AdaptedLinear::attach(quantized(16, 16, 20), &LoraConfig::default(), Rng::new(21)).unwrap();
        layer.adapter.as_mut().unwrap().b = probe(16, 8, 22).cast(DType::Double);
        let x = probe(4, 16, 23).cast(DType::Double);
        let y = layer.forward(&x, false, Rng::new(0)).unwrap();
        let ad = layer.adapter.as_mut().unwrap();
        ad.scaling *= 8.0;
        let scaled: Vec<f64> = ad.b.data().iter().map(|v| v / 8.0).collect();
        ad.b = Tensor::from_vec(ad.b.shape(), scaled).unwrap();
        let y2 = layer.forward(&x, false, Rng::new(0)).unwrap();
        assert!(y.max_abs_diff(&y2) < 1e-12);
    }
}
