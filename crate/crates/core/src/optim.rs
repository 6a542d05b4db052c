//! AdamW with blockwise 8-bit moments, a 32-bit reference variant, and
//! plain SGD.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{Category, MemoryLedger};
use crate::quant::{dynamic8_codebook, Codebook, Quantized8bitState, STATE8_BLOCK};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[serde(rename = "adamw_8bit")]
    AdamW8bit,
    #[serde(rename = "adamw_32bit")]
    AdamW32,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid AdamW settings {self:?}")))
        }
    }

    /// Largest per-step `|m̂ / (√v̂ + eps)|` exact Adam can produce when
    /// `1 - beta1 > √(1 - beta2)`; otherwise 1.
    fn ratio_bound(&self) -> f64 {
        let s = libm::sqrt(1.0 - self.beta2);
        if 1.0 - self.beta1 > s {
            (1.0 - self.beta1) / s
        } else {
            1.0
        }
    }
}

/// First and second moments of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum Moments {
    Q8 { m: Quantized8bitState, v: Quantized8bitState },
    F32 { m: Tensor, v: Tensor },
    None,
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub cfg: AdamWConfig,
    pub step: u64,
    pub moments: Vec<Moments>,
    codebook: Codebook,
}

impl PartialEq for OptimizerState {
    fn eq(&self, o: &Self) -> bool {
        self.kind == o.kind && self.cfg == o.cfg && self.step == o.step && self.moments == o.moments
    }
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, cfg: AdamWConfig, shapes: &[&[usize]]) -> Result<Self> {
        cfg.validate()?;
        let moments = shapes
            .iter()
            .map(|s| match kind {
                OptimizerKind::AdamW8bit => Moments::Q8 {
                    m: Quantized8bitState::zeros(s, STATE8_BLOCK),
                    v: Quantized8bitState::zeros(s, STATE8_BLOCK),
                },
                OptimizerKind::AdamW32 => Moments::F32 {
                    m: Tensor::zeros(s, DType::Full),
                    v: Tensor::zeros(s, DType::Full),
                },
                OptimizerKind::Sgd => Moments::None,
            })
            .collect();
        Ok(Self::from_parts(kind, cfg, 0, moments))
    }

    pub fn from_parts(kind: OptimizerKind, cfg: AdamWConfig, step: u64, moments: Vec<Moments>) -> Self {
        OptimizerState {
            kind,
            cfg,
            step,
            moments,
            codebook: dynamic8_codebook(),
        }
    }

    /// Allocates state and charges it to the host side of `ledger`.
    pub fn new_registered(
        kind: OptimizerKind,
        cfg: AdamWConfig,
        shapes: &[&[usize]],
        ledger: &mut MemoryLedger,
    ) -> Result<Self> {
        let state = Self::new(kind, cfg, shapes)?;
        ledger.enforce(Category::OptimizerStates, state.state_bytes())?;
        Ok(state)
    }

    pub fn state_bytes(&self) -> u64 {
        self.moments
            .iter()
            .map(|m| match m {
                Moments::Q8 { m, v } => m.storage_bytes() + v.storage_bytes(),
                Moments::F32 { m, v } => 4 * (m.numel() + v.numel()) as u64,
                Moments::None => 0,
            })
            .sum()
    }

    /// One update. Each parameter keeps its dtype; values are rounded back
    /// onto its grid after the update.
    pub fn apply(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.moments.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer holds {} states but got {} params and {} grads",
                self.moments.len(),
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::dims("optimizer", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - libm::pow(c.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, t as f64);
        let bound = c.ratio_bound();
        for ((p, g), mom) in params.iter_mut().zip(grads).zip(self.moments.iter_mut()) {
            if let Moments::None = mom {
                let data = p.data_mut();
                for (w, gi) in data.iter_mut().zip(g.data()) {
                    *w -= lr * (gi + c.weight_decay * *w);
                }
                p.requantize();
                continue;
            }
            let (mut m, mut v) = match mom {
                Moments::Q8 { m, v } => (
                    m.dequantize_with(&self.codebook).into_data(),
                    v.dequantize_with(&self.codebook).into_data(),
                ),
                Moments::F32 { m, v } => (m.data().to_vec(), v.data().to_vec()),
                Moments::None => unreachable!(),
            };
            let data = p.data_mut();
            for i in 0..data.len() {
                let gi = g.data()[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                let r = (mh / (libm::sqrt(vh) + c.eps)).clamp(-bound, bound);
                data[i] -= lr * (r + c.weight_decay * data[i]);
            }
            p.requantize();
            let shape = p.shape().to_vec();
            *mom = match mom {
                Moments::Q8 { .. } => Moments::Q8 {
                    m: Quantized8bitState::quantize_with(&Tensor::from_vec(&shape, m)?, STATE8_BLOCK, &self.codebook)?,
                    v: Quantized8bitState::quantize_with(&Tensor::from_vec(&shape, v)?, STATE8_BLOCK, &self.codebook)?,
                },
                _ => Moments::F32 {
                    m: Tensor::new(&shape, DType::Full, m)?,
                    v: Tensor::new(&shape, DType::Full, v)?,
                },
            };
        }
        Ok(())
    }

    /// Dequantized moments of parameter `i`, if any.
    pub fn moments_of(&self, i: usize) -> Option<(Tensor, Tensor)> {
        match &self.moments[i] {
            Moments::Q8 { m, v } => Some((m.dequantize_with(&self.codebook), v.dequantize_with(&self.codebook))),
            Moments::F32 { m, v } => Some((m.clone(), v.clone())),
            Moments::None => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn quadratic(kind: OptimizerKind, steps: usize) -> Vec<f64> {
        let mut w = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let mut opt = OptimizerState::new(kind, AdamWConfig::default(), &[&[1]]).unwrap();
        let mut out = Vec::new();
        for _ in 0..steps {
            let g = Tensor::from_vec(&[1], vec![2.0 * w.data()[0]]).unwrap();
            opt.apply(&mut [&mut w], &[g], 0.1).unwrap();
            out.push(w.data()[0]);
        }
        out
    }

    #[test]
    fn zero_grad_is_noop() {
        let mut w = Tensor::new(&[3], DType::Full, vec![1.0, -2.0, 0.5]).unwrap();
        let before = w.clone();
        let mut opt = OptimizerState::new(OptimizerKind::AdamW8bit, AdamWConfig::default(), &[&[3]]).unwrap();
        opt.apply(&mut [&mut w], &[Tensor::zeros(&[3], DType::Double)], 0.1).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn adam_solves_quadratic() {
        let full = quadratic(OptimizerKind::AdamW32, 200);
        assert!(full.last().unwrap().abs() < 1e-2);
    }

    #[test]
    fn eight_bit_tracks_full() {
        let full = quadratic(OptimizerKind::AdamW32, 200);
        let q8 = quadratic(OptimizerKind::AdamW8bit, 200);
        for (a, b) in full.iter().zip(&q8) {
            assert!((a - b).abs() < 1e-2);
        }
    }

    #[test]
    fn moments_stay_finite() {
        let mut w = Tensor::from_vec(&[300], (0..300).map(|i| i as f64 * 0.01).collect()).unwrap();
        let mut opt = OptimizerState::new(OptimizerKind::AdamW8bit, AdamWConfig::default(), &[&[300]]).unwrap();
        for k in 0..5 {
            let g = Tensor::from_vec(&[300], (0..300).map(|i| ((i * 7 + k) % 13) as f64 - 6.0).collect()).unwrap();
            opt.apply(&mut [&mut w], &[g], 0.01).unwrap();
            let (m, v) = opt.moments_of(0).unwrap();
            assert!(m.all_finite() && v.all_finite());
        }
    }

    #[test]
    fn sgd_step() {
        let mut w = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, AdamWConfig::default(), &[&[2]]).unwrap();
        opt.apply(&mut [&mut w], &[Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap()], 0.5).unwrap();
        assert_eq!(w.data(), &[0.5, 2.5]);
    }

    #[test]
    fn state_bytes() {
        let opt = OptimizerState::new(OptimizerKind::AdamW8bit, AdamWConfig::default(), &[&[512]]).unwrap();
        assert_eq!(opt.state_bytes(), 2 * (512 + 2 * 4));
        let mut ledger = MemoryLedger::new(crate::memory::MemoryBudget {
            device_bytes: 0,
            host_bytes: 100,
        });
        assert!(matches!(
            OptimizerState::new_registered(OptimizerKind::AdamW8bit, AdamWConfig::default(), &[&[512]], &mut ledger),
            Err(Error::Budget(_))
        ));
    }
}
