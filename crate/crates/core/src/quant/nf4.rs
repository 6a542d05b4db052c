use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::codebook::{nf4_codebook, NF4_LEVELS};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    pub block_size: usize,
    pub double_quant: bool,
    pub dq_group_size: usize,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            block_size: 64,
            double_quant: true,
            dq_group_size: 256,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.block_size.is_power_of_two() || self.block_size < 2 {
            return Err(Error::Config(format!(
                "block_size {} must be a power of two >= 2",
                self.block_size
            )));
        }
        if self.double_quant && !self.dq_group_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "dq_group_size {} must be a power of two",
                self.dq_group_size
            )));
        }
        Ok(())
    }
}

/// Block scales quantized to 8 bits with one affine map per group.
#[derive(Debug, Clone, PartialEq)]
pub struct DoubleQuantState {
    pub codes: Vec<u8>,
    pub group_size: usize,
    pub group_scale: Vec<f32>,
    pub group_offset: Vec<f32>,
}

impl DoubleQuantState {
    pub fn quantize(absmax: &[f32], group_size: usize) -> Self {
        let n_groups = absmax.len().div_ceil(group_size);
        let mut codes = Vec::with_capacity(absmax.len());
        let mut group_scale = Vec::with_capacity(n_groups);
        let mut group_offset = Vec::with_capacity(n_groups);
        for group in absmax.chunks(group_size) {
            let lo = group.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = group.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let scale = ((hi as f64 - lo as f64) / 255.0) as f32;
            group_scale.push(scale);
            group_offset.push(lo);
            for &a in group {
                let code = if scale > 0.0 {
                    libm::round((a as f64 - lo as f64) / scale as f64).clamp(0.0, 255.0) as u8
                } else {
                    0
                };
                codes.push(code);
            }
        }
        DoubleQuantState {
            codes,
            group_size,
            group_scale,
            group_offset,
        }
    }

    pub fn n_groups(&self) -> usize {
        self.group_scale.len()
    }

    pub fn reconstruct(&self, block: usize) -> f64 {
        let g = block / self.group_size;
        self.group_offset[g] as f64 + self.codes[block] as f64 * self.group_scale[g] as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockScales {
    Raw(Vec<f32>),
    Double(DoubleQuantState),
}

/// Frozen 4-bit weights: packed NF4 indices plus per-block scales.
///
/// Element `2i` sits in the low nibble of byte `i`, element `2i + 1` in the
/// high nibble.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    block_size: usize,
    codes: Vec<u8>,
    scales: BlockScales,
}

impl QuantizedTensor {
    pub fn quantize(x: &Tensor, cfg: &QuantConfig) -> Result<Self> {
        cfg.validate()?;
        if let Some((index, &value)) = x.data().iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Value { index, value });
        }
        let cb = nf4_codebook();
        let zero = cb.index_of_zero() as u8;
        let n = x.numel();
        let mut codes = vec![0u8; n.div_ceil(2)];
        let mut absmax = Vec::with_capacity(n.div_ceil(cfg.block_size));
        for (b, block) in x.data().chunks(cfg.block_size).enumerate() {
            let a = block.iter().fold(0.0f64, |m, v| m.max(libm::fabs(*v))) as f32;
            absmax.push(a);
            for (j, &v) in block.iter().enumerate() {
                let code = if a == 0.0 {
                    zero
                } else {
                    cb.nearest((v / a as f64).clamp(-1.0, 1.0)) as u8
                };
                set_nibble(&mut codes, b * cfg.block_size + j, code);
            }
        }
        let scales = if cfg.double_quant {
            BlockScales::Double(DoubleQuantState::quantize(&absmax, cfg.dq_group_size))
        } else {
            BlockScales::Raw(absmax)
        };
        Ok(QuantizedTensor {
            shape: x.shape().to_vec(),
            block_size: cfg.block_size,
            codes,
            scales,
        })
    }

    /// Reassembles a tensor from serialized parts, checking every length.
    pub fn from_parts(shape: Vec<usize>, block_size: usize, codes: Vec<u8>, scales: BlockScales) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::Format("block_size is zero".into()));
        }
        let numel: usize = shape.iter().product();
        let n_blocks = numel.div_ceil(block_size);
        if codes.len() != numel.div_ceil(2) {
            return Err(Error::Format(format!(
                "expected {} code bytes for {numel} elements, found {}",
                numel.div_ceil(2),
                codes.len()
            )));
        }
        match &scales {
            BlockScales::Raw(a) if a.len() != n_blocks => {
                return Err(Error::Format(format!("expected {n_blocks} block scales, found {}", a.len())));
            }
            BlockScales::Double(dq)
                if (dq.group_size == 0
                    || dq.codes.len() != n_blocks
                    || dq.group_scale.len() != n_blocks.div_ceil(dq.group_size)
                    || dq.group_offset.len() != dq.group_scale.len())
                => {
                    return Err(Error::Format("double-quantized scale payload has inconsistent lengths".into()));
                }
            _ => {}
        }
        Ok(QuantizedTensor {
            shape,
            block_size,
            codes,
            scales,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn n_blocks(&self) -> usize {
        self.numel().div_ceil(self.block_size)
    }

    pub fn packed_codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn scales(&self) -> &BlockScales {
        &self.scales
    }

    pub fn double_quant(&self) -> Option<&DoubleQuantState> {
        match &self.scales {
            BlockScales::Double(dq) => Some(dq),
            BlockScales::Raw(_) => None,
        }
    }

    pub fn code(&self, i: usize) -> u8 {
        let byte = self.codes[i / 2];
        if i.is_multiple_of(2) {
            byte & 0x0f
        } else {
            byte >> 4
        }
    }

    /// Reconstructed scale of block `b`.
    pub fn absmax(&self, b: usize) -> f64 {
        match &self.scales {
            BlockScales::Raw(a) => a[b] as f64,
            BlockScales::Double(dq) => dq.reconstruct(b),
        }
    }

    pub fn dequantize(&self, dtype: DType) -> Tensor {
        let n = self.numel();
        let mut out = Vec::with_capacity(n);
        for b in 0..self.n_blocks() {
            let a = self.absmax(b);
            let end = ((b + 1) * self.block_size).min(n);
            for i in b * self.block_size..end {
                out.push(NF4_LEVELS[self.code(i) as usize] as f64 * a);
            }
        }
        Tensor::new(&self.shape, dtype, out).expect("dequantized shape")
    }

    /// Bytes held by codes and scale metadata.
    pub fn storage_bytes(&self) -> u64 {
        let scale_bytes = match &self.scales {
            BlockScales::Raw(a) => 4 * a.len(),
            BlockScales::Double(dq) => dq.codes.len() + 8 * dq.n_groups(),
        };
        (self.codes.len() + scale_bytes) as u64
    }

    pub fn bits_per_param(&self) -> f64 {
        let n_groups = self.double_quant().map(|dq| dq.n_groups());
        bits_per_param(self.numel(), self.block_size, n_groups)
    }
}

/// Storage cost per element: `(4·numel + 32·n_blocks) / numel` without
/// double quantization, `(4·numel + 8·n_blocks + 64·n_groups) / numel` with it.
pub fn bits_per_param(numel: usize, block_size: usize, dq_groups: Option<usize>) -> f64 {
    let n_blocks = numel.div_ceil(block_size) as f64;
    let numel_f = numel as f64;
    match dq_groups {
        None => (4.0 * numel_f + 32.0 * n_blocks) / numel_f,
        Some(g) => (4.0 * numel_f + 8.0 * n_blocks + 64.0 * g as f64) / numel_f,
    }
}

fn set_nibble(codes: &mut [u8], i: usize, code: u8) {
    let byte = &mut codes[i / 2];
    if i.is_multiple_of(2) {
        *byte = (*byte & 0xf0) | code;
    } else {
        *byte = (*byte & 0x0f) | (code << 4);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn raw() -> QuantConfig {
        QuantConfig {
            double_quant: false,
            ..QuantConfig::default()
        }
    }

    fn normal(n: usize, seed: u64) -> Tensor {
        let mut s = Rng::new(seed).stream();
        Tensor::new(&[n], DType::Full, (0..n).map(|_| s.normal()).collect()).unwrap()
    }

    #[test]
    fn zero_block() {
        let x = Tensor::zeros(&[64], DType::Full);
        let q = QuantizedTensor::quantize(&x, &raw()).unwrap();
        assert_eq!(q.absmax(0), 0.0);
        assert!(q.dequantize(DType::Full).data().iter().all(|&v| v == 0.0));
        let q = QuantizedTensor::quantize(&x, &QuantConfig::default()).unwrap();
        assert!(q.dequantize(DType::Full).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_block_is_exact() {
        for c in [0.37, -2.5, 1e-3] {
            let x = Tensor::full(&[64], DType::Full, c);
            let q = QuantizedTensor::quantize(&x, &raw()).unwrap();
            assert_eq!(q.dequantize(DType::Full), x);
        }
    }

    #[test]
    fn codebook_points_are_fixed_points() {
        let a = 0.75f64;
        let data: Vec<f64> = NF4_LEVELS.iter().map(|&v| v as f64 * a).collect();
        let x = Tensor::new(&[16], DType::Double, data).unwrap();
        let q = QuantizedTensor::quantize(&x, &QuantConfig { block_size: 16, ..raw() }).unwrap();
        assert_eq!(q.dequantize(DType::Double), x);
    }

    #[test]
    fn non_finite_names_index() {
        let x = Tensor::from_vec(&[4], vec![1.0, 2.0, f64::NAN, f64::INFINITY]).unwrap();
        assert!(matches!(
            QuantizedTensor::quantize(&x, &raw()),
            Err(Error::Value { index: 2, .. })
        ));
    }

    #[test]
    fn ragged_tail_block() {
        let x = normal(100, 4);
        let q = QuantizedTensor::quantize(&x, &raw()).unwrap();
        assert_eq!(q.n_blocks(), 2);
        assert_eq!(q.packed_codes().len(), 50);
        let y = q.dequantize(DType::Double);
        let gap = nf4_codebook().max_half_gap();
        for (i, (a, b)) in x.data().iter().zip(y.data()).enumerate() {
            assert!((a - b).abs() <= q.absmax(i / 64) * gap);
        }
    }

    #[test]
    fn double_quant_scale_error_bounded() {
        let x = normal(64 * 600, 5);
        let cfg = QuantConfig::default();
        let plain = QuantizedTensor::quantize(&x, &raw()).unwrap();
        let dq = QuantizedTensor::quantize(&x, &cfg).unwrap();
        let BlockScales::Raw(exact) = plain.scales() else { unreachable!() };
        for (g, group) in exact.chunks(cfg.dq_group_size).enumerate() {
            let lo = group.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
            let hi = group.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            for (j, &a) in group.iter().enumerate() {
                let b = g * cfg.dq_group_size + j;
                assert!((dq.absmax(b) - a as f64).abs() <= (hi - lo) / 255.0);
            }
        }
        // codes do not depend on how scales are stored
        assert_eq!(plain.packed_codes(), dq.packed_codes());
    }

    #[test]
    fn bits_per_param_defaults() {
        assert_eq!(bits_per_param(64 * 256, 64, None), 4.5);
        assert_eq!(bits_per_param(64 * 256, 64, Some(1)), 4.0 + 8.0 / 64.0 + 64.0 / (64.0 * 256.0));
        assert_eq!(bits_per_param(64, 64, None), 4.0 + 32.0 / 64.0);
        assert_eq!(bits_per_param(64, 64, Some(1)), 4.0 + 8.0 / 64.0 + 64.0 / 64.0);
        let x = normal(64 * 256, 1);
        let q = QuantizedTensor::quantize(&x, &QuantConfig::default()).unwrap();
        assert!((q.bits_per_param() - 4.128_906_25).abs() < 1e-12);
        assert_eq!(q.storage_bytes() * 8, (q.bits_per_param() * q.numel() as f64) as u64);
    }

    #[test]
    fn from_parts_checks_lengths() {
        let x = normal(128, 2);
        let q = QuantizedTensor::quantize(&x, &raw()).unwrap();
        let bad = QuantizedTensor::from_parts(vec![128], 64, q.packed_codes()[..10].to_vec(), q.scales().clone());
        assert!(matches!(bad, Err(Error::Format(_))));
        let ok = QuantizedTensor::from_parts(vec![128], 64, q.packed_codes().to_vec(), q.scales().clone()).unwrap();
        assert_eq!(ok, q);
    }

    #[test]
    fn invalid_block_size() {
        let x = normal(10, 2);
        let cfg = QuantConfig { block_size: 48, ..raw() };
        assert!(matches!(QuantizedTensor::quantize(&x, &cfg), Err(Error::Config(_))));
    }
}
