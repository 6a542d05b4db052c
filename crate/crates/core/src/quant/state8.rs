use alloc::format;
use alloc::vec::Vec;

use super::codebook::{dynamic8_codebook, Codebook};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const STATE8_BLOCK: usize = 256;

/// Blockwise 8-bit optimizer state over the dynamic codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized8bitState {
    shape: Vec<usize>,
    block_size: usize,
    codes: Vec<u8>,
    absmax: Vec<f32>,
}

impl Quantized8bitState {
    pub fn zeros(shape: &[usize], block_size: usize) -> Self {
        let n: usize = shape.iter().product();
        let cb = dynamic8_codebook();
        Quantized8bitState {
            shape: shape.to_vec(),
            block_size,
            codes: alloc::vec![cb.index_of_zero() as u8; n],
            absmax: alloc::vec![0.0; n.div_ceil(block_size)],
        }
    }

    pub fn quantize(x: &Tensor, block_size: usize) -> Result<Self> {
        Self::quantize_with(x, block_size, &dynamic8_codebook())
    }

    /// Same as [`Self::quantize`] with a prebuilt codebook, for hot loops.
    pub fn quantize_with(x: &Tensor, block_size: usize, cb: &Codebook) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::Config("8-bit state block size is zero".into()));
        }
        if let Some((index, &value)) = x.data().iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Value { index, value });
        }
        let zero = cb.index_of_zero() as u8;
        let mut codes = Vec::with_capacity(x.numel());
        let mut absmax = Vec::with_capacity(x.numel().div_ceil(block_size));
        for block in x.data().chunks(block_size) {
            let a = block.iter().fold(0.0f64, |m, v| m.max(libm::fabs(*v))) as f32;
            absmax.push(a);
            for &v in block {
                codes.push(if a == 0.0 {
                    zero
                } else {
                    cb.nearest((v / a as f64).clamp(-1.0, 1.0)) as u8
                });
            }
        }
        Ok(Quantized8bitState {
            shape: x.shape().to_vec(),
            block_size,
            codes,
            absmax,
        })
    }

    pub fn from_parts(shape: Vec<usize>, block_size: usize, codes: Vec<u8>, absmax: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if block_size == 0 || codes.len() != n || absmax.len() != n.div_ceil(block_size) {
            return Err(Error::Format(format!(
                "8-bit state for {n} elements has {} codes and {} scales",
                codes.len(),
                absmax.len()
            )));
        }
        if codes.iter().any(|&c| c as usize >= 255) {
            return Err(Error::Format("8-bit state code 255 is not a valid level".into()));
        }
        Ok(Quantized8bitState {
            shape,
            block_size,
            codes,
            absmax,
        })
    }

    pub fn dequantize(&self) -> Tensor {
        self.dequantize_with(&dynamic8_codebook())
    }

    pub fn dequantize_with(&self, cb: &Codebook) -> Tensor {
        let v = cb.values();
        let data = self
            .codes
            .iter()
            .enumerate()
            .map(|(i, &c)| v[c as usize] * self.absmax[i / self.block_size] as f64)
            .collect();
        Tensor::new(&self.shape, DType::Double, data).expect("state shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn absmax(&self) -> &[f32] {
        &self.absmax
    }

    pub fn storage_bytes(&self) -> u64 {
        (self.codes.len() + 4 * self.absmax.len()) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn zeros_round_trip() {
        let x = Tensor::zeros(&[300], DType::Full);
        let q = Quantized8bitState::quantize(&x, STATE8_BLOCK).unwrap();
        assert!(q.dequantize().data().iter().all(|&v| v == 0.0));
        assert_eq!(Quantized8bitState::zeros(&[300], STATE8_BLOCK), q);
    }

    #[test]
    fn constant_round_trip() {
        for c in [3.25, -0.001] {
            let x = Tensor::full(&[256], DType::Full, c);
            let q = Quantized8bitState::quantize(&x, STATE8_BLOCK).unwrap();
            assert_eq!(q.dequantize().data(), x.data());
        }
    }

    #[test]
    fn random_round_trip_bound() {
        let cb = dynamic8_codebook();
        let gap = cb.max_half_gap();
        let mut s = Rng::new(17).stream();
        let data: Vec<f64> = (0..100_000).map(|_| s.normal() * 0.01).collect();
        let x = Tensor::new(&[100_000], DType::Full, data).unwrap();
        let q = Quantized8bitState::quantize(&x, STATE8_BLOCK).unwrap();
        let y = q.dequantize();
        for (i, (a, b)) in x.data().iter().zip(y.data()).enumerate() {
            let bound = q.absmax()[i / STATE8_BLOCK] as f64 * gap;
            assert!((a - b).abs() <= bound, "element {i}");
        }
    }

    #[test]
    fn non_finite_rejected() {
        let x = Tensor::from_vec(&[2], alloc::vec![0.0, f64::NAN]).unwrap();
        assert!(matches!(
            Quantized8bitState::quantize(&x, STATE8_BLOCK),
            Err(Error::Value { index: 1, .. })
        ));
    }
}
