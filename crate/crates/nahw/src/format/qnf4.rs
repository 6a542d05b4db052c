//! `QNF4` records: one quantized tensor.
//!
//! ```text
//! "QNF4" | version u16 | block_size u32 | dq u8 | rank u32 | dims u32×rank
//! packed codes (ceil(numel / 2) bytes)
//! dq = 0: absmax f32 × n_blocks
//! dq = 1: group_size u32 | n_groups u32 | scale f32 × n_groups
//!         | offset f32 × n_groups | codes u8 × n_blocks
//! ```

use nahw_core::quant::{BlockScales, DoubleQuantState, QuantizedTensor};
use nahw_core::{Error, Result};

use super::binio::{Reader, Writer};

pub const MAGIC: &[u8; 4] = b"QNF4";
pub const VERSION: u16 = 1;

pub fn write(w: &mut Writer, q: &QuantizedTensor) -> Result<()> {
    w.bytes(MAGIC).u16(VERSION).u32_len(q.block_size())?;
    w.u8(q.double_quant().is_some() as u8);
    w.u32_len(q.shape().len())?;
    for &d in q.shape() {
        w.u32_len(d)?;
    }
    w.bytes(q.packed_codes());
    match q.scales() {
        BlockScales::Raw(a) => {
            w.f32s(a);
        }
        BlockScales::Double(dq) => {
            w.u32_len(dq.group_size)?.u32_len(dq.n_groups())?;
            w.f32s(&dq.group_scale).f32s(&dq.group_offset).bytes(&dq.codes);
        }
    }
    Ok(())
}

pub fn to_bytes(q: &QuantizedTensor) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    write(&mut w, q)?;
    Ok(w.buf)
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct Header {
    pub block_size: usize,
    pub double_quant: bool,
    pub shape: Vec<usize>,
}

pub fn read_header(r: &mut Reader) -> Result<Header> {
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let block_size = r.u32()? as usize;
    let double_quant = match r.u8()? {
        0 => false,
        1 => true,
        f => return Err(Error::Format(format!("QNF4: bad double-quant flag {f}"))),
    };
    let rank = r.u32()? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("QNF4: implausible rank {rank}")));
    }
    let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    Ok(Header {
        block_size,
        double_quant,
        shape,
    })
}

pub fn read(r: &mut Reader) -> Result<QuantizedTensor> {
    let h = read_header(r)?;
    if h.block_size == 0 {
        return Err(Error::Format("QNF4: zero block size".into()));
    }
    let numel: usize = h.shape.iter().product();
    let n_blocks = numel.div_ceil(h.block_size);
    let codes = r.take(numel.div_ceil(2))?.to_vec();
    let scales = if h.double_quant {
        let group_size = r.u32()? as usize;
        let n_groups = r.u32()? as usize;
        if group_size == 0 || n_groups != n_blocks.div_ceil(group_size) {
            return Err(Error::Format(format!(
                "QNF4: {n_groups} groups of {group_size} cannot cover {n_blocks} blocks"
            )));
        }
        let group_scale = r.f32s(n_groups)?;
        let group_offset = r.f32s(n_groups)?;
        let codes = r.take(n_blocks)?.to_vec();
        BlockScales::Double(DoubleQuantState {
            codes,
            group_size,
            group_scale,
            group_offset,
        })
    } else {
        BlockScales::Raw(r.f32s(n_blocks)?)
    };
    QuantizedTensor::from_parts(h.shape, h.block_size, codes, scales)
}

pub fn from_bytes(b: &[u8]) -> Result<QuantizedTensor> {
    let mut r = Reader::new(b, "QNF4");
    let q = read(&mut r)?;
    r.finish()?;
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nahw_core::quant::QuantConfig;
    use nahw_core::{DType, Rng, Tensor};

    fn sample(n: usize, dq: bool) -> QuantizedTensor {
        let mut s = Rng::new(n as u64).stream();
        let t = Tensor::new(&[n / 10, 10], DType::Full, (0..n).map(|_| s.normal()).collect()).unwrap();
        let cfg = QuantConfig {
            double_quant: dq,
            ..QuantConfig::default()
        };
        QuantizedTensor::quantize(&t, &cfg).unwrap()
    }

    #[test]
    fn round_trip() {
        for dq in [false, true] {
            for n in [10, 650, 20_000] {
                let q = sample(n, dq);
                let b = to_bytes(&q).unwrap();
                assert_eq!(from_bytes(&b).unwrap(), q);
            }
        }
    }

    #[test]
    fn size_arithmetic() {
        let q = sample(640, false);
        let b = to_bytes(&q).unwrap();
        assert_eq!(b.len(), 4 + 2 + 4 + 1 + 4 + 2 * 4 + 320 + 10 * 4);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let b = to_bytes(&sample(100, true)).unwrap();
        assert!(from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut long = b;
        long.push(0);
        assert!(from_bytes(&long).is_err());
    }
}
