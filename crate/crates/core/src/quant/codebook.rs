use alloc::vec::Vec;

/// A sorted table of reconstruction levels in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    values: Vec<f64>,
    midpoints: Vec<f64>,
}

impl Codebook {
    pub fn new(values: Vec<f64>) -> Self {
        debug_assert!(values.windows(2).all(|w| w[0] < w[1]));
        let midpoints = values.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
        Codebook { values, midpoints }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the nearest level; a value exactly on a midpoint takes the
    /// lower index.
    #[inline]
    pub fn nearest(&self, x: f64) -> usize {
        self.midpoints.partition_point(|&m| m < x)
    }

    pub fn index_of_zero(&self) -> usize {
        self.values
            .iter()
            .position(|&v| v == 0.0)
            .expect("codebook has an exact zero")
    }

    /// Half of the widest gap between adjacent levels.
    pub fn max_half_gap(&self) -> f64 {
        self.values
            .windows(2)
            .map(|w| (w[1] - w[0]) / 2.0)
            .fold(0.0, f64::max)
    }
}

/// NormalFloat-4 levels, stored as `f32`.
///
/// Negative side: normal quantiles at 8 evenly spaced probabilities from
/// `1 - 0.9677083` up to (excluding) 0.5; positive side: 7 quantiles from
/// 0.5 (excluded) to 0.9677083; plus an exact zero. Both extremes are
/// normalized to unit magnitude.
#[allow(clippy::excessive_precision)]
pub const NF4_LEVELS: [f32; 16] = [
    -1.0,
    -0.722_956_717_014_312_7,
    -0.562_616_944_313_049_3,
    -0.440_709_799_528_121_95,
    -0.337_915_182_113_647_46,
    -0.246_112_287_044_525_15,
    -0.160_930_171_608_924_87,
    -0.079_580_329_358_577_73,
    0.0,
    0.091_049_991_548_061_37,
    0.184_773_430_228_233_34,
    0.284_441_351_890_563_96,
    0.394_917_488_098_144_53,
    0.525_073_051_452_636_7,
    0.696_192_920_207_977_3,
    1.0,
];

/// Probability offset that pins the extreme NF4 quantiles.
pub const NF4_OFFSET: f64 = 0.967_708_3;

pub fn nf4_codebook() -> Codebook {
    Codebook::new(NF4_LEVELS.iter().map(|&v| v as f64).collect())
}

/// Signed dynamic-exponent 8-bit codebook with 255 levels.
///
/// Seven decades `10^-6 .. 10^0`; decade `i` holds the `2^i` interval
/// midpoints of `linspace(0.1, 1, 2^i + 1)` scaled by `10^(i-6)`. The
/// largest midpoint is replaced by exactly 1.0 so both extremes are
/// representable. Mirrored for the negative side, plus an exact zero.
pub fn dynamic8_codebook() -> Codebook {
    let mut pos = Vec::with_capacity(127);
    for i in 0..7u32 {
        let n = 1usize << i;
        let scale = libm::pow(10.0, i as f64 - 6.0);
        let step = 0.9 / n as f64;
        for j in 0..n {
            let lo = 0.1 + step * j as f64;
            let hi = 0.1 + step * (j + 1) as f64;
            pos.push(((lo + hi) / 2.0 * scale) as f32 as f64);
        }
    }
    *pos.last_mut().unwrap() = 1.0;
    let mut values: Vec<f64> = pos.iter().rev().map(|v| -v).collect();
    values.push(0.0);
    values.extend_from_slice(&pos);
    Codebook::new(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nf4_shape() {
        let cb = nf4_codebook();
        let v = cb.values();
        assert_eq!(v.len(), 16);
        assert!(v.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(v.iter().filter(|&&x| x == 0.0).count(), 1);
        assert_eq!(v.iter().filter(|&&x| x < 0.0).count(), 8);
        assert_eq!(v.iter().filter(|&&x| x > 0.0).count(), 7);
        assert_eq!(v[0], -1.0);
        assert_eq!(v[15], 1.0);
        assert_eq!(cb.index_of_zero(), 8);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let cb = Codebook::new(alloc::vec![-1.0, 0.0, 1.0]);
        assert_eq!(cb.nearest(-0.5), 0);
        assert_eq!(cb.nearest(0.5), 1);
        assert_eq!(cb.nearest(0.500_001), 2);
        assert_eq!(cb.nearest(-7.0), 0);
        assert_eq!(cb.nearest(7.0), 2);
    }

    #[test]
    fn dynamic8_shape() {
        let cb = dynamic8_codebook();
        let v = cb.values();
        assert_eq!(v.len(), 255);
        assert!(v.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(v[0], -1.0);
        assert_eq!(v[254], 1.0);
        assert_eq!(cb.index_of_zero(), 127);
        assert!(v.iter().zip(v.iter().rev()).all(|(a, b)| *a == -*b));
    }
}
