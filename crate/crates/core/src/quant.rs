//! Symmetric, zero-point-free scalar quantization with one global scale.
//!
//! `Q(x) = clamp(round(x / delta))`, `D(q) = delta * q`, and `Q(D(q)) == q` for
//! every representable `q`. Rounding is half away from zero.

use crate::error::{Error, Result};
use crate::tensor::{FloatTensor, QuantTensor};

/// Bit width and scale shared by every quantized tensor of one network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantConfig {
    bits: u8,
    delta: f32,
}

impl QuantConfig {
    pub fn new(bits: u8, delta: f32) -> Result<Self> {
        if !(2..=16).contains(&bits) {
            return Err(Error::InvalidArgument(format!("bit width {bits} outside [2, 16]")));
        }
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::InvalidArgument(format!("scale {delta} must be positive")));
        }
        Ok(Self { bits, delta })
    }

    /// Derives the scale from the largest parameter magnitude.
    pub fn from_params<'a>(params: impl IntoIterator<Item = &'a f32>, bits: u8) -> Result<Self> {
        Self::new(bits, compute_delta(params, bits)?)
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn delta(&self) -> f32 {
        self.delta
    }

    /// Largest grid magnitude, `2^(b-1) - 1`.
    pub fn qmax(&self) -> i32 {
        qmax(self.bits)
    }

    /// Quantizes one value; non-finite input is rejected.
    pub fn quantize(&self, x: f32) -> Result<i32> {
        quantize_value(x, self)
    }

    pub fn dequantize(&self, q: i32) -> f32 {
        dequantize_value(q, self)
    }

    /// Snaps an already grid-scaled real number onto the grid.
    ///
    /// Total: NaN maps to 0 and infinities saturate, so corrupted float
    /// parameters can never abort integer inference.
    #[inline]
    pub fn requantize(&self, grid_value: f64) -> i32 {
        requantize_to(self.qmax() as f64, grid_value)
    }

    pub fn quantize_tensor(&self, t: &FloatTensor) -> Result<QuantTensor> {
        let values = t.data().iter().map(|&x| self.quantize(x)).collect::<Result<Vec<_>>>()?;
        QuantTensor::new(t.shape().to_vec(), values, self.delta, self.bits)
    }

    /// Activation quantizer: saturating and total, like [`requantize`](Self::requantize).
    pub fn quantize_activation(&self, t: &FloatTensor) -> QuantTensor {
        let inv = 1.0 / self.delta as f64;
        let values = t.data().iter().map(|&x| self.requantize(x as f64 * inv)).collect();
        QuantTensor::from_grid(t.shape().to_vec(), values, self)
    }
}

/// [`QuantConfig::requantize`] against a precomputed `qmax` (at most
/// `2^15 - 1`, so every intermediate fits `i32`).
#[inline]
pub(crate) fn requantize_to(qmax: f64, grid_value: f64) -> i32 {
    // |v| <= qmax keeps the fraction exact; plain selects so loops vectorize
    let g = if grid_value.is_nan() { 0.0 } else { grid_value };
    let v = if g > -qmax { g } else { -qmax };
    let v = if v < qmax { v } else { qmax };
    // SAFETY: v is finite and |v| <= qmax < 2^15
    let t = unsafe { v.to_int_unchecked::<i32>() };
    let frac = v - t as f64;
    t + (frac >= 0.5) as i32 - (frac <= -0.5) as i32
}

pub fn qmax(bits: u8) -> i32 {
    (1i32 << (bits - 1)) - 1
}

/// `max|theta| / (2^(b-1) - 1)` over every parameter that will be quantized.
pub fn compute_delta<'a>(params: impl IntoIterator<Item = &'a f32>, bits: u8) -> Result<f32> {
    if !(2..=16).contains(&bits) {
        return Err(Error::InvalidArgument(format!("bit width {bits} outside [2, 16]")));
    }
    let mut max_abs = 0.0f32;
    for &p in params {
        if !p.is_finite() {
            return Err(Error::NonFiniteInput(p as f64));
        }
        max_abs = max_abs.max(p.abs());
    }
    if max_abs == 0.0 {
        return Err(Error::DegenerateScale);
    }
    Ok((max_abs as f64 / qmax(bits) as f64) as f32)
}

pub fn quantize_value(x: f32, cfg: &QuantConfig) -> Result<i32> {
    if !x.is_finite() {
        return Err(Error::NonFiniteInput(x as f64));
    }
    Ok(cfg.requantize(x as f64 / cfg.delta as f64))
}

pub fn dequantize_value(q: i32, cfg: &QuantConfig) -> f32 {
    cfg.delta * q as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_examples() {
        let d = compute_delta(&[0.5, -1.27, 1.0], 8).unwrap();
        assert!((d - 0.01).abs() < 1e-8, "{d}");
        assert_eq!(compute_delta(&[1.0, -0.3], 2).unwrap(), 1.0);
        assert!(matches!(compute_delta(&[0.0, -0.0], 8), Err(Error::DegenerateScale)));
        assert!(matches!(compute_delta(&[], 8), Err(Error::DegenerateScale)));
    }

    #[test]
    fn quantize_examples() {
        let cfg = QuantConfig::new(8, 0.01).unwrap();
        assert_eq!(cfg.quantize(0.0).unwrap(), 0);
        assert_eq!(cfg.dequantize(0), 0.0);
        // 0.005 / 0.01 is exactly one half in binary
        assert_eq!(cfg.quantize(0.005).unwrap(), 1);
        assert_eq!(cfg.quantize(-0.005).unwrap(), -1);
        assert_eq!(cfg.quantize(100.0).unwrap(), 127);
        assert_eq!(cfg.quantize(-100.0).unwrap(), -127);
        assert!(matches!(cfg.quantize(f32::NAN), Err(Error::NonFiniteInput(_))));
        assert!(matches!(cfg.quantize(f32::INFINITY), Err(Error::NonFiniteInput(_))));
    }

    #[test]
    fn reciprocity_is_exhaustive_at_eight_bits() {
        let cfg = QuantConfig::new(8, 0.0123).unwrap();
        for q in -127..=127 {
            assert_eq!(cfg.quantize(cfg.dequantize(q)).unwrap(), q);
        }
    }

    #[test]
    fn requantize_is_total() {
        let cfg = QuantConfig::new(4, 0.5).unwrap();
        assert_eq!(cfg.requantize(f64::NAN), 0);
        assert_eq!(cfg.requantize(f64::INFINITY), 7);
        assert_eq!(cfg.requantize(f64::NEG_INFINITY), -7);
        assert_eq!(cfg.requantize(-2.5), -3);
        assert_eq!(cfg.requantize(2.4999), 2);
        assert_eq!(cfg.requantize(0.49999999999999994), 0);
        assert_eq!(cfg.requantize(-0.5), -1);
    }

    proptest::proptest! {
        #[test]
        fn requantize_matches_round_half_away(x in -1e6f64..1e6) {
            let cfg = QuantConfig::new(16, 1.0).unwrap();
            let m = cfg.qmax() as f64;
            proptest::prop_assert_eq!(cfg.requantize(x), x.round().clamp(-m, m) as i32);
        }
    }

    #[test]
    fn config_validation() {
        assert!(QuantConfig::new(1, 0.1).is_err());
        assert!(QuantConfig::new(17, 0.1).is_err());
        assert!(QuantConfig::new(8, 0.0).is_err());
        assert!(QuantConfig::new(8, f32::NAN).is_err());
    }
}
