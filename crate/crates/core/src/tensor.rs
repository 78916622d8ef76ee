//! Dense tensor containers.
//!
//! All tensors are row-major and immutable once built; kernels consume them by
//! reference and allocate fresh outputs.

use crate::error::{shape_err, Result};

fn checked_numel(shape: &[usize]) -> Result<usize> {
    if shape.contains(&0) {
        return Err(shape_err(format!("zero extent in shape {shape:?}")));
    }
    shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e)).ok_or_else(|| shape_err(format!("shape {shape:?} overflows usize")))
}

/// Real-valued tensor with single-precision storage.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl FloatTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n = checked_numel(&shape)?;
        if n != data.len() {
            return Err(shape_err(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = checked_numel(&shape)?;
        Ok(Self { shape, data: vec![0.0; n] })
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f32) -> Result<Self> {
        let n = checked_numel(&shape)?;
        Ok(Self { shape, data: (0..n).map(&mut f).collect() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// Values on the integer grid of a symmetric quantizer: `real = delta * value`.
///
/// Values are held in `i32` containers; the logical width is `bits`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantTensor {
    shape: Vec<usize>,
    values: Vec<i32>,
    delta: f32,
    bits: u8,
}

impl QuantTensor {
    pub fn new(shape: Vec<usize>, values: Vec<i32>, delta: f32, bits: u8) -> Result<Self> {
        let n = checked_numel(&shape)?;
        if n != values.len() {
            return Err(shape_err(format!("shape {shape:?} needs {n} values, got {}", values.len())));
        }
        if !(2..=16).contains(&bits) {
            return Err(crate::Error::InvalidArgument(format!("bit width {bits} outside [2, 16]")));
        }
        if !(delta.is_finite() && delta > 0.0) {
            return Err(crate::Error::InvalidArgument(format!("scale {delta} must be positive")));
        }
        let lo = -(1i32 << (bits - 1));
        let hi = (1i32 << (bits - 1)) - 1;
        if let Some(v) = values.iter().find(|v| !(lo..=hi).contains(*v)) {
            return Err(shape_err(format!("value {v} does not fit in {bits} bits")));
        }
        Ok(Self { shape, values, delta, bits })
    }

    /// Wraps values produced by [`QuantConfig::requantize`], which are in
    /// range by construction.
    pub(crate) fn from_grid(shape: Vec<usize>, values: Vec<i32>, cfg: &crate::quant::QuantConfig) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self { shape, values, delta: cfg.delta(), bits: cfg.bits() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[i32] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [i32] {
        &mut self.values
    }

    pub fn delta(&self) -> f32 {
        self.delta
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.values, self.delta, self.bits)
    }

    /// Real-valued view, `delta * q` per element.
    pub fn dequantize(&self) -> FloatTensor {
        let d = self.delta;
        FloatTensor { shape: self.shape.clone(), data: self.values.iter().map(|&q| d * q as f32).collect() }
    }
}

pub(crate) const WORD_BITS: usize = 64;

/// ±1 tensor packed one bit per element: bit 1 is +1, bit 0 is -1.
///
/// Element `i` lives at word `i / 64`, bit `i % 64`. Trailing bits of the last
/// word are always zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedBitTensor {
    shape: Vec<usize>,
    len: usize,
    words: Vec<u64>,
}

impl PackedBitTensor {
    /// Packs signs: `true` means +1.
    pub fn from_signs(shape: Vec<usize>, signs: impl IntoIterator<Item = bool>) -> Result<Self> {
        let len = checked_numel(&shape)?;
        let mut words = vec![0u64; len.div_ceil(WORD_BITS)];
        let mut count = 0usize;
        for (i, s) in signs.into_iter().enumerate() {
            if i >= len {
                return Err(shape_err(format!("more than {len} elements for shape {shape:?}")));
            }
            if s {
                words[i / WORD_BITS] |= 1 << (i % WORD_BITS);
            }
            count += 1;
        }
        if count != len {
            return Err(shape_err(format!("shape {shape:?} needs {len} elements, got {count}")));
        }
        Ok(Self { shape, len, words })
    }

    /// Packs a ±1 vector; any value `>= 0` maps to +1.
    pub fn from_values(shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        Self::from_signs(shape, values.iter().map(|&v| v >= 0.0))
    }

    pub(crate) fn from_words(shape: Vec<usize>, mut words: Vec<u64>) -> Result<Self> {
        let len = checked_numel(&shape)?;
        if words.len() != len.div_ceil(WORD_BITS) {
            return Err(shape_err(format!("{} words cannot hold {len} bits", words.len())));
        }
        let tail = len % WORD_BITS;
        if tail != 0 {
            if let Some(last) = words.last_mut() {
                *last &= (1u64 << tail) - 1;
            }
        }
        Ok(Self { shape, len, words })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        (self.words[i / WORD_BITS] >> (i % WORD_BITS)) & 1 == 1
    }

    pub(crate) fn toggle(&mut self, i: usize) {
        self.words[i / WORD_BITS] ^= 1 << (i % WORD_BITS);
    }

    /// Element value as ±1.
    pub fn value(&self, i: usize) -> i8 {
        if self.get(i) {
            1
        } else {
            -1
        }
    }

    pub fn to_values(&self) -> Vec<f32> {
        (0..self.len).map(|i| self.value(i) as f32).collect()
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::from_words(shape, self.words)
    }
}

/// Signed integer tensor holding accumulator results (e.g. popcount sums).
///
/// Values are real-domain quantities, not grid units.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntTensor {
    shape: Vec<usize>,
    data: Vec<i64>,
}

impl IntTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i64>) -> Result<Self> {
        let n = checked_numel(&shape)?;
        if n != data.len() {
            return Err(shape_err(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn to_float(&self) -> FloatTensor {
        FloatTensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| v as f32).collect() }
    }
}
