//! The three arithmetic kernels every layer reduces to: real-valued
//! convolution and matrix products, checked integer accumulation, and
//! XNOR/popcount binary products.
//!
//! Accumulation order is fixed (input channel, then kernel row, then kernel
//! column) so repeated runs are bit-identical.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{FloatTensor, IntTensor, PackedBitTensor, QuantTensor, WORD_BITS};

/// Output geometry of a 2-D cross-correlation over NCHW input and OIHW weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weights: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let [batch, in_channels, in_h, in_w] = *input else {
            return Err(shape_err(format!("conv input must be NCHW, got {input:?}")));
        };
        let [out_channels, w_in, kernel_h, kernel_w] = *weights else {
            return Err(shape_err(format!("conv weights must be OIHW, got {weights:?}")));
        };
        if stride == 0 {
            return Err(shape_err("stride must be positive"));
        }
        if w_in != in_channels {
            return Err(shape_err(format!("weights expect {w_in} input channels, input has {in_channels}")));
        }
        if in_h + 2 * padding < kernel_h || in_w + 2 * padding < kernel_w {
            return Err(shape_err(format!("kernel {kernel_h}x{kernel_w} larger than padded input {}x{}", in_h + 2 * padding, in_w + 2 * padding)));
        }
        Ok(Self {
            batch,
            in_channels,
            in_h,
            in_w,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (in_h + 2 * padding - kernel_h) / stride + 1,
            out_w: (in_w + 2 * padding - kernel_w) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h, self.out_w]
    }

    /// Kernel taps `lo..hi` that land inside the input for output `out`.
    #[inline]
    fn tap_range(&self, out: usize, kernel: usize, extent: usize) -> (usize, usize) {
        let start = out * self.stride;
        let lo = self.padding.saturating_sub(start);
        let hi = kernel.min((extent + self.padding).saturating_sub(start));
        (lo, hi.max(lo))
    }
}

/// Generic zero-padded cross-correlation. Padded taps are skipped.
pub(crate) fn conv2d_with<X: Copy, W: Copy, A: Copy>(g: &ConvGeometry, input: &[X], weights: &[W], zero: A, mac: impl Fn(A, X, W) -> A) -> Vec<A> {
    let mut out = Vec::with_capacity(g.batch * g.out_channels * g.out_h * g.out_w);
    let plane = g.in_h * g.in_w;
    let kplane = g.kernel_h * g.kernel_w;
    let rows: Vec<(usize, usize)> = (0..g.out_h).map(|o| g.tap_range(o, g.kernel_h, g.in_h)).collect();
    let cols: Vec<(usize, usize)> = (0..g.out_w).map(|o| g.tap_range(o, g.kernel_w, g.in_w)).collect();
    for n in 0..g.batch {
        let img = &input[n * g.in_channels * plane..(n + 1) * g.in_channels * plane];
        for o in 0..g.out_channels {
            let wo = &weights[o * g.in_channels * kplane..(o + 1) * g.in_channels * kplane];
            for (oy, &(ky0, ky1)) in rows.iter().enumerate() {
                for (ox, &(kx0, kx1)) in cols.iter().enumerate() {
                    // input coordinates are oy * stride + ky - padding, never negative here
                    let y0 = oy * g.stride + ky0 - g.padding;
                    let x0 = ox * g.stride + kx0 - g.padding;
                    let mut acc = zero;
                    for c in 0..g.in_channels {
                        let ch = &img[c * plane..(c + 1) * plane];
                        let wc = &wo[c * kplane..(c + 1) * kplane];
                        for (dy, ky) in (ky0..ky1).enumerate() {
                            let row = &ch[(y0 + dy) * g.in_w + x0..][..kx1 - kx0];
                            let wrow = &wc[ky * g.kernel_w + kx0..][..kx1 - kx0];
                            for (&x, &w) in row.iter().zip(wrow) {
                                acc = mac(acc, x, w);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

/// Real-valued cross-correlation, double-precision accumulation.
pub fn conv2d_float(input: &FloatTensor, weights: &FloatTensor, stride: usize, padding: usize) -> Result<FloatTensor> {
    let g = ConvGeometry::new(input.shape(), weights.shape(), stride, padding)?;
    let acc = conv2d_with(&g, input.data(), weights.data(), 0.0f64, |a, x, w| a + x as f64 * w as f64);
    FloatTensor::new(g.output_shape(), acc.into_iter().map(|v| v as f32).collect())
}

/// `2 * popcount(XNOR(w, a)) - n` over `n` packed elements.
#[inline]
pub(crate) fn xnor_dot_words(w: &[u64], a: &[u64], n: usize) -> i64 {
    let full = n / WORD_BITS;
    let mut pc: u32 = 0;
    for i in 0..full {
        pc += (!(w[i] ^ a[i])).count_ones();
    }
    let tail = n % WORD_BITS;
    if tail != 0 {
        let mask = (1u64 << tail) - 1;
        pc += (!(w[full] ^ a[full]) & mask).count_ones();
    }
    2 * pc as i64 - n as i64
}

/// ±1 dot product of two packed vectors of `n` elements.
pub fn binary_dot(w: &PackedBitTensor, a: &PackedBitTensor, n: usize) -> Result<i64> {
    if w.len() != n || a.len() != n {
        return Err(shape_err(format!("binary_dot over {n} elements given operands of {} and {}", w.len(), a.len())));
    }
    Ok(xnor_dot_words(w.words(), a.words(), n))
}

/// Binary cross-correlation. Padded positions read as -1.
///
/// Each receptive field is gathered into one packed patch vector ordered like
/// the weights (channel, kernel row, kernel column), so every output is a
/// single XNOR/popcount dot product.
pub fn binary_conv2d(input: &PackedBitTensor, weights: &PackedBitTensor, stride: usize, padding: usize) -> Result<IntTensor> {
    let g = ConvGeometry::new(input.shape(), weights.shape(), stride, padding)?;
    let kplane = g.kernel_h * g.kernel_w;
    let patch_len = g.in_channels * kplane;
    let pw = patch_len.div_ceil(WORD_BITS);
    let wd = weights.words();
    let plane = g.in_h * g.in_w;
    let positions = g.out_h * g.out_w;
    let mut patches = vec![0u64; positions * pw];
    let mut out = vec![0i64; g.batch * g.out_channels * positions];
    let mut wrow = vec![0u64; pw];
    for n in 0..g.batch {
        patches.fill(0);
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let patch = &mut patches[(oy * g.out_w + ox) * pw..][..pw];
                let (kx0, kx1) = g.tap_range(ox, g.kernel_w, g.in_w);
                let x0 = ox * g.stride + kx0 - g.padding;
                let mut bit = 0;
                for c in 0..g.in_channels {
                    let base = (n * g.in_channels + c) * plane;
                    for ky in 0..g.kernel_h {
                        let iy = (oy * g.stride + ky).checked_sub(g.padding).filter(|&y| y < g.in_h);
                        if let Some(iy) = iy.filter(|_| kx1 > kx0) {
                            // in-bounds taps of this kernel row are consecutive input bits
                            let run = read_bits(input.words(), base + iy * g.in_w + x0, kx1 - kx0);
                            or_bits(patch, bit + kx0, run);
                        }
                        bit += g.kernel_w;
                    }
                }
            }
        }
        for o in 0..g.out_channels {
            extract_bits(wd, o * patch_len, patch_len, &mut wrow);
            let dst = &mut out[(n * g.out_channels + o) * positions..][..positions];
            for (p, d) in dst.iter_mut().enumerate() {
                *d = xnor_dot_words(&wrow, &patches[p * pw..][..pw], patch_len);
            }
        }
    }
    IntTensor::new(g.output_shape(), out)
}

/// `len <= 64` bits starting at bit `start`, LSB first.
#[inline]
fn read_bits(src: &[u64], start: usize, len: usize) -> u64 {
    let (word, shift) = (start / WORD_BITS, start % WORD_BITS);
    let mut v = src[word] >> shift;
    if shift != 0 && shift + len > WORD_BITS {
        v |= src[word + 1] << (WORD_BITS - shift);
    }
    if len < WORD_BITS {
        v &= (1u64 << len) - 1;
    }
    v
}

/// ORs a bit run (at most 64 bits, already masked) into `dst` at bit `at`.
#[inline]
fn or_bits(dst: &mut [u64], at: usize, run: u64) {
    let (word, shift) = (at / WORD_BITS, at % WORD_BITS);
    dst[word] |= run << shift;
    if shift != 0 {
        let spill = run >> (WORD_BITS - shift);
        if spill != 0 {
            dst[word + 1] |= spill;
        }
    }
}

/// Copies `len` bits starting at bit `start` of `src` into `dst` (zero tail).
fn extract_bits(src: &[u64], start: usize, len: usize, dst: &mut [u64]) {
    let (word, shift) = (start / WORD_BITS, start % WORD_BITS);
    for (i, d) in dst.iter_mut().enumerate() {
        let lo = src.get(word + i).copied().unwrap_or(0) >> shift;
        let hi = if shift == 0 { 0 } else { src.get(word + i + 1).copied().unwrap_or(0) << (WORD_BITS - shift) };
        *d = lo | hi;
    }
    let tail = len % WORD_BITS;
    if tail != 0 {
        if let Some(last) = dst.last_mut() {
            *last &= (1u64 << tail) - 1;
        }
    }
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    match (a, b) {
        ([m, k], [k2, n]) if k == k2 => Ok((*m, *k, *n)),
        _ => Err(shape_err(format!("cannot multiply {a:?} by {b:?}"))),
    }
}

/// `a[m,k] x b[k,n]` with double-precision accumulation.
pub fn matmul_rows(a: &FloatTensor, b: &FloatTensor) -> Result<FloatTensor> {
    let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            let acc: f64 = (0..k).map(|t| ad[i * k + t] as f64 * bd[t * n + j] as f64).sum();
            out.push(acc as f32);
        }
    }
    FloatTensor::new(vec![m, n], out)
}

/// Integer `a[m,k] x b[k,n]` in 64-bit accumulators; overflow is an error.
pub fn matmul_rows_int(a: &QuantTensor, b: &QuantTensor) -> Result<IntTensor> {
    let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
    let (av, bv) = (a.values(), b.values());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0i64;
            for t in 0..k {
                acc = mac_checked(acc, av[i * k + t] as i64, bv[t * n + j] as i64)?;
            }
            out.push(acc);
        }
    }
    IntTensor::new(vec![m, n], out)
}

#[inline]
pub(crate) fn mac_checked(acc: i64, x: i64, w: i64) -> Result<i64> {
    x.checked_mul(w).and_then(|p| acc.checked_add(p)).ok_or(Error::Overflow)
}

/// Checked integer dot product.
pub fn dot_i64(a: &[i64], b: &[i64]) -> Result<i64> {
    if a.len() != b.len() {
        return Err(shape_err(format!("dot of {} and {} elements", a.len(), b.len())));
    }
    a.iter().zip(b).try_fold(0i64, |acc, (&x, &w)| mac_checked(acc, x, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ft(shape: &[usize], data: Vec<f32>) -> FloatTensor {
        FloatTensor::new(shape.to_vec(), data).unwrap()
    }

    fn pm1(shape: &[usize], signs: &[bool]) -> PackedBitTensor {
        PackedBitTensor::from_signs(shape.to_vec(), signs.iter().copied()).unwrap()
    }

    #[test]
    fn conv_all_ones_sums_window() {
        let x = ft(&[1, 1, 3, 3], vec![1.0; 9]);
        let w = ft(&[1, 1, 3, 3], vec![1.0; 9]);
        let y = conv2d_float(&x, &w, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_zero_weights_gives_zero() {
        let x = ft(&[1, 2, 4, 4], (0..32).map(|v| v as f32 - 7.5).collect());
        let w = ft(&[3, 2, 3, 3], vec![0.0; 54]);
        let y = conv2d_float(&x, &w, 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_ramp_stride_two() {
        // windows pair up (0,5), (2,7), (8,13), (10,15)
        let x = ft(&[1, 1, 4, 4], (0..16).map(|v| v as f32).collect());
        let w = ft(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let y = conv2d_float(&x, &w, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[5.0, 9.0, 21.0, 25.0]);
    }

    #[test]
    fn conv_shape_errors() {
        let x = ft(&[1, 2, 3, 3], vec![0.0; 18]);
        let w = ft(&[1, 1, 3, 3], vec![0.0; 9]);
        assert!(matches!(conv2d_float(&x, &w, 1, 0), Err(Error::Shape(_))));
        let w = ft(&[1, 2, 5, 5], vec![0.0; 50]);
        assert!(matches!(conv2d_float(&x, &w, 1, 0), Err(Error::Shape(_))));
        assert!(conv2d_float(&x, &w, 1, 1).is_ok());
    }

    #[test]
    fn binary_dot_examples() {
        let a = pm1(&[8], &[true, false, true, true, false, false, true, false]);
        assert_eq!(binary_dot(&a, &a, 8).unwrap(), 8);
        let c = pm1(&[8], &[false, true, false, false, true, true, false, true]);
        assert_eq!(binary_dot(&a, &c, 8).unwrap(), -8);
        let w = pm1(&[4], &[true, false, true, false]);
        let x = pm1(&[4], &[true, true, false, false]);
        assert_eq!(binary_dot(&w, &x, 4).unwrap(), 0);
        assert!(matches!(binary_dot(&w, &a, 4), Err(Error::Shape(_))));
    }

    #[test]
    fn binary_dot_exhaustive_small() {
        for n in 1..=10usize {
            for wbits in 0u32..(1 << n) {
                for abits in 0u32..(1 << n) {
                    let ws: Vec<bool> = (0..n).map(|i| wbits >> i & 1 == 1).collect();
                    let as_: Vec<bool> = (0..n).map(|i| abits >> i & 1 == 1).collect();
                    let expect: i64 = ws.iter().zip(&as_).map(|(&p, &q)| if p == q { 1 } else { -1 }).sum();
                    let got = binary_dot(&pm1(&[n], &ws), &pm1(&[n], &as_), n).unwrap();
                    assert_eq!(got, expect);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn binary_dot_matches_arithmetic(pairs in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..=64)) {
            let n = pairs.len();
            let ws: Vec<bool> = pairs.iter().map(|p| p.0).collect();
            let as_: Vec<bool> = pairs.iter().map(|p| p.1).collect();
            let expect: i64 = pairs.iter().map(|&(p, q)| (if p { 1 } else { -1 }) * (if q { 1 } else { -1 })).sum();
            prop_assert_eq!(binary_dot(&pm1(&[n], &ws), &pm1(&[n], &as_), n).unwrap(), expect);
        }
    }

    #[test]
    fn binary_conv_constant_operands() {
        let x = pm1(&[1, 1, 5, 5], &[true; 25]);
        let w = pm1(&[1, 1, 3, 3], &[true; 9]);
        let y = binary_conv2d(&x, &w, 1, 0).unwrap();
        assert!(y.data().iter().all(|&v| v == 9));
        let w = pm1(&[1, 1, 3, 3], &[false; 9]);
        let y = binary_conv2d(&x, &w, 1, 0).unwrap();
        assert!(y.data().iter().all(|&v| v == -9));
    }

    #[test]
    fn binary_conv_padding_reads_minus_one() {
        // corner output with pad 1 sees 5 padded taps (-1) and 4 real (+1)
        let x = pm1(&[1, 1, 3, 3], &[true; 9]);
        let w = pm1(&[1, 1, 3, 3], &[true; 9]);
        let y = binary_conv2d(&x, &w, 1, 1).unwrap();
        assert_eq!(y.data()[0], 4 - 5);
        assert_eq!(y.data()[4], 9);
    }

    #[test]
    fn binary_conv_matches_float_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let xs: Vec<bool> = (0..25).map(|_| rng.random()).collect();
            let ws: Vec<bool> = (0..9).map(|_| rng.random()).collect();
            let x = pm1(&[1, 1, 5, 5], &xs);
            let w = pm1(&[1, 1, 3, 3], &ws);
            let got = binary_conv2d(&x, &w, 1, 0).unwrap();
            let xf = ft(&[1, 1, 5, 5], x.to_values());
            let wf = ft(&[1, 1, 3, 3], w.to_values());
            let want = conv2d_float(&xf, &wf, 1, 0).unwrap();
            let want: Vec<i64> = want.data().iter().map(|&v| v as i64).collect();
            assert_eq!(got.data(), &want[..]);
        }
    }

    #[test]
    fn matmul_examples() {
        let a = ft(&[1, 2], vec![3.0, 4.0]);
        let b = ft(&[2, 1], vec![5.0, 6.0]);
        assert_eq!(matmul_rows(&a, &b).unwrap().data(), &[39.0]);

        let x = ft(&[2, 3], vec![1.0, -2.0, 3.5, 0.25, 8.0, -1.0]);
        let eye = FloatTensor::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }).unwrap();
        assert_eq!(matmul_rows(&x, &eye).unwrap(), x);

        let q = QuantTensor::new(vec![1, 2], vec![100, -100], 0.5, 16).unwrap();
        let r = QuantTensor::new(vec![2, 1], vec![200, 200], 0.5, 16).unwrap();
        assert_eq!(matmul_rows_int(&q, &r).unwrap().data(), &[0]);

        assert!(matches!(matmul_rows(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn integer_overflow_is_detected() {
        // 2^62 fits, 2 * 2^62 does not
        let big = 1i64 << 31;
        assert!(dot_i64(&[big], &[big]).is_ok());
        assert!(matches!(dot_i64(&[big, big], &[big, big]), Err(Error::Overflow)));
        assert!(matches!(dot_i64(&[i64::MAX], &[2]), Err(Error::Overflow)));
    }

    #[test]
    fn kernels_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = FloatTensor::from_fn(vec![1, 3, 7, 7], |_| rng.random_range(-1.0..1.0)).unwrap();
        let w = FloatTensor::from_fn(vec![4, 3, 3, 3], |_| rng.random_range(-1.0..1.0)).unwrap();
        let a = conv2d_float(&x, &w, 1, 1).unwrap();
        let b = conv2d_float(&x, &w, 1, 1).unwrap();
        let bits = |t: &FloatTensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
