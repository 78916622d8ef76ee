//! Layer kernels for the three execution modes.
//!
//! A layer's behaviour follows from the storage of its parameters and the
//! domain of its input:
//!
//! * all-`Float` parameters: plain real arithmetic, real output;
//! * any `Quant` parameter: the layer emits grid values (`QuantTensor`) and
//!   accepts either grid input (`x_q`) or real input (`x_r`). Every parameter
//!   is brought into the input's domain before the arithmetic, so
//!   `delta * f(x_q) ~= f_float(delta * x_q)` with one re-rounding of error.

use crate::error::{shape_err, Error, Result};
use crate::kernels::{binary_conv2d, conv2d_float, conv2d_with, ConvGeometry};
use crate::quant::{requantize_to, QuantConfig};
use crate::tensor::{FloatTensor, IntTensor, PackedBitTensor, QuantTensor};

/// Layer kind, with its on-disk code as discriminant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum LayerKind {
    FirstConv = 0,
    Sign = 1,
    BinaryConv = 2,
    BatchNorm = 3,
    RPReLU = 4,
    MaxPool = 5,
    Flatten = 6,
    Linear = 7,
    ArgMax = 8,
}

/// Convolution/linear layers are L-type; everything in between is S-type.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerType {
    L,
    S,
}

impl LayerKind {
    pub const ALL: [LayerKind; 9] =
        [Self::FirstConv, Self::Sign, Self::BinaryConv, Self::BatchNorm, Self::RPReLU, Self::MaxPool, Self::Flatten, Self::Linear, Self::ArgMax];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn ltype(self) -> LayerType {
        match self {
            Self::FirstConv | Self::BinaryConv | Self::Linear => LayerType::L,
            _ => LayerType::S,
        }
    }

    /// Number of parameter tensors the kind carries.
    pub fn param_count(self) -> usize {
        match self {
            Self::FirstConv | Self::BinaryConv | Self::Linear => 1,
            Self::BatchNorm => 4,
            Self::RPReLU => 3,
            Self::Sign | Self::MaxPool | Self::Flatten | Self::ArgMax => 0,
        }
    }

    /// Kinds whose real-valued parameters get quantized.
    pub fn is_quantizable(self) -> bool {
        matches!(self, Self::FirstConv | Self::Linear | Self::BatchNorm | Self::RPReLU)
    }

    pub fn slug(self) -> &'static str {
        match self {
            Self::FirstConv => "conv",
            Self::Sign => "sign",
            Self::BinaryConv => "bconv",
            Self::BatchNorm => "bn",
            Self::RPReLU => "rprelu",
            Self::MaxPool => "maxpool",
            Self::Flatten => "flatten",
            Self::Linear => "linear",
            Self::ArgMax => "argmax",
        }
    }
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.slug())
    }
}

/// Storage class of a parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamDtype {
    F32,
    QInt,
    Bin1,
}

/// One stored parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub enum Param {
    Float(FloatTensor),
    Quant(QuantTensor),
    Binary(PackedBitTensor),
}

impl Param {
    pub fn dtype(&self) -> ParamDtype {
        match self {
            Self::Float(_) => ParamDtype::F32,
            Self::Quant(_) => ParamDtype::QInt,
            Self::Binary(_) => ParamDtype::Bin1,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Self::Float(t) => t.shape(),
            Self::Quant(t) => t.shape(),
            Self::Binary(t) => t.shape(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Float(t) => t.len(),
            Self::Quant(t) => t.len(),
            Self::Binary(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bits this tensor occupies in parameter memory.
    pub fn storage_bits(&self) -> u64 {
        let per = match self {
            Self::Float(_) => 32,
            Self::Quant(q) => q.bits() as u64,
            Self::Binary(_) => 1,
        };
        per * self.len() as u64
    }

    /// Element `i` in grid units (`real / delta`).
    #[inline]
    fn grid(&self, i: usize, delta: f64) -> f64 {
        match self {
            Self::Float(t) => t.data()[i] as f64 / delta,
            Self::Quant(t) => t.values()[i] as f64,
            Self::Binary(t) => t.value(i) as f64 / delta,
        }
    }

    /// Element `i` as a real number.
    #[inline]
    fn real(&self, i: usize) -> f64 {
        match self {
            Self::Float(t) => t.data()[i] as f64,
            Self::Quant(t) => t.delta() as f64 * t.values()[i] as f64,
            Self::Binary(t) => t.value(i) as f64,
        }
    }

    /// Real-valued copy.
    pub fn to_float(&self) -> FloatTensor {
        match self {
            Self::Float(t) => t.clone(),
            Self::Quant(t) => t.dequantize(),
            Self::Binary(t) => FloatTensor::new(t.shape().to_vec(), t.to_values()).expect("shape already validated"),
        }
    }
}

/// A layer: its kind, a unique name and its parameter tensors.
///
/// Parameter order is fixed per kind: conv/linear `[W]`, batchnorm
/// `[W, B, mu, sigma]`, rprelu `[slope, B1, B2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub name: String,
    pub params: Vec<Param>,
    /// Pooling window (MaxPool only; 0 otherwise).
    pub window: usize,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, params: Vec<Param>, window: usize) -> Result<Self> {
        let spec = Self { kind, name: String::new(), params, window };
        spec.validate()?;
        Ok(spec)
    }

    pub fn first_conv(weights: Param) -> Result<Self> {
        Self::new(LayerKind::FirstConv, vec![weights], 0)
    }

    pub fn binary_conv(weights: PackedBitTensor) -> Result<Self> {
        Self::new(LayerKind::BinaryConv, vec![Param::Binary(weights)], 0)
    }

    pub fn linear(weights: Param) -> Result<Self> {
        Self::new(LayerKind::Linear, vec![weights], 0)
    }

    pub fn batch_norm(weight: Param, bias: Param, mean: Param, sigma: Param) -> Result<Self> {
        Self::new(LayerKind::BatchNorm, vec![weight, bias, mean, sigma], 0)
    }

    pub fn rprelu(slope: Param, bias_in: Param, bias_out: Param) -> Result<Self> {
        Self::new(LayerKind::RPReLU, vec![slope, bias_in, bias_out], 0)
    }

    pub fn sign() -> Self {
        Self { kind: LayerKind::Sign, name: String::new(), params: vec![], window: 0 }
    }

    pub fn max_pool(window: usize) -> Result<Self> {
        Self::new(LayerKind::MaxPool, vec![], window)
    }

    pub fn flatten() -> Self {
        Self { kind: LayerKind::Flatten, name: String::new(), params: vec![], window: 0 }
    }

    pub fn argmax() -> Self {
        Self { kind: LayerKind::ArgMax, name: String::new(), params: vec![], window: 0 }
    }

    pub fn ltype(&self) -> LayerType {
        self.kind.ltype()
    }

    /// Whether any parameter lives on the integer grid.
    pub fn is_quantized(&self) -> bool {
        self.params.iter().any(|p| p.dtype() == ParamDtype::QInt)
    }

    /// Structural checks: parameter arity, ranks and dtypes.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::GraphShape(format!("{} layer: {msg}", self.kind)));
        if self.params.len() != self.kind.param_count() {
            return bad(format!("expected {} parameter tensors, got {}", self.kind.param_count(), self.params.len()));
        }
        match self.kind {
            LayerKind::FirstConv | LayerKind::BinaryConv => {
                let p = &self.params[0];
                if p.shape().len() != 4 {
                    return bad(format!("weights must be OIHW, got {:?}", p.shape()));
                }
                let binary = p.dtype() == ParamDtype::Bin1;
                if binary != (self.kind == LayerKind::BinaryConv) {
                    return bad(format!("weights cannot be stored as {:?}", p.dtype()));
                }
            }
            LayerKind::Linear => {
                let p = &self.params[0];
                if p.shape().len() != 2 {
                    return bad(format!("weights must be [out, in], got {:?}", p.shape()));
                }
                if p.dtype() == ParamDtype::Bin1 {
                    return bad("weights cannot be binary".into());
                }
            }
            LayerKind::BatchNorm | LayerKind::RPReLU => {
                let c = self.params[0].shape();
                if c.len() != 1 {
                    return bad(format!("parameters must be per-channel vectors, got {c:?}"));
                }
                for p in &self.params {
                    if p.shape() != c {
                        return bad(format!("mismatched parameter shapes {:?} vs {c:?}", p.shape()));
                    }
                    if p.dtype() == ParamDtype::Bin1 {
                        return bad("parameters cannot be binary".into());
                    }
                }
            }
            LayerKind::MaxPool => {
                if self.window == 0 {
                    return bad("pooling window must be positive".into());
                }
            }
            LayerKind::Sign | LayerKind::Flatten | LayerKind::ArgMax => {}
        }
        Ok(())
    }

    /// Runs the layer. `cfg` supplies the grid for quantized outputs.
    pub fn forward(&self, x: &Activation, cfg: Option<&QuantConfig>) -> Result<Activation> {
        match self.kind {
            LayerKind::FirstConv => first_conv_forward(x, self, cfg),
            LayerKind::BinaryConv => binary_conv_forward(x, self),
            LayerKind::Linear => last_linear_forward(x, self, cfg),
            LayerKind::BatchNorm => batchnorm_forward(x, self, cfg),
            LayerKind::RPReLU => rprelu_forward(x, self, cfg),
            LayerKind::Sign => sign_forward(x).map(Activation::Binary),
            LayerKind::MaxPool => max_pool_forward(x, self.window),
            LayerKind::Flatten => flatten_forward(x),
            LayerKind::ArgMax => argmax_output(x).map(Activation::Class),
        }
    }
}

/// A value flowing between layers.
#[derive(Clone, Debug, PartialEq)]
pub enum Activation {
    /// Real numbers (`x_r`).
    Real(FloatTensor),
    /// Grid values (`x_q`); the real value is `delta * q`.
    Grid(QuantTensor),
    /// ±1 values from a sign layer.
    Binary(PackedBitTensor),
    /// Integer popcount sums from a binary layer; real-domain values.
    Sums(IntTensor),
    /// Predicted class.
    Class(usize),
}

impl Activation {
    pub fn shape(&self) -> &[usize] {
        match self {
            Self::Real(t) => t.shape(),
            Self::Grid(t) => t.shape(),
            Self::Binary(t) => t.shape(),
            Self::Sums(t) => t.shape(),
            Self::Class(_) => &[],
        }
    }

    /// Real-valued view (grid values are dequantized, ±1 and sums converted).
    pub fn to_real(&self) -> Result<FloatTensor> {
        match self {
            Self::Real(t) => Ok(t.clone()),
            Self::Grid(t) => Ok(t.dequantize()),
            Self::Binary(t) => FloatTensor::new(t.shape().to_vec(), t.to_values()),
            Self::Sums(t) => Ok(t.to_float()),
            Self::Class(_) => Err(shape_err("a class index has no tensor view")),
        }
    }
}

fn need_cfg<'a>(cfg: Option<&'a QuantConfig>, spec: &LayerSpec) -> Result<&'a QuantConfig> {
    cfg.ok_or_else(|| Error::GraphShape(format!("layer `{}` holds quantized parameters but the graph has no scale", spec.name)))
}

/// Input as a flat real slice, borrowing when possible.
enum RealView<'a> {
    Borrowed(&'a FloatTensor),
    Owned(FloatTensor),
}

impl RealView<'_> {
    fn tensor(&self) -> &FloatTensor {
        match self {
            Self::Borrowed(t) => t,
            Self::Owned(t) => t,
        }
    }
}

fn real_view(x: &Activation) -> Result<RealView<'_>> {
    match x {
        Activation::Real(t) => Ok(RealView::Borrowed(t)),
        other => Ok(RealView::Owned(other.to_real()?)),
    }
}

fn conv_padding(weights: &[usize]) -> usize {
    weights[2] / 2
}

/// First L-type layer (stride 1, "same" zero padding).
///
/// With quantized weights the result `gamma` satisfies
/// `delta * gamma ~= conv(x_r, delta * W_q)`: real input accumulates
/// `x_r * W_q` directly, grid input accumulates `x_q * W_q` in checked
/// integers and rescales by `delta` before re-rounding.
pub fn first_conv_forward(x: &Activation, spec: &LayerSpec, cfg: Option<&QuantConfig>) -> Result<Activation> {
    let w = &spec.params[0];
    let pad = conv_padding(w.shape());
    match w {
        Param::Float(wf) => {
            let xr = real_view(x)?;
            Ok(Activation::Real(conv2d_float(xr.tensor(), wf, 1, pad)?))
        }
        Param::Quant(wq) => {
            let cfg = need_cfg(cfg, spec)?;
            let g = ConvGeometry::new(x.shape(), wq.shape(), 1, pad)?;
            let values = match x {
                Activation::Grid(xq) => {
                    let acc = conv2d_with(&g, xq.values(), wq.values(), Some(0i64), |a, x, w| a?.checked_add(x as i64 * w as i64));
                    let d = cfg.delta() as f64;
                    acc.into_iter().map(|a| a.map(|a| cfg.requantize(d * a as f64)).ok_or(Error::Overflow)).collect::<Result<Vec<_>>>()?
                }
                _ => {
                    let xr = real_view(x)?;
                    conv2d_with(&g, xr.tensor().data(), wq.values(), 0.0f64, |a, x, w| a + x as f64 * w as f64).into_iter().map(|a| cfg.requantize(a)).collect()
                }
            };
            Ok(Activation::Grid(QuantTensor::from_grid(g.output_shape(), values, cfg)))
        }
        Param::Binary(_) => Err(Error::GraphShape("first conv weights cannot be binary".into())),
    }
}

fn binary_conv_forward(x: &Activation, spec: &LayerSpec) -> Result<Activation> {
    let Param::Binary(w) = &spec.params[0] else {
        return Err(Error::GraphShape(format!("`{}` needs binary weights", spec.name)));
    };
    let Activation::Binary(xb) = x else {
        return Err(Error::GraphShape(format!("`{}` needs binarized input", spec.name)));
    };
    Ok(Activation::Sums(binary_conv2d(xb, w, 1, conv_padding(w.shape()))?))
}

/// Last L-type layer: `[N, in] x W[out, in]^T`. Same scaling rules as
/// [`first_conv_forward`].
pub fn last_linear_forward(x: &Activation, spec: &LayerSpec, cfg: Option<&QuantConfig>) -> Result<Activation> {
    let w = &spec.params[0];
    let (out_f, in_f) = (w.shape()[0], w.shape()[1]);
    let [n, k] = *x.shape() else {
        return Err(shape_err(format!("linear input must be [N, features], got {:?}", x.shape())));
    };
    if k != in_f {
        return Err(shape_err(format!("linear expects {in_f} features, got {k}")));
    }
    match w {
        Param::Float(wf) => {
            let xr = real_view(x)?;
            let (xd, wd) = (xr.tensor().data(), wf.data());
            let mut out = Vec::with_capacity(n * out_f);
            for i in 0..n {
                let row = &xd[i * k..(i + 1) * k];
                for o in 0..out_f {
                    let acc: f64 = row.iter().zip(&wd[o * k..(o + 1) * k]).map(|(&a, &b)| a as f64 * b as f64).sum();
                    out.push(acc as f32);
                }
            }
            Ok(Activation::Real(FloatTensor::new(vec![n, out_f], out)?))
        }
        Param::Quant(wq) => {
            let cfg = need_cfg(cfg, spec)?;
            let wv = wq.values();
            let mut out = Vec::with_capacity(n * out_f);
            match x {
                Activation::Grid(xq) => {
                    let d = cfg.delta() as f64;
                    let xv = xq.values();
                    let bound = grid_product_bound(xq.bits(), wq.bits());
                    for i in 0..n {
                        let row = &xv[i * k..(i + 1) * k];
                        for o in 0..out_f {
                            let wrow = &wv[o * k..(o + 1) * k];
                            let acc = if (k as u64) <= u64::MAX / bound {
                                row.iter().zip(wrow).map(|(&a, &b)| a as i64 * b as i64).sum::<i64>()
                            } else {
                                let mut acc = 0i64;
                                for (&a, &b) in row.iter().zip(wrow) {
                                    acc = acc.checked_add(a as i64 * b as i64).ok_or(Error::Overflow)?;
                                }
                                acc
                            };
                            out.push(cfg.requantize(d * acc as f64));
                        }
                    }
                }
                _ => {
                    let xr = real_view(x)?;
                    let xd = xr.tensor().data();
                    for i in 0..n {
                        let row = &xd[i * k..(i + 1) * k];
                        for o in 0..out_f {
                            let acc: f64 = row.iter().zip(&wv[o * k..(o + 1) * k]).map(|(&a, &b)| a as f64 * b as f64).sum();
                            out.push(cfg.requantize(acc));
                        }
                    }
                }
            }
            Ok(Activation::Grid(QuantTensor::from_grid(vec![n, out_f], out, cfg)))
        }
        Param::Binary(_) => Err(Error::GraphShape("linear weights cannot be binary".into())),
    }
}

/// Largest magnitude of one grid product, doubled so a sum of up to
/// `u64::MAX / bound` terms stays inside `i64`.
fn grid_product_bound(a_bits: u8, b_bits: u8) -> u64 {
    2 * (1u64 << (a_bits - 1)) * (1u64 << (b_bits - 1))
}

/// Channel of flat element `i` for a tensor whose axis 1 is the channel axis.
struct ChannelIndex {
    channels: usize,
    inner: usize,
}

impl ChannelIndex {
    fn new(shape: &[usize], channels: usize) -> Result<Self> {
        if shape.len() < 2 || shape[1] != channels {
            return Err(shape_err(format!("per-channel parameters of {channels} do not match input {shape:?}")));
        }
        Ok(Self { channels, inner: shape[2..].iter().product() })
    }

    /// Applies `f(coef[channel], x)` to every element, channel blocks in order.
    fn map<K, O>(&self, xs: &Elements, coef: &[K], f: impl Fn(&K, f64) -> O) -> Vec<O> {
        fn run<T: Copy, K, O>(v: &[T], inner: usize, coef: &[K], to: impl Fn(T) -> f64, f: impl Fn(&K, f64) -> O) -> Vec<O> {
            let mut out = Vec::with_capacity(v.len());
            for (b, block) in v.chunks(inner.max(1)).enumerate() {
                let k = &coef[b % coef.len()];
                out.extend(block.iter().map(|&x| f(k, to(x))));
            }
            out
        }
        match xs {
            Elements::Grid(v) => run(v, self.inner, coef, |x| x as f64, f),
            Elements::Real(r) => run(r.tensor().data(), self.inner, coef, |x| x as f64, f),
        }
    }

    /// Evaluates `f` per element: re-rounded onto the grid for quantized
    /// layers, narrowed to f32 otherwise. `coef` holds one entry per channel.
    #[allow(clippy::too_many_arguments)]
    fn apply<K>(
        &self,
        x: &Activation,
        xs: &Elements,
        quantized: bool,
        cfg: Option<&QuantConfig>,
        spec: &LayerSpec,
        coef: &[K],
        f: impl Fn(&K, f64) -> f64,
    ) -> Result<Activation> {
        debug_assert_eq!(coef.len(), self.channels);
        let shape = x.shape().to_vec();
        if quantized {
            let cfg = *need_cfg(cfg, spec)?;
            let m = cfg.qmax() as f64;
            // two passes: the affine pass and the rounding pass each vectorize
            let q = self.map(xs, coef, f).into_iter().map(|v| requantize_to(m, v)).collect();
            Ok(Activation::Grid(QuantTensor::from_grid(shape, q, &cfg)))
        } else {
            Ok(Activation::Real(FloatTensor::new(shape, self.map(xs, coef, |k, v| f(k, v) as f32))?))
        }
    }
}

/// Input element values and the domain they live in.
enum Elements<'a> {
    Grid(&'a [i32]),
    Real(RealView<'a>),
}

impl Elements<'_> {
    /// Grid input stays on the grid only for quantized layers.
    fn of(x: &Activation, quantized: bool) -> Result<Elements<'_>> {
        match x {
            Activation::Grid(q) if quantized => Ok(Elements::Grid(q.values())),
            Activation::Class(_) => Err(shape_err("layer input is a class index")),
            other => Ok(Elements::Real(real_view(other)?)),
        }
    }
}

/// Batch normalization, `W * (x - mu) / sigma + B`.
///
/// Quantized layers compute `gamma = W_q * (x - mu) / sigma + B_q` with `mu`
/// and `sigma` expressed in the input's own domain: grid input uses `mu_q`,
/// `sigma_q`; real input uses `mu_r`, `sigma_r`. `gamma` is re-rounded onto
/// the grid.
pub fn batchnorm_forward(x: &Activation, spec: &LayerSpec, cfg: Option<&QuantConfig>) -> Result<Activation> {
    let [w, b, mu, sigma] = &spec.params[..] else {
        return Err(Error::GraphShape("batchnorm needs four parameter tensors".into()));
    };
    let c = w.len();
    let chan = ChannelIndex::new(x.shape(), c)?;
    let quantized = spec.is_quantized();
    let elems = Elements::of(x, quantized)?;
    let delta = cfg.map_or(1.0, |c| c.delta() as f64);

    let mut coef = Vec::with_capacity(c);
    for i in 0..c {
        let (wi, bi) = if quantized { (w.grid(i, delta), b.grid(i, delta)) } else { (w.real(i), b.real(i)) };
        let (mi, si) = match elems {
            Elements::Grid(_) if quantized => (mu.grid(i, delta), sigma.grid(i, delta)),
            _ => (mu.real(i), sigma.real(i)),
        };
        coef.push((wi, bi, mi, si));
    }
    chan.apply(x, &elems, quantized, cfg, spec, &coef, |&(wi, bi, mi, si), x| wi * (x - mi) / si + bi)
}

/// `W * (x + B1) + B2` with `W = 1` when `x > -B1` and the learned slope
/// otherwise.
///
/// Grid input keeps the slope real and uses `B1_q`, `B2_q`; real input uses
/// `B1_r` and grid-scaled slopes (`W_q`, and `1 / delta` for the unit branch).
/// The branch test runs in the input's own domain.
pub fn rprelu_forward(x: &Activation, spec: &LayerSpec, cfg: Option<&QuantConfig>) -> Result<Activation> {
    let [slope, b1, b2] = &spec.params[..] else {
        return Err(Error::GraphShape("rprelu needs three parameter tensors".into()));
    };
    let c = slope.len();
    let chan = ChannelIndex::new(x.shape(), c)?;
    let quantized = spec.is_quantized();
    let elems = Elements::of(x, quantized)?;
    let delta = cfg.map_or(1.0, |c| c.delta() as f64);

    // (unit slope, learned slope, B1, B2) in the arithmetic's domain
    let mut coef = Vec::with_capacity(c);
    for i in 0..c {
        coef.push(match (&elems, quantized) {
            (_, false) => (1.0, slope.real(i), b1.real(i), b2.real(i)),
            (Elements::Grid(_), true) => (1.0, slope.real(i), b1.grid(i, delta), b2.grid(i, delta)),
            (Elements::Real(_), true) => (1.0 / delta, slope.grid(i, delta), b1.real(i), b2.grid(i, delta)),
        });
    }
    chan.apply(x, &elems, quantized, cfg, spec, &coef, |&(unit, s, bi, bo), x| {
        let z = x + bi;
        if z > 0.0 {
            unit * z + bo
        } else {
            s * z + bo
        }
    })
}

/// Binarizes with threshold 0 (`x >= 0` is +1) in whatever domain `x` lives.
///
/// Scaling by a positive `delta` does not move the threshold, so
/// `sign(x_q) == sign(delta * x_q)`. NaN maps to -1.
pub fn sign_forward(x: &Activation) -> Result<PackedBitTensor> {
    let shape = x.shape().to_vec();
    match x {
        Activation::Real(t) => PackedBitTensor::from_signs(shape, t.data().iter().map(|&v| v >= 0.0)),
        Activation::Grid(t) => PackedBitTensor::from_signs(shape, t.values().iter().map(|&v| v >= 0)),
        Activation::Sums(t) => PackedBitTensor::from_signs(shape, t.data().iter().map(|&v| v >= 0)),
        Activation::Binary(t) => Ok(t.clone()),
        Activation::Class(_) => Err(shape_err("cannot binarize a class index")),
    }
}

/// Index of the largest logit; ties go to the lowest index and NaN ranks
/// below every number.
pub fn argmax_output(x: &Activation) -> Result<usize> {
    fn first_max<T: Copy>(v: &[T], gt: impl Fn(T, T) -> bool) -> Result<usize> {
        if v.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut best = 0;
        for i in 1..v.len() {
            if gt(v[i], v[best]) {
                best = i;
            }
        }
        Ok(best)
    }
    let rows = x.shape().first().copied().unwrap_or(0);
    if x.shape().len() == 2 && rows != 1 {
        return Err(shape_err(format!("argmax expects a single row of logits, got {:?}", x.shape())));
    }
    match x {
        Activation::Real(t) => first_max(t.data(), |a: f32, b: f32| !a.is_nan() && (b.is_nan() || a > b)),
        Activation::Grid(t) => first_max(t.values(), |a, b| a > b),
        Activation::Sums(t) => first_max(t.data(), |a, b| a > b),
        Activation::Binary(t) => {
            let v: Vec<bool> = (0..t.len()).map(|i| t.get(i)).collect();
            first_max(&v, |a, b| a & !b)
        }
        Activation::Class(c) => Ok(*c),
    }
}

/// Non-overlapping max pooling (window = stride, trailing rows dropped).
pub fn max_pool_forward(x: &Activation, window: usize) -> Result<Activation> {
    let [n, c, h, w] = *x.shape() else {
        return Err(shape_err(format!("max pool input must be NCHW, got {:?}", x.shape())));
    };
    if window == 0 || h < window || w < window {
        return Err(shape_err(format!("pool window {window} does not fit {h}x{w}")));
    }
    let (oh, ow) = (h / window, w / window);
    let shape = vec![n, c, oh, ow];
    fn pool<T: Copy>(v: &[T], dims: [usize; 5], pick: impl Fn(T, T) -> T) -> Vec<T> {
        let [planes, h, w, k, _] = dims;
        let (oh, ow) = (h / k, w / k);
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let plane = &v[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut m = plane[oy * k * w + ox * k];
                    for dy in 0..k {
                        for dx in 0..k {
                            m = pick(m, plane[(oy * k + dy) * w + ox * k + dx]);
                        }
                    }
                    out.push(m);
                }
            }
        }
        out
    }
    let dims = [n * c, h, w, window, 0];
    match x {
        Activation::Real(t) => {
            let v = pool(t.data(), dims, |a: f32, b: f32| if a.is_nan() || b.is_nan() { f32::NAN } else { a.max(b) });
            Ok(Activation::Real(FloatTensor::new(shape, v)?))
        }
        Activation::Grid(t) => {
            let v = pool(t.values(), dims, i32::max);
            Ok(Activation::Grid(QuantTensor::new(shape, v, t.delta(), t.bits())?))
        }
        Activation::Sums(t) => Ok(Activation::Sums(IntTensor::new(shape, pool(t.data(), dims, i64::max))?)),
        Activation::Binary(t) => {
            let v: Vec<bool> = (0..t.len()).map(|i| t.get(i)).collect();
            Ok(Activation::Binary(PackedBitTensor::from_signs(shape, pool(&v, dims, |a, b| a | b))?))
        }
        Activation::Class(_) => Err(shape_err("cannot pool a class index")),
    }
}

/// `[N, ...] -> [N, prod(...)]`.
pub fn flatten_forward(x: &Activation) -> Result<Activation> {
    let shape = x.shape();
    let Some(&n) = shape.first() else {
        return Err(shape_err("cannot flatten a class index"));
    };
    let flat = vec![n, shape[1..].iter().product()];
    Ok(match x.clone() {
        Activation::Real(t) => Activation::Real(t.reshape(flat)?),
        Activation::Grid(t) => Activation::Grid(t.reshape(flat)?),
        Activation::Binary(t) => Activation::Binary(t.reshape(flat)?),
        Activation::Sums(t) => Activation::Sums(t.reshape(flat)?),
        Activation::Class(_) => unreachable!("class has empty shape"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fvec(v: &[f32]) -> Param {
        Param::Float(FloatTensor::new(vec![v.len()], v.to_vec()).unwrap())
    }

    fn qvec(v: &[i32], cfg: &QuantConfig) -> Param {
        Param::Quant(QuantTensor::new(vec![v.len()], v.to_vec(), cfg.delta(), cfg.bits()).unwrap())
    }

    fn grid(shape: &[usize], v: &[i32], cfg: &QuantConfig) -> Activation {
        Activation::Grid(QuantTensor::new(shape.to_vec(), v.to_vec(), cfg.delta(), cfg.bits()).unwrap())
    }

    fn grid_values(a: &Activation) -> Vec<i32> {
        match a {
            Activation::Grid(q) => q.values().to_vec(),
            other => panic!("expected grid output, got {other:?}"),
        }
    }

    #[test]
    fn kind_codes_round_trip() {
        for k in LayerKind::ALL {
            assert_eq!(LayerKind::from_code(k.code()), Some(k));
        }
        assert_eq!(LayerKind::from_code(9), None);
    }

    #[test]
    fn structural_validation() {
        assert!(LayerSpec::batch_norm(fvec(&[1.0]), fvec(&[0.0]), fvec(&[0.0]), fvec(&[1.0, 2.0])).is_err());
        assert!(LayerSpec::new(LayerKind::RPReLU, vec![fvec(&[1.0])], 0).is_err());
        assert!(LayerSpec::max_pool(0).is_err());
        let bits = PackedBitTensor::from_signs(vec![1, 1, 3, 3], [true; 9]).unwrap();
        assert!(LayerSpec::first_conv(Param::Binary(bits.clone())).is_err());
        assert!(LayerSpec::binary_conv(bits).is_ok());
    }

    #[test]
    fn batchnorm_identity_affine() {
        let cfg = QuantConfig::new(8, 0.1).unwrap();
        let spec = LayerSpec::batch_norm(qvec(&[1], &cfg), qvec(&[0], &cfg), qvec(&[0], &cfg), qvec(&[1], &cfg)).unwrap();
        let x = grid(&[1, 1, 2, 2], &[-5, 0, 3, 127], &cfg);
        assert_eq!(grid_values(&batchnorm_forward(&x, &spec, Some(&cfg)).unwrap()), vec![-5, 0, 3, 127]);
    }

    #[test]
    fn batchnorm_hand_arithmetic() {
        // 2 * (10 - 2) / 4 + 3 = 7
        let cfg = QuantConfig::new(8, 0.1).unwrap();
        let spec = LayerSpec::batch_norm(qvec(&[2], &cfg), qvec(&[3], &cfg), qvec(&[2], &cfg), qvec(&[4], &cfg)).unwrap();
        let out = batchnorm_forward(&grid(&[1, 1], &[10], &cfg), &spec, Some(&cfg)).unwrap();
        assert_eq!(grid_values(&out), vec![7]);
    }

    #[test]
    fn batchnorm_real_input_uses_real_statistics() {
        // W_q * (x_r - mu_r) / sigma_r + B_q with x_r = 6, mu_r = 2, sigma_r = 2
        let cfg = QuantConfig::new(8, 0.5).unwrap();
        let spec = LayerSpec::batch_norm(qvec(&[4], &cfg), qvec(&[-1], &cfg), fvec(&[2.0]), fvec(&[2.0])).unwrap();
        let x = Activation::Sums(IntTensor::new(vec![1, 1], vec![6]).unwrap());
        let out = batchnorm_forward(&x, &spec, Some(&cfg)).unwrap();
        assert_eq!(grid_values(&out), vec![7]);
        // float oracle: W = 2, B = -0.5 -> 2 * 2 - 0.5 = 3.5 = 7 * 0.5
    }

    #[test]
    fn batchnorm_rejects_channel_mismatch() {
        let spec = LayerSpec::batch_norm(fvec(&[1.0; 3]), fvec(&[0.0; 3]), fvec(&[0.0; 3]), fvec(&[1.0; 3])).unwrap();
        let x = Activation::Real(FloatTensor::zeros(vec![1, 2, 2, 2]).unwrap());
        assert!(matches!(batchnorm_forward(&x, &spec, None), Err(Error::Shape(_))));
    }

    #[test]
    fn rprelu_identity_and_slope_branch() {
        let cfg = QuantConfig::new(8, 0.1).unwrap();
        let spec = LayerSpec::rprelu(fvec(&[0.25]), qvec(&[0], &cfg), qvec(&[0], &cfg)).unwrap();
        let out = rprelu_forward(&grid(&[1, 1], &[9], &cfg), &spec, Some(&cfg)).unwrap();
        assert_eq!(grid_values(&out), vec![9]);

        // round(0.25 * (-10 + 2)) + 1 = -1
        let spec = LayerSpec::rprelu(fvec(&[0.25]), qvec(&[2], &cfg), qvec(&[1], &cfg)).unwrap();
        let out = rprelu_forward(&grid(&[1, 1], &[-10], &cfg), &spec, Some(&cfg)).unwrap();
        assert_eq!(grid_values(&out), vec![-1]);
    }

    #[test]
    fn rprelu_real_input_scales_both_branches() {
        // delta 0.5: slope_q = 1 (0.5), B2_q = 2 (1.0), B1_r = 1.0
        let cfg = QuantConfig::new(8, 0.5).unwrap();
        let spec = LayerSpec::rprelu(qvec(&[1], &cfg), fvec(&[1.0]), qvec(&[2], &cfg)).unwrap();
        let x = Activation::Real(FloatTensor::new(vec![1, 1, 1, 2], vec![3.0, -5.0]).unwrap());
        let out = rprelu_forward(&x, &spec, Some(&cfg)).unwrap();
        // float oracle: 3 + 1 + 1 = 5 -> 10; 0.5 * (-4) + 1 = -1 -> -2
        assert_eq!(grid_values(&out), vec![10, -2]);
    }

    #[test]
    fn sign_threshold_and_scale_invariance() {
        let x = Activation::Real(FloatTensor::new(vec![3], vec![0.0, -3.7, f32::NAN]).unwrap());
        assert_eq!(sign_forward(&x).unwrap().to_values(), vec![1.0, -1.0, -1.0]);
        let cfg = QuantConfig::new(16, 0.003).unwrap();
        let q = cfg.quantize(-3.7).unwrap();
        assert_eq!(sign_forward(&grid(&[1], &[q], &cfg)).unwrap().to_values(), vec![-1.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let v: Vec<i32> = (0..16).map(|_| rng.random_range(-300..=300)).collect();
            let g = grid(&[16], &v, &cfg);
            let real = Activation::Real(g.to_real().unwrap());
            assert_eq!(sign_forward(&g).unwrap(), sign_forward(&real).unwrap());
        }
    }

    #[test]
    fn argmax_examples() {
        let r = |v: &[f32]| Activation::Real(FloatTensor::new(vec![1, v.len()], v.to_vec()).unwrap());
        assert_eq!(argmax_output(&r(&[1.0, 2.0, 3.0])).unwrap(), 2);
        assert_eq!(argmax_output(&r(&[5.0, 5.0, 1.0])).unwrap(), 0);
        assert_eq!(argmax_output(&r(&[f32::NAN, -1.0, f32::NAN])).unwrap(), 1);
        assert_eq!(argmax_output(&r(&[f32::NAN, f32::INFINITY])).unwrap(), 1);

        let cfg = QuantConfig::new(16, 0.0173).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let v: Vec<i32> = (0..10).map(|_| rng.random_range(-40..=40)).collect();
            let g = grid(&[1, 10], &v, &cfg);
            let d = Activation::Real(g.to_real().unwrap());
            assert_eq!(argmax_output(&g).unwrap(), argmax_output(&d).unwrap());
        }
    }

    #[test]
    fn first_conv_examples() {
        let cfg = QuantConfig::new(8, 0.1).unwrap();
        let w = Param::Quant(QuantTensor::new(vec![1, 1, 1, 1], vec![3], 0.1, 8).unwrap());
        let spec = LayerSpec::first_conv(w).unwrap();
        let x = Activation::Real(FloatTensor::new(vec![1, 1, 1, 1], vec![10.0]).unwrap());
        assert_eq!(grid_values(&first_conv_forward(&x, &spec, Some(&cfg)).unwrap()), vec![30]);

        let w = Param::Quant(QuantTensor::new(vec![2, 1, 3, 3], vec![0; 18], 0.1, 8).unwrap());
        let spec = LayerSpec::first_conv(w).unwrap();
        let x = Activation::Real(FloatTensor::from_fn(vec![1, 1, 4, 4], |i| i as f32).unwrap());
        let out = grid_values(&first_conv_forward(&x, &spec, Some(&cfg)).unwrap());
        assert!(out.iter().all(|&v| v == 0));
    }

    #[test]
    fn max_pool_grid_matches_real() {
        let cfg = QuantConfig::new(12, 0.01).unwrap();
        let v: Vec<i32> = (0..32).map(|i| (i * 37 % 61) - 30).collect();
        let g = grid(&[1, 2, 4, 4], &v, &cfg);
        let pooled = max_pool_forward(&g, 2).unwrap();
        let real_pooled = max_pool_forward(&Activation::Real(g.to_real().unwrap()), 2).unwrap();
        assert_eq!(pooled.to_real().unwrap(), real_pooled.to_real().unwrap());
        assert_eq!(pooled.shape(), &[1, 2, 2, 2]);
    }

    #[test]
    fn linear_quant_grid_input() {
        // delta * sum(x_q * w_q) = 0.5 * (2*3 + 4*-1) = 1 -> grid 1
        let cfg = QuantConfig::new(8, 0.5).unwrap();
        let w = Param::Quant(QuantTensor::new(vec![1, 2], vec![3, -1], 0.5, 8).unwrap());
        let spec = LayerSpec::linear(w).unwrap();
        let out = last_linear_forward(&grid(&[1, 2], &[2, 4], &cfg), &spec, Some(&cfg)).unwrap();
        assert_eq!(grid_values(&out), vec![1]);
    }
}
