//! Model file encoding.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "ZBNN" | u16 version = 1 | u8 mode | u8 bits | f32 delta | u16 layer count
//! per layer: u8 kind | u8 dtype | u8 rank | u32 extents[rank] | [u8 mask] | payload
//! ```
//!
//! Dtype codes: 0 = f32, 1 = i16 grid values, 2 = packed bits (LSB first,
//! row-major), 3 = mixed. Mixed layers carry a mask byte after the extents;
//! bit `i` set means parameter tensor `i` is stored as i16, clear as f32.
//! Multi-tensor layers (batchnorm, rprelu) store every tensor with the same
//! extents, back to back. Max pooling stores its window as the single extent
//! and no payload.
//!
//! Conventional graphs are stored without their Q/D nodes; loading wraps
//! every quantized layer again.

use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{ExecMode, NetworkGraph, Node};
use crate::layers::{LayerKind, LayerSpec, Param, ParamDtype};
use crate::quant::QuantConfig;
use crate::tensor::{FloatTensor, PackedBitTensor, QuantTensor, WORD_BITS};
use crate::transform::wrap_conventional;

pub const MAGIC: &[u8; 4] = b"ZBNN";
pub const VERSION: u16 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_QINT: u8 = 1;
const DTYPE_BIN: u8 = 2;
const DTYPE_MIXED: u8 = 3;

/// Byte cursor whose reads fail with [`Error::TruncatedFile`].
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(Error::TruncatedFile { offset: self.pos, needed: n - available });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }
}

fn dtype_code(params: &[Param]) -> Result<(u8, Option<u8>)> {
    let Some(first) = params.first() else {
        return Ok((DTYPE_F32, None));
    };
    if params.iter().all(|p| p.dtype() == first.dtype()) {
        return Ok((
            match first.dtype() {
                ParamDtype::F32 => DTYPE_F32,
                ParamDtype::QInt => DTYPE_QINT,
                ParamDtype::Bin1 => DTYPE_BIN,
            },
            None,
        ));
    }
    let mut mask = 0u8;
    for (i, p) in params.iter().enumerate() {
        match p.dtype() {
            ParamDtype::QInt => mask |= 1 << i,
            ParamDtype::F32 => {}
            ParamDtype::Bin1 => return Err(Error::GraphShape("binary tensors cannot be mixed".into())),
        }
    }
    Ok((DTYPE_MIXED, Some(mask)))
}

fn write_param(out: &mut Vec<u8>, p: &Param) -> Result<()> {
    match p {
        Param::Float(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Param::Quant(t) => {
            for &v in t.values() {
                let v = i16::try_from(v).map_err(|_| Error::InvalidArgument(format!("grid value {v} exceeds i16")))?;
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Param::Binary(t) => {
            let n = t.len().div_ceil(8);
            let bytes: Vec<u8> = t.words().iter().flat_map(|w| w.to_le_bytes()).take(n).collect();
            out.extend_from_slice(&bytes);
        }
    }
    Ok(())
}

/// Canonical encoding: equal graphs give equal bytes.
pub fn save_model(net: &NetworkGraph) -> Result<Vec<u8>> {
    let layers: Vec<&LayerSpec> = net.layers().collect();
    let count = u16::try_from(layers.len()).map_err(|_| Error::InvalidArgument("more than 65535 layers".into()))?;
    let (bits, delta) = net.quant().map_or((0, 0.0), |c| (c.bits(), c.delta()));
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(net.mode().code());
    out.push(bits);
    out.extend_from_slice(&delta.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for l in layers {
        let (dtype, mask) = dtype_code(&l.params)?;
        let extents: Vec<usize> = match l.kind {
            LayerKind::MaxPool => vec![l.window],
            _ => l.params.first().map_or_else(Vec::new, |p| p.shape().to_vec()),
        };
        out.extend_from_slice(&[l.kind.code(), dtype, extents.len() as u8]);
        for e in extents {
            let e = u32::try_from(e).map_err(|_| Error::InvalidArgument(format!("extent {e} exceeds u32")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        if let Some(m) = mask {
            out.push(m);
        }
        for p in &l.params {
            write_param(&mut out, p)?;
        }
    }
    Ok(out)
}

fn read_param(r: &mut Reader, dtype: u8, shape: &[usize], quant: Option<&QuantConfig>) -> Result<Param> {
    let n: usize = shape.iter().product();
    let size_err = || Error::PayloadLengthMismatch(format!("tensor {shape:?} is too large"));
    match dtype {
        DTYPE_F32 => {
            let bytes = r.take(n.checked_mul(4).ok_or_else(size_err)?)?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Ok(Param::Float(FloatTensor::new(shape.to_vec(), data)?))
        }
        DTYPE_QINT => {
            let cfg = quant.ok_or_else(|| Error::GraphShape("grid values in a file without a scale".into()))?;
            let bytes = r.take(n.checked_mul(2).ok_or_else(size_err)?)?;
            let values = bytes.chunks_exact(2).map(|c| i16::from_le_bytes(c.try_into().unwrap()) as i32).collect();
            Ok(Param::Quant(QuantTensor::new(shape.to_vec(), values, cfg.delta(), cfg.bits())?))
        }
        DTYPE_BIN => {
            let bytes = r.take(n.div_ceil(8))?;
            let mut words = vec![0u64; n.div_ceil(WORD_BITS)];
            for (i, &b) in bytes.iter().enumerate() {
                words[i / 8] |= (b as u64) << (8 * (i % 8));
            }
            Ok(Param::Binary(PackedBitTensor::from_words(shape.to_vec(), words)?))
        }
        other => Err(Error::PayloadLengthMismatch(format!("unknown dtype code {other}"))),
    }
}

fn read_layer(r: &mut Reader, quant: Option<&QuantConfig>) -> Result<LayerSpec> {
    let code = r.u8()?;
    let kind = LayerKind::from_code(code).ok_or_else(|| Error::PayloadLengthMismatch(format!("unknown layer kind {code}")))?;
    let dtype = r.u8()?;
    let rank = r.u8()? as usize;
    let extents = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
    let mask = if dtype == DTYPE_MIXED { Some(r.u8()?) } else { None };
    if kind == LayerKind::MaxPool {
        let [window] = extents[..] else {
            return Err(Error::PayloadLengthMismatch(format!("max pool needs one extent, got {rank}")));
        };
        return LayerSpec::max_pool(window);
    }
    let count = kind.param_count();
    if count == 0 && rank != 0 {
        return Err(Error::PayloadLengthMismatch(format!("{kind} layers carry no tensors, got rank {rank}")));
    }
    let params = (0..count)
        .map(|i| {
            let d = match mask {
                Some(m) if m & (1 << i) != 0 => DTYPE_QINT,
                Some(_) => DTYPE_F32,
                None => dtype,
            };
            read_param(r, d, &extents, quant)
        })
        .collect::<Result<Vec<_>>>()?;
    LayerSpec::new(kind, params, 0)
}

pub fn load_model(bytes: &[u8]) -> Result<NetworkGraph> {
    let mut r = Reader { bytes, pos: 0 };
    if &r.array::<4>()? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let mode_code = r.u8()?;
    let mode = ExecMode::from_code(mode_code).ok_or_else(|| Error::PayloadLengthMismatch(format!("unknown mode code {mode_code}")))?;
    let bits = r.u8()?;
    let delta = r.f32()?;
    let count = r.u16()?;
    let quant = match (mode, bits) {
        (ExecMode::Float, _) | (_, 0) => None,
        _ => Some(QuantConfig::new(bits, delta)?),
    };
    let layers = (0..count).map(|_| read_layer(&mut r, quant.as_ref())).collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(Error::PayloadLengthMismatch(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    match (mode, quant) {
        (ExecMode::Conventional, Some(cfg)) => wrap_conventional(layers, cfg),
        _ => NetworkGraph::new(mode, quant, layers.into_iter().map(Node::Layer).collect()),
    }
}

pub fn load_model_file(path: impl AsRef<Path>) -> Result<NetworkGraph> {
    load_model(&std::fs::read(path)?)
}

pub fn save_model_file(net: &NetworkGraph, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, save_model(net)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform::transform_all;

    fn fvec(v: &[f32]) -> Param {
        Param::Float(FloatTensor::new(vec![v.len()], v.to_vec()).unwrap())
    }

    fn net() -> NetworkGraph {
        let w = FloatTensor::from_fn(vec![2, 1, 3, 3], |i| i as f32 / 10.0 - 0.8).unwrap();
        let bw = PackedBitTensor::from_signs(vec![2, 2, 3, 3], (0..36).map(|i| i % 3 != 1)).unwrap();
        let lw = FloatTensor::from_fn(vec![3, 2], |i| i as f32 - 2.5).unwrap();
        NetworkGraph::from_layers(
            ExecMode::Float,
            None,
            vec![
                LayerSpec::first_conv(Param::Float(w)).unwrap(),
                LayerSpec::batch_norm(fvec(&[1.0, 2.0]), fvec(&[0.5, 0.0]), fvec(&[0.1, 0.2]), fvec(&[0.9, 1.1])).unwrap(),
                LayerSpec::sign(),
                LayerSpec::binary_conv(bw).unwrap(),
                LayerSpec::batch_norm(fvec(&[1.0, 2.0]), fvec(&[0.5, 0.0]), fvec(&[0.1, 0.2]), fvec(&[3.0, 4.0])).unwrap(),
                LayerSpec::rprelu(fvec(&[0.25, 0.5]), fvec(&[0.0, 0.1]), fvec(&[-0.1, 0.0])).unwrap(),
                LayerSpec::max_pool(2).unwrap(),
                LayerSpec::flatten(),
                LayerSpec::linear(Param::Float(lw)).unwrap(),
                LayerSpec::argmax(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn header_bytes_are_fixed() {
        let b = save_model(&NetworkGraph::from_layers(ExecMode::Float, None, vec![LayerSpec::argmax()]).unwrap()).unwrap();
        assert_eq!(b, [b'Z', b'B', b'N', b'N', 1, 0, 0, 0, 0, 0, 0, 0, 1, 0, 8, 0, 0]);
    }

    #[test]
    fn all_modes_round_trip() {
        let t = transform_all(&net(), 12).unwrap();
        for g in [net(), t.conventional, t.zero_overhead] {
            let bytes = save_model(&g).unwrap();
            let back = load_model(&bytes).unwrap();
            assert_eq!(back, g);
            assert_eq!(save_model(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn binary_payload_is_lsb_first() {
        let bw = PackedBitTensor::from_signs(vec![1, 1, 3, 3], [true, false, false, false, false, false, false, false, true]).unwrap();
        let g = NetworkGraph::from_layers(ExecMode::Float, None, vec![LayerSpec::binary_conv(bw).unwrap()]).unwrap();
        let b = save_model(&g).unwrap();
        assert_eq!(&b[b.len() - 2..], &[0b0000_0001, 0b0000_0001]);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = save_model(&net()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(load_model(&bad), Err(Error::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(load_model(&bad), Err(Error::UnsupportedVersion(2))));
        assert!(matches!(load_model(&bytes[..bytes.len() - 1]), Err(Error::TruncatedFile { needed: 1, .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(load_model(&long), Err(Error::PayloadLengthMismatch(_))));
    }
}
