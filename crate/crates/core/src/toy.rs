//! Random-weight networks with the reference toy architecture:
//! conv(1→16) bn sign bconv(16→16) bn rprelu sign bconv(16→32) bn rprelu
//! maxpool(2) flatten linear(→classes) argmax.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::Dataset;
use crate::error::Result;
use crate::graph::{ExecMode, NetworkGraph, Node};
use crate::layers::{LayerKind, LayerSpec, Param};
use crate::tensor::{FloatTensor, PackedBitTensor};

pub const CHANNELS: [usize; 3] = [16, 16, 32];

/// Images used to fit batch-norm statistics.
const CALIBRATION: usize = 64;

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f32, hi: f32) -> Result<FloatTensor> {
    FloatTensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn per_channel(c: usize, v: f32) -> Param {
    Param::Float(FloatTensor::new(vec![c], vec![v; c]).expect("positive extent"))
}

/// A float toy network for `height x width` inputs (both even, at least 2).
///
/// Weights are uniform random (the classifier's scaled by `1/sqrt(fan_in)`); each batch norm's mean and sigma are fitted
/// to its own input over random images, so signs and the classifier see
/// non-degenerate activations.
pub fn random_toy_net(height: usize, width: usize, classes: usize, seed: u64) -> Result<NetworkGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c1, c2, c3] = CHANNELS;
    let bn = |rng: &mut ChaCha8Rng, c: usize| -> Result<LayerSpec> {
        LayerSpec::batch_norm(
            Param::Float(uniform(rng, vec![c], 0.5, 1.5)?),
            Param::Float(uniform(rng, vec![c], -0.5, 0.5)?),
            per_channel(c, 0.0),
            per_channel(c, 1.0),
        )
    };
    let rprelu = |rng: &mut ChaCha8Rng, c: usize| -> Result<LayerSpec> {
        LayerSpec::rprelu(
            Param::Float(uniform(rng, vec![c], 0.05, 0.5)?),
            Param::Float(uniform(rng, vec![c], -0.3, 0.3)?),
            Param::Float(uniform(rng, vec![c], -0.3, 0.3)?),
        )
    };
    let mut bconv = |cin: usize, cout: usize| {
        let n = cout * cin * 9;
        PackedBitTensor::from_signs(vec![cout, cin, 3, 3], (0..n).map(|_| rng.random_bool(0.5))).and_then(LayerSpec::binary_conv)
    };
    let bconv1 = bconv(c1, c2)?;
    let bconv2 = bconv(c2, c3)?;
    let features = c3 * (height / 2) * (width / 2);
    // keeps logits O(1), inside the range the parameter-derived grid covers
    let scale = 1.0 / (features as f32).sqrt();
    let layers = vec![
        LayerSpec::first_conv(Param::Float(uniform(&mut rng, vec![c1, 1, 3, 3], -1.0, 1.0)?))?,
        bn(&mut rng, c1)?,
        LayerSpec::sign(),
        bconv1,
        bn(&mut rng, c2)?,
        rprelu(&mut rng, c2)?,
        LayerSpec::sign(),
        bconv2,
        bn(&mut rng, c3)?,
        rprelu(&mut rng, c3)?,
        LayerSpec::max_pool(2)?,
        LayerSpec::flatten(),
        LayerSpec::linear(Param::Float(uniform(&mut rng, vec![classes, features], -scale, scale)?))?,
        LayerSpec::argmax(),
    ];
    let mut net = NetworkGraph::from_layers(ExecMode::Float, None, layers)?;
    let calib = random_images(CALIBRATION, height, width, classes, rng.random())?;
    fit_batch_norms(&mut net, &calib, &mut rng)?;
    Ok(net)
}

/// Sets every batch norm's mean and sigma to (jittered) statistics of its
/// input over `data`, front to back.
fn fit_batch_norms(net: &mut NetworkGraph, data: &Dataset, rng: &mut ChaCha8Rng) -> Result<()> {
    for n in 0..net.node_count() {
        if net.nodes()[n].layer().is_none_or(|l| l.kind != LayerKind::BatchNorm) {
            continue;
        }
        let mut sums: Vec<(f64, f64, usize)> = Vec::new();
        for i in 0..data.len() {
            let x = net.trace(&data.input(i))?.swap_remove(n).to_real()?;
            let (c, inner) = (x.shape()[1], x.shape()[2..].iter().product::<usize>());
            sums.resize(c, (0.0, 0.0, 0));
            for (b, block) in x.data().chunks(inner).enumerate() {
                let s = &mut sums[b % c];
                for &v in block {
                    s.0 += v as f64;
                    s.1 += v as f64 * v as f64;
                    s.2 += 1;
                }
            }
        }
        let mut mu = Vec::with_capacity(sums.len());
        let mut sigma = Vec::with_capacity(sums.len());
        for &(s, s2, k) in &sums {
            let m = s / k as f64;
            let sd = (s2 / k as f64 - m * m).max(0.0).sqrt().max(1e-2);
            mu.push((m + rng.random_range(-0.2..0.2) * sd) as f32);
            sigma.push((sd * rng.random_range(0.8..1.2)) as f32);
        }
        let c = mu.len();
        let Node::Layer(l) = &mut net.nodes_mut()[n] else { unreachable!() };
        l.params[2] = Param::Float(FloatTensor::new(vec![c], mu)?);
        l.params[3] = Param::Float(FloatTensor::new(vec![c], sigma)?);
    }
    Ok(())
}

/// Re-parameterizes a float toy network so that its `bits`-bit
/// quantization is exact and never clips an activation:
///
/// * each batch norm behind a binary conv has `W` and `sigma` scaled by a
///   common factor (the float function is unchanged) so its largest `sigma`
///   equals `qmax * delta` with `delta = 2^-k`, at least the largest
///   possible binary sum;
/// * every other quantizable parameter is snapped to a multiple of `delta`.
///
/// On such a network, grid-valued inputs make the conventional and
/// zero-overhead pipelines compute identical values.
pub fn grid_aligned(net: &NetworkGraph, bits: u8) -> Result<(NetworkGraph, f32)> {
    let qmax = crate::quant::qmax(bits) as f64;
    let mut bound = 1.0f64;
    let nodes = net.nodes();
    for (i, n) in nodes.iter().enumerate() {
        if let Some(l) = n.layer().filter(|l| l.kind == LayerKind::BinaryConv) {
            let fan_in: usize = l.params[0].shape()[1..].iter().product();
            bound = bound.max(fan_in as f64);
            if !nodes.get(i + 1).and_then(|n| n.layer()).is_some_and(|l| l.kind == LayerKind::BatchNorm) {
                return Err(crate::Error::GraphShape("binary conv must feed a batch norm".into()));
            }
        }
    }
    let k = (qmax / bound).log2().floor();
    if k < 0.0 {
        return Err(crate::Error::InvalidArgument(format!("{bits} bits cannot cover binary sums up to {bound}")));
    }
    let delta = (-k).exp2();
    let top = qmax * delta;
    let snap = |v: f32| ((v as f64 / delta).round() * delta) as f32;
    let mut out = net.clone();
    let mut after_binary = false;
    for node in out.nodes_mut() {
        let Node::Layer(l) = node else { continue };
        if l.kind == LayerKind::BatchNorm && after_binary {
            let s = top / l.params[3].to_float().data().iter().fold(0.0f32, |m, &v| m.max(v)) as f64;
            for p in [0, 3] {
                let t = l.params[p].to_float();
                l.params[p] = Param::Float(FloatTensor::new(t.shape().to_vec(), t.data().iter().map(|&v| (v as f64 * s) as f32).collect())?);
            }
        }
        after_binary = l.kind == LayerKind::BinaryConv;
        if l.kind.is_quantizable() && l.kind != LayerKind::BinaryConv {
            for (j, p) in l.params.iter_mut().enumerate() {
                let t = p.to_float();
                let floor = if l.kind == LayerKind::BatchNorm && j == 3 { delta as f32 } else { f32::NEG_INFINITY };
                let data = t.data().iter().map(|&v| snap(v).max(floor).min(top as f32)).collect();
                *p = Param::Float(FloatTensor::new(t.shape().to_vec(), data)?);
            }
        }
    }
    Ok((out, delta as f32))
}

/// `n` input tensors `[1, 1, height, width]` with values `delta * j`,
/// `j` uniform over `0..=round(1 / delta)`.
pub fn grid_inputs(n: usize, height: usize, width: usize, delta: f32, seed: u64) -> Result<Vec<FloatTensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = (1.0 / delta as f64).round() as u32;
    (0..n).map(|_| FloatTensor::from_fn(vec![1, 1, height, width], |_| (rng.random_range(0..=steps) as f64 * delta as f64) as f32)).collect()
}

/// `n` images of uniform random pixels with uniform random labels.
pub fn random_images(n: usize, height: usize, width: usize, classes: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = (0..n * height * width).map(|_| rng.random::<u8>()).collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes as u8)).collect();
    Dataset::new(height, width, pixels, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_net_is_deterministic_and_well_formed() {
        let a = random_toy_net(8, 8, 10, 7).unwrap();
        assert_eq!(a, random_toy_net(8, 8, 10, 7).unwrap());
        assert_ne!(a, random_toy_net(8, 8, 10, 8).unwrap());
        assert_eq!(a.node_count(), 14);
        let x = random_images(1, 8, 8, 10, 1).unwrap().input(0);
        assert!(a.predict(&x).unwrap() < 10);
    }

    #[test]
    fn grid_aligned_net_has_power_of_two_scale() {
        let net = random_toy_net(8, 8, 10, 3).unwrap();
        let (aligned, delta) = grid_aligned(&net, 16).unwrap();
        assert_eq!(delta, 1.0 / 128.0);
        let cfg = crate::transform::quant_config_for(&aligned, 16).unwrap();
        assert_eq!(cfg.delta(), delta);
        for l in aligned.layers().filter(|l| l.kind.is_quantizable() && l.kind != LayerKind::BinaryConv) {
            for p in &l.params {
                assert!(p.to_float().data().iter().all(|&v| (v / delta).fract() == 0.0), "{}", l.name);
            }
        }
    }

    #[test]
    fn random_images_use_every_class_range() {
        let d = random_images(200, 4, 4, 3, 5).unwrap();
        assert!(d.labels().iter().all(|&l| l < 3));
        assert_eq!(d.len(), 200);
    }
}
