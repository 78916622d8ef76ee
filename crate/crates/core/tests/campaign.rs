//! End-to-end fault campaigns on small random networks.

use bnnq::fault::{corrupt_network, FaultConfig, FaultTarget, MemoryImage};
use bnnq::graph::ExecMode;
use bnnq::harness::{build_variants, evaluate, run_sweep, Metric, SweepSpec};
use bnnq::layers::LayerKind;
use bnnq::report::{write_csv, write_json};
use bnnq::toy::{random_images, random_toy_net};
use bnnq::transform::transform_network;
use proptest::prelude::*;

const ALL: [ExecMode; 3] = [ExecMode::Float, ExecMode::Conventional, ExecMode::ZeroOverhead];

fn spec(workers: usize) -> SweepSpec {
    SweepSpec { rates: vec![1e-4, 1e-2], trials: 12, seed: 21, metric: Metric::Deviation, eval_size: 40, target: FaultTarget::All, workers }
}

#[test]
fn sweeps_do_not_depend_on_worker_count() {
    let net = random_toy_net(6, 6, 4, 1).unwrap();
    let data = random_images(50, 6, 6, 4, 2).unwrap();
    let vs = build_variants(&net, 10, &ALL).unwrap();
    let a = run_sweep(&spec(1), &vs, &data).unwrap();
    let b = run_sweep(&spec(3), &vs, &data).unwrap();
    assert_eq!(a, b);
    let (mut ca, mut cb) = (Vec::new(), Vec::new());
    write_csv(&a, &mut ca).unwrap();
    write_csv(&b, &mut cb).unwrap();
    assert_eq!(ca, cb);
    let mut j = Vec::new();
    write_json(&a, &mut j).unwrap();
    assert_eq!(serde_json::from_slice::<serde_json::Value>(&j).unwrap().as_array().unwrap().len(), 6);
}

#[test]
fn cached_resumption_matches_full_evaluation() {
    let net = random_toy_net(6, 6, 4, 3).unwrap();
    let data = random_images(30, 6, 6, 4, 4).unwrap();
    for v in build_variants(&net, 12, &ALL).unwrap() {
        let s = SweepSpec { rates: vec![3e-3], trials: 10, seed: 8, metric: Metric::Accuracy, eval_size: 30, target: FaultTarget::All, workers: 1 };
        let rep = run_sweep(&s, std::slice::from_ref(&v), &data).unwrap();
        for (t, &value) in rep.cells[0].values.iter().enumerate() {
            let c = corrupt_network(&v.graph, &FaultConfig::new(3e-3, 8, t as u64, FaultTarget::All).unwrap()).unwrap();
            assert_eq!(value, evaluate(&c.graph, &data, Metric::Accuracy).unwrap(), "{} trial {t}", v.mode);
        }
    }
}

#[test]
fn zero_rate_leaves_every_variant_clean() {
    let net = random_toy_net(4, 4, 3, 5).unwrap();
    let data = random_images(20, 4, 4, 3, 6).unwrap();
    let vs = build_variants(&net, 8, &ALL).unwrap();
    let s = SweepSpec { rates: vec![0.0], trials: 5, seed: 0, metric: Metric::Deviation, eval_size: 20, target: FaultTarget::All, workers: 1 };
    for c in run_sweep(&s, &vs, &data).unwrap().cells {
        assert_eq!(c.values, vec![0.0; 5]);
        assert_eq!(c.total_flips(), 0);
    }
}

#[test]
fn kind_targets_only_touch_that_kind() {
    let net = transform_network(&random_toy_net(4, 4, 3, 9).unwrap(), 12).unwrap().0;
    let c = corrupt_network(&net, &FaultConfig::new(0.2, 1, 0, FaultTarget::Kind(LayerKind::RPReLU)).unwrap()).unwrap();
    assert!(c.flips > 0);
    for (a, b) in net.layers().zip(c.graph.layers()) {
        assert_eq!(a == b, a.kind != LayerKind::RPReLU || a.params.is_empty(), "{}", a.name);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// The image-level and in-place injectors flip the same bits.
    #[test]
    fn flips_match_the_image_hamming_distance(seed in any::<u64>(), trial in 0u64..1000, rate in 0.0f64..0.05) {
        let net = transform_network(&random_toy_net(4, 4, 3, seed).unwrap(), 11).unwrap().0;
        let c = corrupt_network(&net, &FaultConfig::new(rate, seed, trial, FaultTarget::All).unwrap()).unwrap();
        let clean = MemoryImage::encode(&net, &FaultTarget::All).unwrap();
        let dirty = MemoryImage::encode(&c.graph, &FaultTarget::All).unwrap();
        prop_assert_eq!(clean.hamming(&dirty), c.flips);
    }

    /// Quantized parameters never move further than the full grid span.
    #[test]
    fn quantized_deviation_is_bounded(seed in any::<u64>(), bits in 2u8..=16) {
        // narrow grids may round a sigma to zero, which the transform rejects
        let net = match transform_network(&random_toy_net(4, 4, 3, seed).unwrap(), bits) {
            Ok((net, _)) => net,
            Err(bnnq::Error::DegenerateSigma { .. }) => return Ok(()),
            Err(e) => panic!("{e}"),
        };
        let bound = 2f64.powi(bits as i32) * net.quant().unwrap().delta() as f64;
        let c = corrupt_network(&net, &FaultConfig::new(0.3, seed, 0, FaultTarget::All).unwrap()).unwrap();
        for (a, b) in net.layers().zip(c.graph.layers()) {
            for (p, q) in a.params.iter().zip(&b.params) {
                if let (bnnq::layers::Param::Quant(p), bnnq::layers::Param::Quant(q)) = (p, q) {
                    for (x, y) in p.dequantize().data().iter().zip(q.dequantize().data()) {
                        prop_assert!(((x - y).abs() as f64) <= bound);
                    }
                }
            }
        }
    }
}
