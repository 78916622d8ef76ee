//! Rewrites a mixed-precision float network into its quantized forms.
//!
//! The float graph is first wrapped into the conventional pipeline, where
//! every quantizable layer `L` becomes `Q, L^Q, D`. Adjacent `D ... Q` pairs
//! (with only pooling/flattening between them) cancel exactly. The remaining
//! boundary nodes are absorbed into their neighbours:
//!
//! * the input `Q` (the first layer accepts real input directly);
//! * the output `D` before argmax (argmax is positive-scale invariant);
//! * a `D` feeding sign (the zero threshold is scale invariant);
//! * a `Q` feeding a quantized layer, which switches that layer to its
//!   real-input parameter storage.
//!
//! The result has exactly the float graph's nodes with only parameter storage
//! changed.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::{ExecMode, NetworkGraph, Node};
use crate::layers::{LayerKind, LayerSpec, LayerType, Param, ParamDtype};
use crate::quant::QuantConfig;

/// Which boundary rule removed a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewriteRule {
    /// `Q . D` cancelled between a producer and a consumer.
    PairCancelled,
    /// Input `Q` folded into the first layer.
    InputAbsorbed,
    /// Output `D` folded into argmax.
    OutputAbsorbed,
    /// `D` folded into a sign layer.
    SignAbsorbed,
    /// `Q` folded into a layer that now takes real input.
    RealInputAbsorbed,
}

/// One removed node and the layer it touched.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RewriteStep {
    pub rule: RewriteRule,
    /// `"Q"` or `"D"`.
    pub node: &'static str,
    pub layer: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TransformLog {
    pub steps: Vec<RewriteStep>,
}

impl TransformLog {
    pub fn nodes_eliminated(&self) -> usize {
        self.steps.len()
    }

    pub fn count(&self, rule: RewriteRule) -> usize {
        self.steps.iter().filter(|s| s.rule == rule).count()
    }
}

/// All three forms of one network.
#[derive(Clone, Debug)]
pub struct Transformed {
    pub conventional: NetworkGraph,
    /// Conventional pipeline after pair cancellation only.
    pub intermediate: NetworkGraph,
    pub zero_overhead: NetworkGraph,
    pub log: TransformLog,
}

/// Checks the mixed-precision shape: float first/last L-type layers, binary
/// interior L-type layers each fed by a sign, float S-type layers with
/// positive standard deviations, argmax only at the end.
pub fn validate_float_shape(net: &NetworkGraph) -> Result<()> {
    let bad = |msg: String| Err(Error::GraphShape(msg));
    if net.mode() != ExecMode::Float {
        return bad(format!("expected a float graph, got {}", net.mode()));
    }
    let layers: Vec<&LayerSpec> = net.layers().collect();
    let l_positions: Vec<usize> = (0..layers.len()).filter(|&i| layers[i].ltype() == LayerType::L).collect();
    for (rank, &i) in l_positions.iter().enumerate() {
        let l = layers[i];
        let boundary = rank == 0 || rank + 1 == l_positions.len();
        match (boundary, l.kind) {
            (true, LayerKind::FirstConv | LayerKind::Linear) => {
                if l.params[0].dtype() != ParamDtype::F32 {
                    return bad(format!("`{}` must hold float weights", l.name));
                }
            }
            (false, LayerKind::BinaryConv) => {
                let feeder = layers[..i].iter().rev().find(|p| !matches!(p.kind, LayerKind::MaxPool | LayerKind::Flatten));
                if feeder.map(|p| p.kind) != Some(LayerKind::Sign) {
                    return bad(format!("`{}` must be fed by a sign layer", l.name));
                }
            }
            (true, _) => return bad(format!("`{}` cannot be the first or last L-type layer", l.name)),
            (false, _) => return bad(format!("interior layer `{}` must be binary", l.name)),
        }
    }
    for (i, l) in layers.iter().enumerate() {
        if l.kind == LayerKind::ArgMax && i + 1 != layers.len() {
            return bad(format!("`{}` must be the final node", l.name));
        }
        if l.ltype() == LayerType::S && l.params.iter().any(|p| p.dtype() != ParamDtype::F32) {
            return bad(format!("`{}` must hold float parameters", l.name));
        }
        if l.kind == LayerKind::BatchNorm {
            let sigma = l.params[3].to_float();
            if sigma.data().iter().any(|&s| s.is_nan() || s <= 0.0) {
                return bad(format!("`{}` has a non-positive standard deviation", l.name));
            }
        }
    }
    Ok(())
}

fn quantizable(l: &LayerSpec) -> bool {
    l.kind.is_quantizable()
}

/// Global scale over every parameter of every quantizable layer.
pub fn quant_config_for(net: &NetworkGraph, bits: u8) -> Result<QuantConfig> {
    let floats: Vec<_> = net.layers().filter(|l| quantizable(l)).flat_map(|l| &l.params).map(Param::to_float).collect();
    QuantConfig::from_params(floats.iter().flat_map(|t| t.data()), bits)
}

fn q(p: &Param, cfg: &QuantConfig) -> Result<Param> {
    Ok(Param::Quant(cfg.quantize_tensor(&p.to_float())?))
}

fn real(p: &Param) -> Param {
    Param::Float(p.to_float())
}

/// Parameter storage for a quantizable layer fed by grid values: every
/// parameter on the grid except the rprelu slope.
pub fn grid_input_params(l: &LayerSpec, cfg: &QuantConfig) -> Result<LayerSpec> {
    let params = match l.kind {
        LayerKind::RPReLU => vec![real(&l.params[0]), q(&l.params[1], cfg)?, q(&l.params[2], cfg)?],
        _ => l.params.iter().map(|p| q(p, cfg)).collect::<Result<_>>()?,
    };
    let spec = LayerSpec { params, ..l.clone() };
    check_sigma(&spec, cfg)?;
    Ok(spec)
}

/// Parameter storage for a quantizable layer fed by real values: batchnorm
/// keeps `mu`, `sigma` real; rprelu keeps `B1` real.
pub fn real_input_params(l: &LayerSpec, cfg: &QuantConfig) -> Result<LayerSpec> {
    let p = &l.params;
    let params = match l.kind {
        LayerKind::BatchNorm => vec![q(&p[0], cfg)?, q(&p[1], cfg)?, real(&p[2]), real(&p[3])],
        LayerKind::RPReLU => vec![q(&p[0], cfg)?, real(&p[1]), q(&p[2], cfg)?],
        _ => p.iter().map(|t| q(t, cfg)).collect::<Result<_>>()?,
    };
    Ok(LayerSpec { params, ..l.clone() })
}

fn check_sigma(l: &LayerSpec, cfg: &QuantConfig) -> Result<()> {
    if l.kind == LayerKind::BatchNorm {
        if let Param::Quant(s) = &l.params[3] {
            if s.values().contains(&0) {
                return Err(Error::DegenerateSigma { layer: l.name.clone(), bits: cfg.bits() });
            }
        }
    }
    Ok(())
}

/// Wraps every quantized layer as `Q, L^Q, D`; other nodes pass through.
pub fn wrap_conventional(layers: Vec<LayerSpec>, cfg: QuantConfig) -> Result<NetworkGraph> {
    let mut nodes = Vec::with_capacity(layers.len() * 3);
    for l in layers {
        if l.is_quantized() {
            nodes.extend([Node::Quantize, Node::Layer(l), Node::Dequantize]);
        } else {
            nodes.push(Node::Layer(l));
        }
    }
    NetworkGraph::new(ExecMode::Conventional, Some(cfg), nodes)
}

/// The conventional pipeline: every quantizable layer gets grid-input storage
/// and a `Q`/`D` pair around it.
pub fn build_conventional(net: &NetworkGraph, bits: u8) -> Result<NetworkGraph> {
    validate_float_shape(net)?;
    let cfg = quant_config_for(net, bits)?;
    let layers = net.layers().map(|l| if quantizable(l) { grid_input_params(l, &cfg) } else { Ok(l.clone()) }).collect::<Result<Vec<_>>>()?;
    wrap_conventional(layers, cfg)
}

fn is_transparent(n: &Node) -> bool {
    matches!(n, Node::Layer(l) if matches!(l.kind, LayerKind::MaxPool | LayerKind::Flatten))
}

/// Index of the first node after `i` that is not pooling/flattening.
fn next_opaque(nodes: &[Node], i: usize) -> Option<usize> {
    (i + 1..nodes.len()).find(|&j| !is_transparent(&nodes[j]))
}

fn label_of(nodes: &[Node], i: Option<usize>) -> String {
    i.and_then(|i| nodes[i].layer()).map_or_else(|| "<output>".to_owned(), |l| l.name.clone())
}

/// Cancels every `D ... Q` pair separated only by pooling/flattening.
pub fn eliminate_pairs(conventional: &NetworkGraph) -> Result<(NetworkGraph, TransformLog)> {
    let mut nodes = conventional.nodes().to_vec();
    let mut log = TransformLog::default();
    let mut i = 0;
    while i < nodes.len() {
        if matches!(nodes[i], Node::Dequantize) {
            if let Some(j) = next_opaque(&nodes, i).filter(|&j| matches!(nodes[j], Node::Quantize)) {
                let producer = label_of(&nodes, i.checked_sub(1));
                let consumer = label_of(&nodes, next_opaque(&nodes, j));
                nodes.remove(j);
                nodes.remove(i);
                log.steps.push(RewriteStep { rule: RewriteRule::PairCancelled, node: "D", layer: producer });
                log.steps.push(RewriteStep { rule: RewriteRule::PairCancelled, node: "Q", layer: consumer });
                continue;
            }
        }
        i += 1;
    }
    Ok((NetworkGraph::new(ExecMode::Conventional, conventional.quant().copied(), nodes)?, log))
}

/// Absorbs the boundary nodes left after pair cancellation. `source` maps
/// layer names to their float originals, used for real-input storage.
fn absorb_boundaries(intermediate: &NetworkGraph, source: &HashMap<String, LayerSpec>, log: &mut TransformLog) -> Result<NetworkGraph> {
    let cfg = *intermediate.quant().ok_or_else(|| Error::GraphShape("conventional graph without a scale".into()))?;
    let nodes = intermediate.nodes();
    let mut out: Vec<Node> = Vec::with_capacity(nodes.len());
    let mut real_input_next = false;
    for (i, node) in nodes.iter().enumerate() {
        let next = next_opaque(nodes, i).map(|j| &nodes[j]);
        match node {
            Node::Quantize => {
                let Some(Node::Layer(consumer)) = next else {
                    return Err(Error::GraphShape(format!("dangling Q at node {i}")));
                };
                let rule = if out.is_empty() { RewriteRule::InputAbsorbed } else { RewriteRule::RealInputAbsorbed };
                log.steps.push(RewriteStep { rule, node: "Q", layer: consumer.name.clone() });
                real_input_next = true;
            }
            Node::Dequantize => {
                let rule = match next {
                    None => RewriteRule::OutputAbsorbed,
                    Some(Node::Layer(l)) if l.kind == LayerKind::ArgMax => RewriteRule::OutputAbsorbed,
                    Some(Node::Layer(l)) if l.kind == LayerKind::Sign => RewriteRule::SignAbsorbed,
                    _ => return Err(Error::GraphShape(format!("D at node {i} feeds neither sign nor argmax"))),
                };
                log.steps.push(RewriteStep { rule, node: "D", layer: label_of(nodes, i.checked_sub(1)) });
            }
            Node::Layer(l) if real_input_next && l.is_quantized() => {
                real_input_next = false;
                let src = source.get(&l.name).ok_or_else(|| Error::UnknownLayer(l.name.clone()))?;
                out.push(Node::Layer(real_input_params(src, &cfg)?));
            }
            Node::Layer(l) => out.push(Node::Layer(l.clone())),
        }
    }
    NetworkGraph::new(ExecMode::ZeroOverhead, Some(cfg), out)
}

/// Builds all three forms of `net` at `bits` bits.
pub fn transform_all(net: &NetworkGraph, bits: u8) -> Result<Transformed> {
    let conventional = build_conventional(net, bits)?;
    let (intermediate, mut log) = eliminate_pairs(&conventional)?;
    let source: HashMap<String, LayerSpec> = net.layers().map(|l| (l.name.clone(), l.clone())).collect();
    let zero_overhead = absorb_boundaries(&intermediate, &source, &mut log)?;
    debug_assert_eq!(zero_overhead.node_count(), net.node_count());
    Ok(Transformed { conventional, intermediate, zero_overhead, log })
}

/// Float graph to its Q/D-free quantized form.
///
/// A graph without quantizable layers is returned unchanged (as a
/// zero-overhead graph with no scale).
pub fn transform_network(net: &NetworkGraph, bits: u8) -> Result<(NetworkGraph, TransformLog)> {
    if !(2..=16).contains(&bits) {
        return Err(Error::InvalidArgument(format!("bit width {bits} outside [2, 16]")));
    }
    if !net.layers().any(quantizable) {
        validate_float_shape(net)?;
        let g = NetworkGraph::new(ExecMode::ZeroOverhead, None, net.nodes().to_vec())?;
        return Ok((g, TransformLog::default()));
    }
    let t = transform_all(net, bits)?;
    Ok((t.zero_overhead, t.log))
}
