//! Network graphs: an ordered node list plus the execution mode and the
//! network-wide quantization grid.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::layers::{Activation, LayerKind, LayerSpec, Param, ParamDtype};
use crate::quant::QuantConfig;
use crate::tensor::FloatTensor;

/// How a graph stores its non-binary parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ExecMode {
    /// Real-valued first/last and S-type layers, binary interior.
    Float,
    /// Every quantized layer wrapped as `D . L^Q . Q`.
    Conventional,
    /// Quantized layers with every Q/D node folded away.
    ZeroOverhead,
}

impl ExecMode {
    pub fn code(self) -> u8 {
        match self {
            Self::Float => 0,
            Self::Conventional => 1,
            Self::ZeroOverhead => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        [Self::Float, Self::Conventional, Self::ZeroOverhead].get(code as usize).copied()
    }

    /// Name used on the command line and in reports.
    pub fn name(self) -> &'static str {
        match self {
            Self::Float => "float",
            Self::Conventional => "conventional",
            Self::ZeroOverhead => "zobnn",
        }
    }
}

impl std::fmt::Display for ExecMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ExecMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "float" => Ok(Self::Float),
            "conventional" => Ok(Self::Conventional),
            "zobnn" => Ok(Self::ZeroOverhead),
            other => Err(Error::InvalidArgument(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Layer(LayerSpec),
    /// `Q`: real to grid.
    Quantize,
    /// `D`: grid to real.
    Dequantize,
}

impl Node {
    pub fn layer(&self) -> Option<&LayerSpec> {
        match self {
            Self::Layer(l) => Some(l),
            _ => None,
        }
    }

    pub fn label(&self) -> &str {
        match self {
            Self::Layer(l) => &l.name,
            Self::Quantize => "Q",
            Self::Dequantize => "D",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGraph {
    mode: ExecMode,
    quant: Option<QuantConfig>,
    nodes: Vec<Node>,
}

impl NetworkGraph {
    /// Builds a graph and names its layers `<kind><ordinal>` (e.g. `bn2`).
    pub fn new(mode: ExecMode, quant: Option<QuantConfig>, nodes: Vec<Node>) -> Result<Self> {
        let mut g = Self { mode, quant, nodes };
        g.assign_names();
        g.validate()?;
        Ok(g)
    }

    pub fn from_layers(mode: ExecMode, quant: Option<QuantConfig>, layers: Vec<LayerSpec>) -> Result<Self> {
        Self::new(mode, quant, layers.into_iter().map(Node::Layer).collect())
    }

    fn assign_names(&mut self) {
        let mut counts: HashMap<LayerKind, usize> = HashMap::new();
        for node in &mut self.nodes {
            if let Node::Layer(l) = node {
                let c = counts.entry(l.kind).or_default();
                *c += 1;
                l.name = format!("{}{}", l.kind.slug(), c);
            }
        }
    }

    fn validate(&self) -> Result<()> {
        for l in self.layers() {
            l.validate()?;
            for p in &l.params {
                if let Param::Quant(q) = p {
                    let Some(cfg) = &self.quant else {
                        return Err(Error::GraphShape(format!("`{}` is quantized but the graph has no scale", l.name)));
                    };
                    if q.delta() != cfg.delta() || q.bits() != cfg.bits() {
                        return Err(Error::GraphShape(format!("`{}` is quantized on a different grid", l.name)));
                    }
                }
            }
        }
        let has_qd = self.nodes.iter().any(|n| !matches!(n, Node::Layer(_)));
        match self.mode {
            ExecMode::Float if self.quant.is_some() || self.has_dtype(ParamDtype::QInt) => {
                Err(Error::GraphShape("float graphs carry no quantized parameters".into()))
            }
            ExecMode::Float | ExecMode::ZeroOverhead if has_qd => Err(Error::GraphShape(format!("{} graphs contain no Q/D nodes", self.mode))),
            ExecMode::Conventional if has_qd && self.quant.is_none() => Err(Error::GraphShape("Q/D nodes need a quantization scale".into())),
            _ => Ok(()),
        }
    }

    fn has_dtype(&self, d: ParamDtype) -> bool {
        self.layers().flat_map(|l| &l.params).any(|p| p.dtype() == d)
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    pub fn quant(&self) -> Option<&QuantConfig> {
        self.quant.as_ref()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub(crate) fn nodes_mut(&mut self) -> &mut [Node] {
        &mut self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.nodes.iter().filter_map(Node::layer)
    }

    /// Index of the node holding the named layer.
    pub fn find_layer(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.layer().is_some_and(|l| l.name == name))
    }

    pub fn param_count(&self) -> usize {
        self.layers().flat_map(|l| &l.params).map(Param::len).sum()
    }

    /// Runs node `i` on `x`.
    pub fn step(&self, i: usize, x: &Activation) -> Result<Activation> {
        match &self.nodes[i] {
            Node::Layer(l) => l.forward(x, self.quant.as_ref()),
            Node::Quantize => {
                let cfg = self.quant.as_ref().ok_or_else(|| Error::GraphShape("Q node without a scale".into()))?;
                match x {
                    Activation::Grid(_) => Ok(x.clone()),
                    other => Ok(Activation::Grid(cfg.quantize_activation(&other.to_real()?))),
                }
            }
            Node::Dequantize => match x {
                Activation::Grid(q) => Ok(Activation::Real(q.dequantize())),
                other => Ok(other.clone()),
            },
        }
    }

    /// Runs nodes `start..` on `x`.
    pub fn forward_from(&self, start: usize, x: Activation) -> Result<Activation> {
        let mut act = x;
        for i in start..self.nodes.len() {
            act = self.step(i, &act)?;
        }
        Ok(act)
    }

    /// [`Self::forward_from`] without taking ownership of the resumed input.
    pub fn resume(&self, start: usize, x: &Activation) -> Result<Activation> {
        if start >= self.nodes.len() {
            return Ok(x.clone());
        }
        let first = self.step(start, x)?;
        self.forward_from(start + 1, first)
    }

    pub fn forward(&self, input: &FloatTensor) -> Result<Activation> {
        self.forward_from(0, Activation::Real(input.clone()))
    }

    /// Predicted class; the graph must end in an argmax.
    pub fn predict(&self, input: &FloatTensor) -> Result<usize> {
        match self.forward(input)? {
            Activation::Class(c) => Ok(c),
            other => Err(Error::GraphShape(format!("graph does not end in argmax (output shape {:?})", other.shape()))),
        }
    }

    /// Output of the last node before a trailing argmax.
    pub fn logits(&self, input: &FloatTensor) -> Result<Activation> {
        let end = match self.nodes.last() {
            Some(Node::Layer(l)) if l.kind == LayerKind::ArgMax => self.nodes.len() - 1,
            _ => self.nodes.len(),
        };
        let mut act = Activation::Real(input.clone());
        for i in 0..end {
            act = self.step(i, &act)?;
        }
        Ok(act)
    }

    /// Inputs seen by every node, followed by the final output.
    pub fn trace(&self, input: &FloatTensor) -> Result<Vec<Activation>> {
        let mut acts = Vec::with_capacity(self.nodes.len() + 1);
        acts.push(Activation::Real(input.clone()));
        for i in 0..self.nodes.len() {
            let next = self.step(i, &acts[i])?;
            acts.push(next);
        }
        Ok(acts)
    }
}

/// Network input for an 8-bit grayscale image: `[1, 1, h, w]`, pixel / 255.
pub fn image_input(pixels: &[u8], height: usize, width: usize) -> Result<FloatTensor> {
    FloatTensor::new(vec![1, 1, height, width], pixels.iter().map(|&p| p as f32 / 255.0).collect())
}
