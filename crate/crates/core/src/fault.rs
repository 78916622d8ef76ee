//! Bit-flip faults in parameter memory.
//!
//! Parameters are laid out as one bit string per tensor: 32 bits per f32
//! (IEEE-754 pattern), `b` bits per grid value (two's complement) and one bit
//! per binary weight. Bit `j` of value `i` sits at offset `i * width + j`,
//! least significant bit first. A trial flips `K ~ Binomial(total_bits, P)`
//! distinct, uniformly chosen positions, which matches flipping every bit
//! independently with probability `P`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

use crate::error::{Error, Result};
use crate::graph::{NetworkGraph, Node};
use crate::layers::{LayerKind, Param};
use crate::tensor::{FloatTensor, PackedBitTensor, QuantTensor, WORD_BITS};

/// Which parameter tensors a fault campaign may touch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FaultTarget {
    All,
    /// One layer by name (e.g. `bn2`).
    Layer(String),
    /// Every layer of one kind.
    Kind(LayerKind),
}

impl std::str::FromStr for FaultTarget {
    type Err = Error;

    /// `all`, `kind:<slug>` (e.g. `kind:bn`) or a layer name (e.g. `bn2`).
    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Self::All);
        }
        if let Some(slug) = s.strip_prefix("kind:") {
            return LayerKind::ALL
                .into_iter()
                .find(|k| k.slug() == slug)
                .map(Self::Kind)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown layer kind `{slug}`")));
        }
        Ok(Self::Layer(s.to_owned()))
    }
}

impl std::fmt::Display for FaultTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::All => f.write_str("all"),
            Self::Layer(name) => f.write_str(name),
            Self::Kind(k) => write!(f, "kind:{}", k.slug()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaultConfig {
    /// Per-bit flip probability.
    pub rate: f64,
    pub seed: u64,
    pub trial: u64,
    pub target: FaultTarget,
}

impl FaultConfig {
    pub fn new(rate: f64, seed: u64, trial: u64, target: FaultTarget) -> Result<Self> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("fault rate {rate} outside [0, 1]")));
        }
        Ok(Self { rate, seed, trial, target })
    }

    /// Generator for this trial: keyed by the seed, one stream per trial.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.trial);
        rng
    }
}

/// Sorted, distinct bit positions to flip among `total_bits`.
pub fn sample_flips(total_bits: u64, rate: f64, rng: &mut impl Rng) -> Vec<u64> {
    if total_bits == 0 || rate <= 0.0 {
        return Vec::new();
    }
    let k = if rate >= 1.0 { total_bits } else { Binomial::new(total_bits, rate).expect("rate checked").sample(rng) };
    let total = usize::try_from(total_bits).expect("parameter memory fits in usize");
    let mut positions: Vec<u64> = sample(rng, total, k as usize).into_iter().map(|p| p as u64).collect();
    positions.sort_unstable();
    positions
}

/// How one tensor's values map to bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Encoding {
    F32,
    /// Two's complement, `bits` wide.
    Int {
        bits: u8,
    },
    Bit,
}

impl Encoding {
    pub fn of(p: &Param) -> Self {
        match p {
            Param::Float(_) => Self::F32,
            Param::Quant(q) => Self::Int { bits: q.bits() },
            Param::Binary(_) => Self::Bit,
        }
    }

    pub fn width(self) -> usize {
        match self {
            Self::F32 => 32,
            Self::Int { bits } => bits as usize,
            Self::Bit => 1,
        }
    }
}

/// Memory image of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorImage {
    pub node: usize,
    pub param: usize,
    pub encoding: Encoding,
    /// Value count.
    pub len: usize,
    pub words: Vec<u64>,
}

impl TensorImage {
    pub fn bit_len(&self) -> u64 {
        (self.len * self.encoding.width()) as u64
    }

    fn get(&self, at: usize, width: usize) -> u64 {
        let (w, s) = (at / WORD_BITS, at % WORD_BITS);
        let mut v = self.words[w] >> s;
        if s + width > WORD_BITS {
            v |= self.words[w + 1] << (WORD_BITS - s);
        }
        if width < WORD_BITS {
            v &= (1u64 << width) - 1;
        }
        v
    }

    fn put(words: &mut [u64], at: usize, width: usize, v: u64) {
        let (w, s) = (at / WORD_BITS, at % WORD_BITS);
        words[w] |= v << s;
        if s + width > WORD_BITS {
            words[w + 1] |= v >> (WORD_BITS - s);
        }
    }

    fn encode(node: usize, param: usize, p: &Param) -> Self {
        let encoding = Encoding::of(p);
        let width = encoding.width();
        let len = p.len();
        let words = match p {
            Param::Binary(t) => t.words().to_vec(),
            Param::Float(t) => {
                let mut words = vec![0u64; (len * width).div_ceil(WORD_BITS)];
                for (i, v) in t.data().iter().enumerate() {
                    Self::put(&mut words, i * width, width, v.to_bits() as u64);
                }
                words
            }
            Param::Quant(t) => {
                let mut words = vec![0u64; (len * width).div_ceil(WORD_BITS)];
                let mask = (1u64 << width) - 1;
                for (i, &v) in t.values().iter().enumerate() {
                    Self::put(&mut words, i * width, width, v as i64 as u64 & mask);
                }
                words
            }
        };
        Self { node, param, encoding, len, words }
    }

    /// Rebuilds the tensor; every bit pattern decodes.
    fn decode(&self, like: &Param) -> Result<Param> {
        let width = self.encoding.width();
        Ok(match like {
            Param::Float(t) => {
                let data = (0..self.len).map(|i| f32::from_bits(self.get(i * width, width) as u32)).collect();
                Param::Float(FloatTensor::new(t.shape().to_vec(), data)?)
            }
            Param::Quant(t) => {
                let values = (0..self.len).map(|i| sign_extend(self.get(i * width, width), width)).collect();
                Param::Quant(QuantTensor::new(t.shape().to_vec(), values, t.delta(), t.bits())?)
            }
            Param::Binary(t) => Param::Binary(PackedBitTensor::from_words(t.shape().to_vec(), self.words.clone())?),
        })
    }

    fn flip(&mut self, bit: usize) {
        self.words[bit / WORD_BITS] ^= 1 << (bit % WORD_BITS);
    }
}

fn sign_extend(v: u64, width: usize) -> i32 {
    let shift = 64 - width;
    ((v << shift) as i64 >> shift) as i32
}

/// Indices of `(node, param)` pairs selected by `target`, in memory order.
fn targeted(net: &NetworkGraph, target: &FaultTarget) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for (i, node) in net.nodes().iter().enumerate() {
        let Node::Layer(l) = node else { continue };
        let hit = match target {
            FaultTarget::All => true,
            FaultTarget::Layer(name) => &l.name == name,
            FaultTarget::Kind(k) => l.kind == *k,
        };
        if hit {
            out.extend((0..l.params.len()).map(|p| (i, p)));
        }
    }
    let known = match target {
        FaultTarget::All => true,
        FaultTarget::Layer(name) => net.find_layer(name).is_some(),
        FaultTarget::Kind(k) => net.layers().any(|l| l.kind == *k),
    };
    if !known {
        return Err(Error::UnknownLayer(target.to_string()));
    }
    Ok(out)
}

fn param(net: &NetworkGraph, node: usize, p: usize) -> &Param {
    &net.nodes()[node].layer().expect("targets are layers").params[p]
}

/// Bit strings of the targeted parameter tensors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemoryImage {
    pub tensors: Vec<TensorImage>,
}

impl MemoryImage {
    pub fn encode(net: &NetworkGraph, target: &FaultTarget) -> Result<Self> {
        let tensors = targeted(net, target)?.into_iter().map(|(n, p)| TensorImage::encode(n, p, param(net, n, p))).collect();
        Ok(Self { tensors })
    }

    pub fn total_bits(&self) -> u64 {
        self.tensors.iter().map(TensorImage::bit_len).sum()
    }

    /// A copy of `net` with the imaged tensors replaced by their decoded bits.
    pub fn decode_into(&self, net: &NetworkGraph) -> Result<NetworkGraph> {
        let mut out = net.clone();
        for t in &self.tensors {
            let decoded = t.decode(param(net, t.node, t.param))?;
            set_param(&mut out, t.node, t.param, decoded);
        }
        Ok(out)
    }

    /// Flips global bit `bit` (offset over the concatenated tensors).
    fn flip(&mut self, mut bit: u64) {
        for t in &mut self.tensors {
            if bit < t.bit_len() {
                t.flip(bit as usize);
                return;
            }
            bit -= t.bit_len();
        }
        panic!("bit offset beyond the image");
    }

    /// Number of bits that differ from `other`.
    pub fn hamming(&self, other: &Self) -> u64 {
        self.tensors.iter().zip(&other.tensors).flat_map(|(a, b)| a.words.iter().zip(&b.words)).map(|(x, y)| (x ^ y).count_ones() as u64).sum()
    }
}

fn set_param(net: &mut NetworkGraph, node: usize, p: usize, value: Param) {
    if let Node::Layer(l) = &mut net.nodes_mut()[node] {
        l.params[p] = value;
    }
}

/// Applies one trial's flips to an image.
pub fn flip_bits(image: &MemoryImage, cfg: &FaultConfig) -> MemoryImage {
    let mut out = image.clone();
    for bit in sample_flips(image.total_bits(), cfg.rate, &mut cfg.rng()) {
        out.flip(bit);
    }
    out
}

/// A corrupted copy of a network.
#[derive(Clone, Debug)]
pub struct Corruption {
    pub graph: NetworkGraph,
    pub flips: u64,
    /// Earliest node whose parameters changed; `None` when nothing flipped.
    pub first_node: Option<usize>,
}

/// Corrupts the targeted parameters of a copy of `net`.
///
/// Flips land in place on the copied tensors, at the same positions
/// [`flip_bits`] would flip in the encoded image.
pub fn corrupt_network(net: &NetworkGraph, cfg: &FaultConfig) -> Result<Corruption> {
    let targets = targeted(net, &cfg.target)?;
    let widths: Vec<u64> = targets.iter().map(|&(n, p)| param(net, n, p).storage_bits()).collect();
    let total: u64 = widths.iter().sum();
    let flips = sample_flips(total, cfg.rate, &mut cfg.rng());
    let mut graph = net.clone();
    let mut first_node = None;
    let (mut t, mut base) = (0usize, 0u64);
    for &bit in &flips {
        while bit >= base + widths[t] {
            base += widths[t];
            t += 1;
        }
        let (node, p) = targets[t];
        first_node = Some(first_node.map_or(node, |f: usize| f.min(node)));
        let Node::Layer(l) = &mut graph.nodes_mut()[node] else { unreachable!() };
        flip_param_bit(&mut l.params[p], (bit - base) as usize);
    }
    Ok(Corruption { graph, flips: flips.len() as u64, first_node })
}

fn flip_param_bit(p: &mut Param, bit: usize) {
    match p {
        Param::Float(t) => {
            let v = &mut t.data_mut()[bit / 32];
            *v = f32::from_bits(v.to_bits() ^ (1 << (bit % 32)));
        }
        Param::Quant(t) => {
            let width = t.bits() as usize;
            let v = &mut t.values_mut()[bit / width];
            let u = (*v as i64 as u64 & ((1u64 << width) - 1)) ^ (1 << (bit % width));
            *v = sign_extend(u, width);
        }
        Param::Binary(t) => t.toggle(bit),
    }
}

/// Mean flipped fraction of `image` over trials `0..trials`.
pub fn expected_flip_check(image: &MemoryImage, rate: f64, seed: u64, trials: u64) -> Result<f64> {
    if trials < 100 {
        return Err(Error::InvalidArgument(format!("need at least 100 trials, got {trials}")));
    }
    let total = image.total_bits();
    if total == 0 {
        return Err(Error::EmptyInput);
    }
    let mut flipped = 0u64;
    for trial in 0..trials {
        let cfg = FaultConfig::new(rate, seed, trial, FaultTarget::All)?;
        flipped += flip_bits(image, &cfg).hamming(image);
    }
    Ok(flipped as f64 / (trials as f64 * total as f64))
}
