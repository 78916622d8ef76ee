//! Fault campaigns, distribution statistics, memory accounting and latency
//! benchmarks over the float / conventional / zero-overhead variants of one
//! network.

use std::time::Instant;

use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::fault::{corrupt_network, FaultConfig, FaultTarget};
use crate::graph::{ExecMode, NetworkGraph};
use crate::layers::{Activation, Param};
use crate::transform::transform_all;

/// What a trial measures over the eval set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    /// Fraction of inputs classified correctly.
    Accuracy,
    /// Fraction of inputs whose class differs from the fault-free run.
    Deviation,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Self::Accuracy => "acc",
            Self::Deviation => "dev",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "acc" => Ok(Self::Accuracy),
            "dev" => Ok(Self::Deviation),
            other => Err(Error::InvalidArgument(format!("unknown metric `{other}`"))),
        }
    }
}

/// One executable form of the network under study.
#[derive(Clone, Debug)]
pub struct Variant {
    pub mode: ExecMode,
    pub graph: NetworkGraph,
}

/// Derives the requested variants from a float network.
pub fn build_variants(float: &NetworkGraph, bits: u8, modes: &[ExecMode]) -> Result<Vec<Variant>> {
    if float.mode() != ExecMode::Float {
        return Err(Error::InvalidArgument(format!("variants derive from a float model, got {}", float.mode())));
    }
    let quantized = if modes.iter().any(|&m| m != ExecMode::Float) { Some(transform_all(float, bits)?) } else { None };
    Ok(modes
        .iter()
        .map(|&mode| {
            let graph = match (mode, &quantized) {
                (ExecMode::Conventional, Some(t)) => t.conventional.clone(),
                (ExecMode::ZeroOverhead, Some(t)) => t.zero_overhead.clone(),
                _ => float.clone(),
            };
            Variant { mode, graph }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub rates: Vec<f64>,
    pub trials: u64,
    pub seed: u64,
    pub metric: Metric,
    pub eval_size: usize,
    pub target: FaultTarget,
    /// Worker threads; results do not depend on it.
    pub workers: usize,
}

pub const DEFAULT_RATES: [f64; 7] = [1e-6, 4e-6, 1e-5, 4e-5, 1e-4, 4e-4, 1e-3];

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            rates: DEFAULT_RATES.to_vec(),
            trials: 500,
            seed: 0,
            metric: Metric::Accuracy,
            eval_size: 512,
            target: FaultTarget::All,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidArgument("trials must be at least 1".into()));
        }
        if self.rates.is_empty() {
            return Err(Error::InvalidArgument("no fault rates given".into()));
        }
        if let Some(r) = self.rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::InvalidArgument(format!("fault rate {r} outside [0, 1]")));
        }
        if self.eval_size == 0 {
            return Err(Error::InvalidArgument("eval set size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Order statistics of a sample; quartiles interpolate linearly between
/// order statistics (position `p * (n - 1)`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
    /// Sample standard deviation (0 for a single value).
    pub std_dev: f64,
}

impl Stats {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }

    pub fn std_err(&self) -> f64 {
        self.std_dev / (self.count as f64).sqrt()
    }

    /// Normal-approximation 95% confidence interval of the mean.
    pub fn ci95(&self) -> (f64, f64) {
        let h = 1.96 * self.std_err();
        (self.mean - h, self.mean + h)
    }
}

pub fn distribution_stats(values: &[f64]) -> Result<Stats> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let at = |p: f64| {
        let pos = p * (n - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    // offset by the minimum so a constant sample has exactly that mean
    let mean = v[0] + v.iter().map(|x| x - v[0]).sum::<f64>() / n as f64;
    let var = if n > 1 { v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
    Ok(Stats { count: n, mean, median: at(0.5), q1: at(0.25), q3: at(0.75), min: v[0], max: v[n - 1], std_dev: var.sqrt() })
}

/// Fault-free activations of one variant over the eval set.
struct CleanRun {
    /// `inputs[i][n]` is the input node `n` sees for image `i`; kept only for
    /// nodes that hold parameters, since a trial resumes at one of those.
    inputs: Vec<Vec<Option<Activation>>>,
    preds: Vec<usize>,
}

impl CleanRun {
    fn new(graph: &NetworkGraph, data: &Dataset) -> Result<Self> {
        let mut inputs = Vec::with_capacity(data.len());
        let mut preds = Vec::with_capacity(data.len());
        for i in 0..data.len() {
            let trace = graph.trace(&data.input(i))?;
            preds.push(class_of(trace.last().expect("trace holds the output"))?);
            let keep = graph.nodes().iter().zip(trace).map(|(n, a)| n.layer().filter(|l| !l.params.is_empty()).map(|_| a));
            inputs.push(keep.collect());
        }
        Ok(Self { inputs, preds })
    }

    fn score(&self, preds: impl Iterator<Item = Result<usize>>, data: &Dataset, metric: Metric) -> Result<f64> {
        let mut hits = 0usize;
        for (i, p) in preds.enumerate() {
            let p = p?;
            hits += match metric {
                Metric::Accuracy => (p == data.label(i)) as usize,
                Metric::Deviation => (p != self.preds[i]) as usize,
            };
        }
        Ok(hits as f64 / data.len() as f64)
    }

    fn clean_score(&self, data: &Dataset, metric: Metric) -> Result<f64> {
        self.score(self.preds.iter().map(|&p| Ok(p)), data, metric)
    }

    /// Metric of `graph` when only nodes `start..` differ from the clean run.
    fn resumed_score(&self, graph: &NetworkGraph, start: usize, data: &Dataset, metric: Metric) -> Result<f64> {
        let preds = self.inputs.iter().map(|acts| {
            let x = acts[start].as_ref().expect("faults only land in parameter-holding nodes");
            class_of(&graph.resume(start, x)?)
        });
        self.score(preds, data, metric)
    }
}

fn class_of(a: &Activation) -> Result<usize> {
    match a {
        Activation::Class(c) => Ok(*c),
        other => Err(Error::GraphShape(format!("network output is not a class (shape {:?})", other.shape()))),
    }
}

/// Results of one (variant, rate) cell, trials in index order.
#[derive(Clone, Debug, PartialEq)]
pub struct CellReport {
    pub mode: ExecMode,
    pub rate: f64,
    pub values: Vec<f64>,
    pub flips: Vec<u64>,
    /// Metric of the fault-free network.
    pub clean: f64,
    pub stats: Stats,
}

impl CellReport {
    pub fn total_flips(&self) -> u64 {
        self.flips.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialReport {
    pub metric: Metric,
    pub seed: u64,
    pub target: FaultTarget,
    /// Variant-major, rates in the order given.
    pub cells: Vec<CellReport>,
}

impl TrialReport {
    pub fn cell(&self, mode: ExecMode, rate: f64) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.mode == mode && c.rate == rate)
    }
}

/// Runs every (variant, rate, trial) of `spec` over the first
/// `spec.eval_size` records of `data`.
///
/// Trial `t` at any rate uses fault stream `t` of `spec.seed`.
pub fn run_sweep(spec: &SweepSpec, variants: &[Variant], data: &Dataset) -> Result<TrialReport> {
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    let data = data.take(spec.eval_size);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(spec.workers.max(1)).build().map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
    let mut cells = Vec::with_capacity(variants.len() * spec.rates.len());
    for v in variants {
        let clean = CleanRun::new(&v.graph, &data)?;
        let clean_score = clean.clean_score(&data, spec.metric)?;
        for &rate in &spec.rates {
            let trial = |t: u64| -> Result<(f64, u64)> {
                let cfg = FaultConfig::new(rate, spec.seed, t, spec.target.clone())?;
                let c = corrupt_network(&v.graph, &cfg)?;
                let value = match c.first_node {
                    None => clean_score,
                    Some(start) => clean.resumed_score(&c.graph, start, &data, spec.metric)?,
                };
                Ok((value, c.flips))
            };
            let results: Vec<(f64, u64)> = pool.install(|| (0..spec.trials).into_par_iter().map(trial).collect::<Result<_>>())?;
            let (values, flips): (Vec<f64>, Vec<u64>) = results.into_iter().unzip();
            let stats = distribution_stats(&values)?;
            cells.push(CellReport { mode: v.mode, rate, values, flips, clean: clean_score, stats });
        }
    }
    Ok(TrialReport { metric: spec.metric, seed: spec.seed, target: spec.target.clone(), cells })
}

/// Fault-free metric of one graph over a dataset.
pub fn evaluate(graph: &NetworkGraph, data: &Dataset, metric: Metric) -> Result<f64> {
    CleanRun::new(graph, data)?.clean_score(data, metric)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerFootprint {
    pub name: String,
    pub bits: u64,
}

/// Parameter storage of a network: 32 bits per f32, `b` per grid value,
/// one per binary weight.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Footprint {
    pub layers: Vec<LayerFootprint>,
    pub total: u64,
}

pub fn footprint(net: &NetworkGraph) -> Footprint {
    let layers: Vec<LayerFootprint> = net
        .layers()
        .filter(|l| !l.params.is_empty())
        .map(|l| LayerFootprint { name: l.name.clone(), bits: l.params.iter().map(Param::storage_bits).sum() })
        .collect();
    let total = layers.iter().map(|l| l.bits).sum();
    Footprint { layers, total }
}

/// `1 - quantized / float`.
pub fn reduction(quantized: &Footprint, float: &Footprint) -> f64 {
    1.0 - quantized.total as f64 / float.total as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub mode: ExecMode,
    pub nodes: usize,
    /// Mean single-input latency, seconds.
    pub mean_latency: f64,
    pub repeats: usize,
}

/// Inputs timed per repeat.
const BENCH_INPUTS: usize = 32;

/// Times single-input inference of each variant, `repeats` rounds with the
/// variants interleaved (rotating order) so drift hits all of them alike.
///
/// Fails when a zero-overhead variant has a different node count than the
/// float one, or a conventional variant is not strictly larger.
pub fn bench_overhead(variants: &[Variant], data: &Dataset, repeats: usize) -> Result<Vec<BenchRow>> {
    if repeats < 20 {
        return Err(Error::InvalidArgument(format!("need at least 20 repeats, got {repeats}")));
    }
    if data.is_empty() || variants.is_empty() {
        return Err(Error::EmptyInput);
    }
    check_node_counts(variants)?;
    let inputs: Vec<_> = (0..data.len().min(BENCH_INPUTS)).map(|i| data.input(i)).collect();
    for v in variants {
        for x in &inputs {
            std::hint::black_box(v.graph.forward(x)?);
        }
    }
    let mut totals = vec![0.0f64; variants.len()];
    for r in 0..repeats {
        for k in 0..variants.len() {
            let idx = (r + k) % variants.len();
            let g = &variants[idx].graph;
            let start = Instant::now();
            for x in &inputs {
                std::hint::black_box(g.forward(std::hint::black_box(x))?);
            }
            totals[idx] += start.elapsed().as_secs_f64() / inputs.len() as f64;
        }
    }
    Ok(variants.iter().zip(totals).map(|(v, t)| BenchRow { mode: v.mode, nodes: v.graph.node_count(), mean_latency: t / repeats as f64, repeats }).collect())
}

fn check_node_counts(variants: &[Variant]) -> Result<()> {
    let count = |m| variants.iter().find(|v| v.mode == m).map(|v| v.graph.node_count());
    let float = count(ExecMode::Float);
    if let (Some(f), Some(z)) = (float, count(ExecMode::ZeroOverhead)) {
        if f != z {
            return Err(Error::GraphShape(format!("zero-overhead graph has {z} nodes, float has {f}")));
        }
    }
    if let (Some(f), Some(c)) = (float, count(ExecMode::Conventional)) {
        if c <= f {
            return Err(Error::GraphShape(format!("conventional graph has {c} nodes, float has {f}")));
        }
    }
    Ok(())
}
