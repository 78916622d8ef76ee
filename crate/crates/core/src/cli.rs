//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 data or
//! model error.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::dataset::{load_idx_files, Dataset};
use crate::error::{Error, Result};
use crate::fault::{corrupt_network, expected_flip_check, FaultConfig, FaultTarget, MemoryImage};
use crate::graph::{ExecMode, NetworkGraph};
use crate::harness::{bench_overhead, build_variants, evaluate, footprint, reduction, run_sweep, Metric, SweepSpec, Variant};
use crate::model_io::{load_model_file, save_model_file};
use crate::quant::{qmax, QuantConfig};
use crate::report::{write_report_file, ReportFormat};
use crate::toy::{random_images, random_toy_net};
use crate::transform::{build_conventional, transform_network};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "bnnq", version, about = "Binary neural network inference with selective integer quantization and bit-flip fault simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn parse_bits(s: &str) -> std::result::Result<u8, String> {
    match s.parse::<u8>() {
        Ok(b) if (2..=16).contains(&b) => Ok(b),
        _ => Err(format!("bit width must be an integer in [2, 16], got `{s}`")),
    }
}

fn parse_rate(s: &str) -> std::result::Result<f64, String> {
    match s.trim().parse::<f64>() {
        Ok(r) if (0.0..=1.0).contains(&r) => Ok(r),
        _ => Err(format!("fault rate must be a number in [0, 1], got `{s}`")),
    }
}

fn parse_target(s: &str) -> std::result::Result<FaultTarget, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_from_str<T: std::str::FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_workers(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n) if n >= 1 => Ok(n),
        _ => Err(format!("worker count must be a positive integer, got `{s}`")),
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Quantize a float model (zero-overhead form, or the Q/D-wrapped form).
    Transform {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_parser = parse_bits)]
        bits: u8,
        #[arg(long)]
        out: PathBuf,
        /// Write the conventional Q/D-wrapped graph instead.
        #[arg(long)]
        conventional: bool,
    },
    /// Print classification accuracy over an IDX dataset.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Write a copy of a model with one trial's bit flips applied.
    Inject {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_parser = parse_rate)]
        rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        trial: u64,
        /// `all`, a layer name such as `bn2`, or `kind:<slug>` such as `kind:bn`.
        #[arg(long, default_value = "all", value_parser = parse_target)]
        target: FaultTarget,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fault-rate sweep over several trials per rate.
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, value_delimiter = ',', value_parser = parse_rate, default_value = "1e-6,4e-6,1e-5,4e-5,1e-4,4e-4,1e-3")]
        rates: Vec<f64>,
        #[arg(long, default_value_t = 500)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "acc", value_parser = parse_from_str::<Metric>)]
        metric: Metric,
        #[arg(long, value_delimiter = ',', value_parser = parse_from_str::<ExecMode>, default_value = "zobnn")]
        variants: Vec<ExecMode>,
        /// Bit width for quantized variants derived from a float model.
        #[arg(long, value_parser = parse_bits, default_value_t = 16)]
        bits: u8,
        #[arg(long, default_value_t = 512)]
        eval: usize,
        #[arg(long, default_value = "all", value_parser = parse_target)]
        target: FaultTarget,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "csv", value_parser = parse_from_str::<ReportFormat>)]
        format: ReportFormat,
        /// Worker threads (default: available cores); results do not depend on it.
        #[arg(long, value_parser = parse_workers)]
        workers: Option<usize>,
    },
    /// Parameter memory per layer; float models also list every bit width.
    Footprint {
        #[arg(long)]
        model: PathBuf,
    },
    /// Node counts and mean single-input latency of each variant.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        #[arg(long, value_parser = parse_bits, default_value_t = 16)]
        bits: u8,
        /// Inputs default to random images drawn from `--seed`.
        #[arg(long, requires = "labels")]
        images: Option<PathBuf>,
        #[arg(long, requires = "images")]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Exhaustive quantize/dequantize reciprocity and injector statistics.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::InvalidArgument(_) | Error::UnknownLayer(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            }
        }
    }
}

fn seed_line(out: &mut dyn Write, seed: u64) -> Result<()> {
    writeln!(out, "seed: {seed}")?;
    Ok(())
}

fn load_data(images: &PathBuf, labels: &PathBuf, limit: Option<usize>) -> Result<Dataset> {
    let d = load_idx_files(images, labels)?;
    Ok(match limit {
        Some(n) => d.take(n),
        None => d,
    })
}

/// Variants of `net`: derived when it is a float model, otherwise only its
/// own mode is available.
fn variants_of(net: NetworkGraph, bits: u8, modes: &[ExecMode]) -> Result<Vec<Variant>> {
    if net.mode() == ExecMode::Float {
        return build_variants(&net, bits, modes);
    }
    match modes {
        [m] if *m == net.mode() => Ok(vec![Variant { mode: *m, graph: net }]),
        _ => Err(Error::InvalidArgument(format!("a {} model only provides the `{}` variant; pass a float model to derive others", net.mode(), net.mode()))),
    }
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Transform { model, bits, out: path, conventional } => {
            seed_line(out, 0)?;
            let net = load_model_file(&model)?;
            let graph = if conventional {
                build_conventional(&net, bits)?
            } else {
                let (g, log) = transform_network(&net, bits)?;
                for s in &log.steps {
                    writeln!(out, "{:?}: {} at {}", s.rule, s.node, s.layer)?;
                }
                writeln!(out, "eliminated {} Q/D nodes", log.nodes_eliminated())?;
                g
            };
            if let Some(q) = graph.quant() {
                writeln!(out, "bits: {} delta: {:e}", q.bits(), q.delta())?;
            }
            writeln!(out, "nodes: {} -> {}", net.node_count(), graph.node_count())?;
            save_model_file(&graph, &path)?;
        }
        Command::Infer { model, images, labels, limit } => {
            seed_line(out, 0)?;
            let net = load_model_file(&model)?;
            let data = load_data(&images, &labels, limit)?;
            let acc = evaluate(&net, &data, Metric::Accuracy)?;
            writeln!(out, "mode: {}", net.mode())?;
            writeln!(out, "accuracy: {:.4} ({} images)", acc, data.len())?;
        }
        Command::Inject { model, rate, seed, trial, target, out: path } => {
            seed_line(out, seed)?;
            let net = load_model_file(&model)?;
            let cfg = FaultConfig::new(rate, seed, trial, target)?;
            let c = corrupt_network(&net, &cfg)?;
            writeln!(out, "trial: {trial} target: {} bits flipped: {}", cfg.target, c.flips)?;
            save_model_file(&c.graph, &path)?;
        }
        Command::Sweep { model, images, labels, rates, trials, seed, metric, variants, bits, eval, target, report, format, workers } => {
            seed_line(out, seed)?;
            let net = load_model_file(&model)?;
            let data = load_data(&images, &labels, None)?;
            let vs = variants_of(net, bits, &variants)?;
            let spec = SweepSpec { rates, trials, seed, metric, eval_size: eval, target, workers: workers.unwrap_or_else(|| SweepSpec::default().workers) };
            let rep = run_sweep(&spec, &vs, &data)?;
            for c in &rep.cells {
                let s = c.stats;
                writeln!(
                    out,
                    "{:<12} P={:<8e} clean={:.4} mean={:.4} median={:.4} q1={:.4} q3={:.4} flips={}",
                    c.mode.name(),
                    c.rate,
                    c.clean,
                    s.mean,
                    s.median,
                    s.q1,
                    s.q3,
                    c.total_flips()
                )?;
            }
            write_report_file(&rep, format, &report)?;
            writeln!(out, "report: {}", report.display())?;
        }
        Command::Footprint { model } => {
            seed_line(out, 0)?;
            let net = load_model_file(&model)?;
            let fp = footprint(&net);
            writeln!(out, "mode: {}", net.mode())?;
            for l in &fp.layers {
                writeln!(out, "{:<10} {:>9} bits", l.name, l.bits)?;
            }
            writeln!(out, "{:<10} {:>9} bits", "total", fp.total)?;
            if net.mode() == ExecMode::Float {
                for bits in (8..=16).rev() {
                    let q = footprint(&transform_network(&net, bits)?.0);
                    writeln!(out, "zobnn-{bits:<2} {:>9} bits  reduction {:.2}%", q.total, 100.0 * reduction(&q, &fp))?;
                }
            }
        }
        Command::Bench { model, repeats, bits, images, labels, seed } => {
            seed_line(out, seed)?;
            let net = load_model_file(&model)?;
            let data = match (images, labels) {
                (Some(i), Some(l)) => load_data(&i, &l, None)?,
                _ => random_bench_images(&net, seed)?,
            };
            let modes = [ExecMode::Float, ExecMode::Conventional, ExecMode::ZeroOverhead];
            let vs = if net.mode() == ExecMode::Float { build_variants(&net, bits, &modes)? } else { variants_of(net.clone(), bits, &[net.mode()])? };
            let rows = bench_overhead(&vs, &data, repeats)?;
            for r in &rows {
                writeln!(out, "{:<12} nodes={:<3} mean={:.2} us over {} repeats", r.mode.name(), r.nodes, r.mean_latency * 1e6, r.repeats)?;
            }
            let lat = |m| rows.iter().find(|r| r.mode == m).map(|r| r.mean_latency);
            if let (Some(f), Some(z), Some(c)) = (lat(ExecMode::Float), lat(ExecMode::ZeroOverhead), lat(ExecMode::Conventional)) {
                writeln!(out, "zobnn/float {:.3}  conventional/zobnn {:.3}", z / f, c / z)?;
            }
        }
        Command::Selftest { seed } => {
            seed_line(out, seed)?;
            return selftest(seed, out);
        }
    }
    Ok(EXIT_OK)
}

/// Random images sized for the model's first layer; the input extent is
/// inferred from the classifier's fan-in (`channels * (h/2) * (w/2)`).
fn random_bench_images(net: &NetworkGraph, seed: u64) -> Result<Dataset> {
    let linear = net.layers().find(|l| l.kind == crate::layers::LayerKind::Linear);
    let conv = net.layers().filter(|l| l.kind == crate::layers::LayerKind::BinaryConv).last();
    let (Some(lin), Some(conv)) = (linear, conv) else {
        return Err(Error::InvalidArgument("pass --images/--labels for this model".into()));
    };
    let (classes, fan_in) = (lin.params[0].shape()[0], lin.params[0].shape()[1]);
    let side = ((fan_in / conv.params[0].shape()[0]) as f64).sqrt() as usize * 2;
    random_images(32, side, side, classes, seed)
}

fn selftest(seed: u64, out: &mut dyn Write) -> Result<i32> {
    let mut ok = true;
    for bits in 2..=16u8 {
        let cfg = QuantConfig::new(bits, 0.01)?;
        let m = qmax(bits);
        let failures = (-m..=m).filter(|&q| cfg.quantize(cfg.dequantize(q)).ok() != Some(q)).count();
        ok &= failures == 0;
        writeln!(out, "reciprocity b={bits:<2} {} values, {failures} failures", 2 * m + 1)?;
    }
    let net = random_toy_net(8, 8, 10, seed)?;
    let image = MemoryImage::encode(&net, &FaultTarget::All)?;
    let n = image.total_bits() as f64;
    for rate in [1e-3, 1e-2, 0.5] {
        let trials = 1000u64;
        let frac = expected_flip_check(&image, rate, seed, trials)?;
        let se = (rate * (1.0 - rate) / (n * trials as f64)).sqrt();
        let pass = (frac - rate).abs() <= 3.0 * se;
        ok &= pass;
        writeln!(out, "injector P={rate:e} mean flipped fraction {frac:.6e} ({:.2} standard errors) {}", (frac - rate) / se, verdict(pass))?;
    }
    for (rate, want) in [(0.0, 0.0), (1.0, 1.0)] {
        let frac = expected_flip_check(&image, rate, seed, 100)?;
        ok &= frac == want;
        writeln!(out, "injector P={rate} flipped fraction {frac} {}", verdict(frac == want))?;
    }
    writeln!(out, "selftest {}", verdict(ok))?;
    Ok(if ok { EXIT_OK } else { EXIT_DATA })
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}
