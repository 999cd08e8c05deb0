//! Command implementations behind the `actstore` binary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use actstore_core::bitcodec::{self, DEFAULT_TILE_ELEMS};
use actstore_core::pagestore::DEFAULT_PAGE_SIZE;
use actstore_core::policy::Ladder;
use actstore_core::quant::{Bitwidth, ImportanceMetric};
use actstore_core::reduce::{profile_strategies, select_from_samples};
use actstore_core::refnet::{self, TrainConfig};
use actstore_core::trace::{self, synth, ReplayConfig};
use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod report;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] actstore_core::Error),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    /// 3 for a violated invariant during replay, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(actstore_core::Error::InvariantViolation(_)) => 3,
            _ => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn read(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })
}

#[derive(Debug, Parser)]
#[command(name = "actstore", version, about = "Compressed activation store: replay, benchmarks, reference training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MetricArg {
    Range,
    Magnitude,
    Qerr,
}

impl From<MetricArg> for ImportanceMetric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Range => ImportanceMetric::Range,
            MetricArg::Magnitude => ImportanceMetric::Magnitude,
            MetricArg::Qerr => ImportanceMetric::QuantErrorEstimate,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TraceKind {
    Resnet18,
    Transformer,
}

fn parse_bitwidth(s: &str) -> Result<Bitwidth, String> {
    let bits: u8 = s.parse().map_err(|_| format!("`{s}` is not a bit-width"))?;
    Bitwidth::new(bits).map_err(|e| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Replay a JSON-lines trace through the controller and store.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        /// Memory budget in bytes; defaults to the fp32 size of one iteration.
        #[arg(long)]
        mem_budget: Option<u64>,
        #[arg(long)]
        time_budget: Option<f64>,
        #[arg(long, default_value_t = DEFAULT_PAGE_SIZE)]
        page_size: u64,
        /// Arena growth step in bytes; defaults to min(100 MiB, budget).
        #[arg(long)]
        step: Option<u64>,
        #[arg(long, default_value_t = DEFAULT_TILE_ELEMS)]
        tile: u32,
        /// Store everything at one width instead of the quartile ladder.
        #[arg(long, value_parser = parse_bitwidth)]
        bitwidth: Option<Bitwidth>,
        /// Metrics CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Decision log (JSON-lines) destination.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Run the full store consistency check after every event.
        #[arg(long)]
        check: bool,
    },
    /// Time every reduction strategy and write the profiling table.
    BenchReduce {
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 4096, 50_176, 393_216])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Where to write the size-to-strategy table.
        #[arg(long)]
        profile: Option<PathBuf>,
    },
    /// Measure pack/unpack throughput and stored bytes per element.
    BenchCodec {
        #[arg(long, default_value_t = 1_000_000)]
        numel: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [2u8, 4, 8])]
        bitwidths: Vec<u8>,
        #[arg(long, default_value_t = DEFAULT_TILE_ELEMS)]
        tile: u32,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train the reference MLP at full precision and with stored activations.
    TrainRef {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, value_parser = parse_bitwidth, default_value = "4")]
        bitwidth: Bitwidth,
        #[arg(long, value_enum, default_value_t = MetricArg::Qerr)]
        metric: MetricArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a replay metrics CSV.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        /// Optional plot-ready CSV (iteration, MiB used, MiB budget, ratio).
        #[arg(long)]
        plot_out: Option<PathBuf>,
    },
    /// Write one of the bundled synthetic traces.
    GenTrace {
        #[arg(long, value_enum)]
        kind: TraceKind,
        #[arg(long, default_value_t = 10)]
        iterations: u64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Runs a command; returns what should go to stdout.
pub fn run(cmd: Command) -> CliResult<String> {
    match cmd {
        Command::Replay {
            trace: path,
            mem_budget,
            time_budget,
            page_size,
            step,
            tile,
            bitwidth,
            out,
            log,
            check,
        } => {
            let events = trace::parse_trace(&read(&path)?)?;
            let budget = mem_budget.unwrap_or_else(|| trace::fp32_bytes_per_iter(&events).max(page_size));
            let mut cfg = ReplayConfig::new(budget);
            cfg.time_budget = time_budget.unwrap_or(f64::INFINITY);
            cfg.page_size = page_size;
            cfg.step = step;
            cfg.tile_elems = tile;
            cfg.ladder = bitwidth.map_or(Ladder::Quartile, Ladder::Fixed);
            cfg.check_invariants = check;
            let report = trace::replay(&events, &cfg)?;
            let csv = trace::metrics_csv(&report.metrics);
            if let Some(p) = log {
                write(&p, &report.decision_log())?;
            }
            match out {
                Some(p) => {
                    write(&p, &csv)?;
                    Ok(format!(
                        "replayed {} iterations; overall ratio {:.2}x\n",
                        report.metrics.len(),
                        report.overall_ratio()
                    ))
                }
                None => Ok(csv),
            }
        }
        Command::BenchReduce { sizes, reps, profile } => {
            let samples = profile_strategies(&sizes, reps)?;
            let mut out = format!("{:>10}  {:<20}{:>14}\n", "numel", "strategy", "median_us");
            for s in &samples {
                let _ = writeln!(out, "{:>10}  {:<20}{:>14.2}", s.numel, s.strategy.name(), s.median_ns as f64 / 1e3);
            }
            let table = select_from_samples(&samples);
            if let Some(p) = profile {
                write(&p, &table.to_text())?;
            }
            out.push_str("\nselected:\n");
            out.push_str(&table.to_text());
            Ok(out)
        }
        Command::BenchCodec {
            numel,
            bitwidths,
            tile,
            reps,
            seed,
        } => bench_codec(numel, &bitwidths, tile, reps.max(1), seed),
        Command::TrainRef {
            seed,
            epochs,
            bitwidth,
            metric,
            out,
        } => {
            let cfg = TrainConfig {
                seed,
                epochs,
                bitwidth,
                metric: metric.into(),
                ..TrainConfig::default()
            };
            let csv = refnet::accuracy_csv(&refnet::train(&cfg)?);
            match out {
                Some(p) => {
                    write(&p, &csv)?;
                    Ok(String::new())
                }
                None => Ok(csv),
            }
        }
        Command::Report { metrics, plot_out } => {
            let summary = report::summarize(&read(&metrics)?)?;
            if let Some(p) = plot_out {
                write(&p, &summary.plot_csv())?;
            }
            Ok(summary.render())
        }
        Command::GenTrace {
            kind,
            iterations,
            seed,
            out,
        } => {
            let shapes = match kind {
                TraceKind::Resnet18 => synth::resnet18_shapes(6),
                TraceKind::Transformer => synth::transformer_shapes(4, 128, 256, 4, 4),
            };
            let cfg = synth::SynthConfig {
                iterations,
                seed,
                ..synth::SynthConfig::default()
            };
            let text = trace::to_jsonl(&synth::trace(&shapes, &cfg, &[]));
            match out {
                Some(p) => {
                    write(&p, &text)?;
                    Ok(String::new())
                }
                None => Ok(text),
            }
        }
    }
}

fn bench_codec(numel: usize, bitwidths: &[u8], tile: u32, reps: usize, seed: u64) -> CliResult<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = format!(
        "{:>4}{:>12}{:>14}{:>16}{:>16}\n",
        "bits", "numel", "bytes/elem", "pack_MB/s", "unpack_MB/s"
    );
    for &bits in bitwidths {
        let b = Bitwidth::new(bits)?;
        if !b.is_packed() {
            return Err(actstore_core::Error::InvalidInput(format!("bit-width {b} is not packable")).into());
        }
        let q: Vec<u32> = (0..numel).map(|_| rng.random_range(0..=b.max_level())).collect();
        let qp = actstore_core::quant::QuantParams {
            bitwidth: b,
            min: 0.0,
            scale: 1.0,
        };
        let (mut pack_t, mut unpack_t) = (f64::MAX, f64::MAX);
        let mut bytes = 0;
        for _ in 0..reps {
            let t = Instant::now();
            let buf = bitcodec::pack(&q, &qp, tile)?;
            pack_t = pack_t.min(t.elapsed().as_secs_f64());
            let t = Instant::now();
            let back = bitcodec::unpack(&buf)?;
            unpack_t = unpack_t.min(t.elapsed().as_secs_f64());
            if back != q {
                return Err(actstore_core::Error::InvariantViolation(format!("{bits}-bit round trip mismatch")).into());
            }
            bytes = buf.serialized_len();
        }
        let mb = numel as f64 * 4.0 / 1e6;
        let _ = writeln!(
            out,
            "{bits:>4}{numel:>12}{:>14.4}{:>16.1}{:>16.1}",
            bytes as f64 / numel.max(1) as f64,
            mb / pack_t,
            mb / unpack_t
        );
    }
    Ok(out)
}
