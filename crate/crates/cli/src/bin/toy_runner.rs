//! Runner-protocol implementation for toy kernels.
//!
//! A toy kernel is a `key = value` file (see `ToyKernel`) that declares how
//! long one execution takes and how it fails. The runner computes
//! `y = 2x + 1` over a seeded input, so reference and correct candidates
//! agree exactly, and reports the declared cost as every timing sample.
//! Invoked with `--source @reference` it plays the reference implementation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use kernloop_core::verifier::{Tensor, ToyFailure, ToyKernel, REFERENCE_SENTINEL};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Build,
    Produce,
    Time,
}

#[derive(Debug, Parser)]
#[command(name = "kernloop-toy-runner", about = "Runner-protocol implementation for toy kernels")]
struct Args {
    #[arg(long, value_enum)]
    mode: Mode,
    /// Kernel file, or `@reference`.
    #[arg(long)]
    source: String,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    timing: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    warmup: u32,
    #[arg(long, default_value_t = 100)]
    reps: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Element count of the input vector.
    #[arg(long, default_value_t = 1024)]
    size: usize,
    #[arg(long, default_value_t = 7998)]
    reference_cost_ns: u64,
}

fn input(seed: u64, n: usize) -> Vec<f32> {
    // SplitMix64 keeps the input identical across platforms.
    let mut state = seed;
    (0..n)
        .map(|_| {
            state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^= z >> 31;
            ((z >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
        })
        .collect()
}

fn run(args: &Args) -> Result<(), String> {
    let kernel = if args.source == REFERENCE_SENTINEL {
        ToyKernel {
            cost_ns: args.reference_cost_ns,
            fail: None,
        }
    } else {
        let text = std::fs::read_to_string(&args.source).map_err(|e| format!("cannot read kernel source: {e}"))?;
        ToyKernel::parse(&text).map_err(|e| format!("kernel.src: error: {e}"))?
    };
    if kernel.fail == Some(ToyFailure::Build) {
        return Err("kernel.src:1: error: simulated compile failure".into());
    }
    match args.mode {
        Mode::Build => Ok(()),
        Mode::Produce => {
            if kernel.fail == Some(ToyFailure::Runtime) {
                return Err("simulated crash: segmentation fault in kernel".into());
            }
            let mut y: Vec<f32> = input(args.seed, args.size).iter().map(|x| 2.0 * x + 1.0).collect();
            if kernel.fail == Some(ToyFailure::Wrong) {
                if let Some(first) = y.first_mut() {
                    *first += 1.0;
                }
            }
            let out = args.output.as_ref().ok_or("--output is required in produce mode")?;
            let tensor = Tensor::f32(vec![args.size as u64], y).map_err(|e| e.to_string())?;
            tensor.write(out).map_err(|e| format!("cannot write output tensor: {e}"))
        }
        Mode::Time => {
            if kernel.fail == Some(ToyFailure::Runtime) {
                return Err("simulated crash: segmentation fault in kernel".into());
            }
            let path = args.timing.as_ref().ok_or("--timing is required in time mode")?;
            let line = format!("{}\n", kernel.cost_ns);
            std::fs::write(path, line.repeat(args.reps as usize)).map_err(|e| format!("cannot write timing file: {e}"))
        }
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}
