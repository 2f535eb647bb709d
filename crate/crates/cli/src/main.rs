mod attn_dump;
mod bench;
mod common;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ssmq_core::Error;

/// Data-free quantization lab for selective state-space vision models.
#[derive(Parser)]
#[command(name = "ssmq", version)]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct ConfigArgs {
    /// Run config (TOML with a top-level `seed`).
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config value, e.g. `--set gen.iterations=50`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize synthetic calibration images from noise.
    Gen(pipeline::GenArgs),
    /// Fit per-step inlier scales and outlier thresholds on a batch.
    Calib(pipeline::CalibArgs),
    /// Compare quantized inference against full precision.
    QuantEval(pipeline::EvalArgs),
    /// Write implicit and enhanced attention of one sample.
    AttnDump(attn_dump::DumpArgs),
    /// Time the hybrid integer GEMM against the f64 product.
    GemmBench(bench::BenchArgs),
}

fn exit_code(e: &Error) -> u8 {
    if e.is_validation() {
        2
    } else if e.is_numeric() {
        3
    } else {
        4
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(4);
        }
    }
    let res = match cli.command {
        Command::Gen(a) => pipeline::gen(a),
        Command::Calib(a) => pipeline::calib(a),
        Command::QuantEval(a) => pipeline::quant_eval(a),
        Command::AttnDump(a) => attn_dump::run(a),
        Command::GemmBench(a) => bench::run(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
