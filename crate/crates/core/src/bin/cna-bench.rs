use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use numa_cna::bench::{emit_report, run_bench, BenchConfig, BenchError, BenchMode, Format};
use numa_cna::cna::CnaConfig;
use numa_cna::LockKind;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Kv,
    Raw,
    Sim,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

/// Lock contention benchmark: a key-value map or a shared counter under one
/// lock, or the simulated CNA/MCS protocol.
///
/// Environment: CNA_THRESHOLD and CNA_SHUFFLE_THRESHOLD override the
/// fairness masks, CNA_SEED the fairness seed, and CNA_MOCK_TOPOLOGY
/// (for example `t0:0,t1:1`) replaces the OS socket map.
#[derive(Debug, Parser)]
#[command(name = "cna-bench", version)]
struct Args {
    /// cna, cna-opt, mcs, tas, ticket, word-mcs, word-cna
    #[arg(long, default_value = "cna")]
    lock: LockKind,
    #[arg(long, default_value_t = 4)]
    threads: usize,
    /// Measured seconds.
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    #[arg(long, default_value_t = 1024)]
    key_range: u64,
    /// Update percentage, split evenly between inserts and removes.
    #[arg(long, default_value_t = 20)]
    update_pct: u32,
    /// Pseudo-random loop iterations between operations.
    #[arg(long, default_value_t = 0)]
    external_work: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seconds run before measuring.
    #[arg(long, default_value_t = 0.0)]
    warmup: f64,
    #[arg(long, value_enum, default_value = "json")]
    format: FormatArg,
    /// Pin worker i to CPU i modulo the CPU count.
    #[arg(long)]
    pin: bool,
    #[arg(long, value_enum, default_value = "kv")]
    mode: ModeArg,
    /// Fixed operation count per thread instead of a timed run.
    #[arg(long)]
    ops_per_thread: Option<u64>,
    /// Handovers to simulate in sim mode.
    #[arg(long, default_value_t = 1_000_000)]
    sim_handovers: u64,
}

fn config_from(args: &Args) -> Result<BenchConfig, BenchError> {
    let mut cna = CnaConfig::default().with_seed(args.seed);
    if args.lock == LockKind::CnaOpt {
        cna = CnaConfig::optimized().with_seed(args.seed);
    }
    let cna = cna
        .with_env_overrides()
        .map_err(|e| BenchError::Config(e.to_string()))?;
    let config = BenchConfig {
        lock: args.lock,
        threads: args.threads,
        duration_s: args.duration,
        key_range: args.key_range,
        update_pct: args.update_pct,
        external_work: args.external_work,
        seed: args.seed,
        warmup_s: args.warmup,
        format: match args.format {
            FormatArg::Json => Format::Json,
            FormatArg::Csv => Format::Csv,
        },
        pin: args.pin,
        ops_per_thread: args.ops_per_thread,
        sim_handovers: args.sim_handovers,
        cna,
    };
    config.validate()?;
    Ok(config)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let config = match config_from(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("cna-bench: {e}");
            return ExitCode::from(2);
        }
    };
    let mode = match args.mode {
        ModeArg::Kv => BenchMode::Kv,
        ModeArg::Raw => BenchMode::Raw,
        ModeArg::Sim => BenchMode::Sim,
    };
    match run_bench(&config, mode) {
        Ok(report) => {
            print!("{}", emit_report(&report, config.format));
            ExitCode::SUCCESS
        }
        Err(e @ (BenchError::Config(_) | BenchError::Topology(_))) => {
            eprintln!("cna-bench: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("cna-bench: {e}");
            ExitCode::FAILURE
        }
    }
}
