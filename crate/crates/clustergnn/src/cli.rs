//! Command-line surface: `match`, `train`, and `bench` subcommands.
//!
//! Exit codes: 0 success, 2 file/config format error, 3 configuration
//! mismatch between inputs, 4 training aborted on non-finite loss, 5 bench
//! self-check divergence.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::bench::{run_bench, BenchConfig, BenchMode};
use crate::config::load_train_config;
use crate::error::Error;
use crate::io;
use crate::model::MatchHead;
use crate::train::{train, TrainEnd};

#[derive(Parser)]
#[command(name = "clustergnn", version, about = "Cluster-routed sparse attention feature matcher")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Match two keypoint files with trained weights.
    Match(MatchArgs),
    /// Train a model on synthetic correspondence streams.
    Train(TrainArgs),
    /// Benchmark dense vs clustered attention scaling.
    Bench(BenchArgs),
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    kp_a: PathBuf,
    #[arg(long)]
    kp_b: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Minimum exp(score) for an accepted match.
    #[arg(long, default_value_t = 0.2)]
    threshold: f64,
    /// Matching head: dual-softmax or sinkhorn.
    #[arg(long, default_value = "dual-softmax")]
    head: String,
    #[arg(long, default_value_t = 100)]
    sinkhorn_iters: usize,
    /// Parallelism cap; 1 keeps timings reproducible.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Metrics log path; defaults to `<out>.log`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated feature counts.
    #[arg(long, default_value = "512,1024,2048,4096,8192")]
    sizes: String,
    /// Comma-separated modes out of dense,clustered.
    #[arg(long, default_value = "dense,clustered")]
    modes: String,
    /// Comma-separated cluster schedule; one layer per entry.
    #[arg(long, default_value = "16,32,64,128")]
    schedule: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    d: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Emit a plain-text log-log plot of the timing columns.
    #[arg(long, default_value_t = false)]
    plot: bool,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

const EXIT_OK: i32 = 0;
const EXIT_FORMAT: i32 = 2;
const EXIT_CONFIG_MISMATCH: i32 = 3;
const EXIT_NONFINITE: i32 = 4;
const EXIT_SELFCHECK: i32 = 5;

fn fail(code: i32, msg: impl std::fmt::Display) -> i32 {
    eprintln!("error: {msg}");
    code
}

fn format_code(e: &Error) -> i32 {
    match e {
        Error::NonFiniteLoss { .. } => EXIT_NONFINITE,
        _ => EXIT_FORMAT,
    }
}

pub fn run_cli() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .try_init()
        .ok();
    let cli = Cli::parse();
    match cli.command {
        Command::Match(args) => cmd_match(args),
        Command::Train(args) => cmd_train(args),
        Command::Bench(args) => cmd_bench(args),
    }
}

fn cmd_match(args: MatchArgs) -> i32 {
    let head = match args.head.as_str() {
        "dual-softmax" => MatchHead::DualSoftmax,
        "sinkhorn" => MatchHead::Sinkhorn { iters: args.sinkhorn_iters },
        other => return fail(EXIT_FORMAT, format!("unknown head `{other}`")),
    };
    let model = match io::read_weights(&args.weights) {
        Ok(m) => m,
        Err(e) => return fail(format_code(&e), e),
    };
    let kp_a = match io::read_keypoints(&args.kp_a) {
        Ok(k) => k,
        Err(e) => return fail(format_code(&e), e),
    };
    let kp_b = match io::read_keypoints(&args.kp_b) {
        Ok(k) => k,
        Err(e) => return fail(format_code(&e), e),
    };
    for (name, kp) in [("kp-a", &kp_a), ("kp-b", &kp_b)] {
        if kp.keypoints.descriptor_dim() != model.config.d {
            return fail(
                EXIT_CONFIG_MISMATCH,
                format!(
                    "{name} descriptor dim {} does not match weights dim {}",
                    kp.keypoints.descriptor_dim(),
                    model.config.d
                ),
            );
        }
    }
    let result = match model.match_pair(
        &kp_a.keypoints,
        &kp_b.keypoints,
        (kp_a.image_w, kp_a.image_h),
        (kp_b.image_w, kp_b.image_h),
        head,
        args.threshold,
        args.threads,
    ) {
        Ok((r, _)) => r,
        Err(e @ Error::Config(_)) => return fail(EXIT_CONFIG_MISMATCH, e),
        Err(e) => return fail(format_code(&e), e),
    };
    if let Err(e) = io::write_matches(&args.out, &result) {
        return fail(format_code(&e), e);
    }
    println!(
        "matched {} pairs ({} unmatched in a, {} in b)",
        result.pairs.len(),
        result.unmatched_a.len(),
        result.unmatched_b.len()
    );
    EXIT_OK
}

fn cmd_train(args: TrainArgs) -> i32 {
    let cfg = match load_train_config(&args.config) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_FORMAT, e),
    };
    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.log", args.out.display())));
    let mut log = match std::fs::File::create(&log_path) {
        Ok(f) => f,
        Err(e) => return fail(EXIT_FORMAT, e),
    };
    let outcome = match train(&cfg, args.seed, |m| {
        let line = m.to_line();
        println!("{line}");
        let _ = writeln!(log, "{line}");
    }) {
        Ok(o) => o,
        Err(e) => return fail(format_code(&e), e),
    };
    if let Err(e) = io::write_weights(&args.out, &outcome.model) {
        return fail(format_code(&e), e);
    }
    match outcome.end {
        TrainEnd::Completed => {
            println!("wrote weights to {}", args.out.display());
            EXIT_OK
        }
        TrainEnd::AbortedNonFinite { step } => fail(
            EXIT_NONFINITE,
            format!(
                "non-finite loss at step {step}; last good checkpoint written to {}",
                args.out.display()
            ),
        ),
    }
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>, String> {
    raw.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|_| format!("invalid {what} `{s}`")))
        .collect()
}

fn cmd_bench(args: BenchArgs) -> i32 {
    let sizes = match parse_list::<usize>(&args.sizes, "size") {
        Ok(v) => v,
        Err(e) => return fail(EXIT_FORMAT, e),
    };
    if sizes.iter().any(|&n| n < 64) {
        return fail(EXIT_FORMAT, "bench sizes must be at least 64");
    }
    let modes = match args
        .modes
        .split(',')
        .map(|s| BenchMode::parse(s.trim()))
        .collect::<crate::error::Result<Vec<_>>>()
    {
        Ok(v) => v,
        Err(e) => return fail(EXIT_FORMAT, e),
    };
    let schedule = match parse_list::<usize>(&args.schedule, "schedule entry") {
        Ok(v) => v,
        Err(e) => return fail(EXIT_FORMAT, e),
    };
    let cfg = BenchConfig {
        sizes,
        modes,
        schedule,
        d: args.d,
        heads: args.heads,
        reps: args.reps,
        threads: args.threads,
        seed: args.seed,
    };
    let rows = match run_bench(&cfg, |row| {
        println!(
            "n={} mode={} ms={:.3} bytes={} unmasked={} dense={}",
            row.n, row.mode, row.ms, row.bytes, row.unmasked_pairs, row.dense_pairs
        );
    }) {
        Ok(r) => r,
        Err(e @ Error::Degenerate(_)) => return fail(EXIT_SELFCHECK, e),
        Err(e) => return fail(format_code(&e), e),
    };
    if let Err(e) = io::write_bench_csv(&args.out, &rows) {
        return fail(format_code(&e), e);
    }
    if args.plot {
        print_plot(&rows);
    }
    println!("wrote {} rows to {}", rows.len(), args.out.display());
    EXIT_OK
}

/// Log-log text plot of median wall time per mode.
fn print_plot(rows: &[io::BenchRow]) {
    let width = 60usize;
    let max_ms = rows.iter().map(|r| r.ms).fold(1e-9, f64::max);
    let min_ms = rows.iter().map(|r| r.ms).fold(f64::INFINITY, f64::min);
    let span = (max_ms / min_ms).ln().max(1e-9);
    println!("\nwall time (log scale), {:.3} ms .. {:.3} ms", min_ms, max_ms);
    for row in rows {
        let frac = (row.ms / min_ms).ln() / span;
        let bar = "#".repeat(1 + (frac * (width - 1) as f64).round() as usize);
        println!("{:>6} {:<9} |{bar}", row.n, row.mode);
    }
}
