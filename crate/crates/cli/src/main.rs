//! `kvreuse` command-line front end.

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kvreuse::Error;

#[derive(Debug, Parser)]
#[command(name = "kvreuse", version, about = "KV-cache reuse laboratory and serving simulator")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<std::path::PathBuf>,
    /// KV pool file loaded before and saved after a simulation.
    #[arg(long, global = true, value_name = "FILE")]
    cache_file: Option<std::path::PathBuf>,
    /// Output format: text or json for studies, json or csv for simulations.
    #[arg(long, global = true)]
    format: Option<String>,
    /// Output path; stdout when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    out: Option<std::path::PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Match two token files and report hit rates.
    Match(MatchArgs),
    /// First-order deviation convergence over seeded instances.
    Deviate(DeviateArgs),
    /// Compare recomputation strategies over seeded instances.
    Select(SelectArgs),
    /// Cache-aware batching against FCFS and the exhaustive optimum.
    Schedule(ScheduleArgs),
    /// Run the serving simulation on a trace.
    Simulate(Box<SimulateArgs>),
    /// Write a synthetic trace.
    GenTrace(GenTraceArgs),
}

#[derive(Debug, Args)]
struct MatchArgs {
    /// Tokens of the new request.
    target: std::path::PathBuf,
    /// Tokens of the cached request.
    candidate: std::path::PathBuf,
    #[arg(long, default_value_t = 8)]
    window: usize,
    #[arg(long, default_value_t = 31)]
    hash_base: u64,
    #[arg(long, default_value_t = 1_000_000_007)]
    hash_modulus: u64,
}

#[derive(Debug, Args)]
struct DeviateArgs {
    #[arg(long, default_value_t = 20)]
    instances: u64,
    #[arg(long, default_value_t = 3)]
    layer: usize,
    #[arg(long, default_value_t = 0)]
    head: usize,
    /// Largest step; each following step halves it.
    #[arg(long, default_value_t = 1e-2)]
    eps: f64,
    #[arg(long, default_value_t = 4)]
    steps: usize,
}

#[derive(Debug, Args)]
struct SelectArgs {
    #[arg(long, default_value_t = 100)]
    instances: u64,
    #[arg(long, default_value_t = 3)]
    layer: usize,
    #[arg(long, default_value_t = 0.2)]
    ratio: f64,
}

#[derive(Debug, Args)]
struct ScheduleArgs {
    /// JSON lines with `id` and `hit_rate` (and optionally `arrival_ms`).
    requests: Option<std::path::PathBuf>,
    /// Comma-separated hit rates, used instead of a file.
    #[arg(long, value_delimiter = ',')]
    hit_rates: Vec<f64>,
    #[arg(long, default_value_t = 2)]
    batch_size: usize,
    #[arg(long, default_value_t = 10.0)]
    t_base: f64,
    #[arg(long, default_value_t = 100.0)]
    t_comp: f64,
    #[arg(long, default_value_t = 0.5)]
    exponent: f64,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    trace: std::path::PathBuf,
    /// Override a configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    scheduler: Option<String>,
    #[arg(long)]
    matcher: Option<String>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    selection_mode: Option<String>,
    #[arg(long)]
    ratio: Option<String>,
    #[arg(long)]
    n_extra: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    window: Option<String>,
    #[arg(long)]
    hash_base: Option<String>,
    #[arg(long)]
    hash_modulus: Option<String>,
    #[arg(long)]
    t_base: Option<String>,
    #[arg(long)]
    t_comp: Option<String>,
    #[arg(long)]
    exponent: Option<String>,
    #[arg(long)]
    per_token_ms: Option<String>,
    #[arg(long)]
    aging: Option<String>,
    #[arg(long)]
    decode_tick_ms: Option<String>,
    #[arg(long)]
    decode_extra_cost: Option<String>,
    #[arg(long)]
    capacity_bytes: Option<String>,
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    heads: Option<String>,
    #[arg(long)]
    d_model: Option<String>,
    #[arg(long)]
    vocab: Option<String>,
    #[arg(long)]
    causal: Option<String>,
}

impl SimulateArgs {
    /// `(config key, value)` for every flag given.
    fn flag_overrides(&self) -> Vec<(&'static str, &str)> {
        let flags: [(&'static str, &Option<String>); 24] = [
            ("mode", &self.mode),
            ("scheduler", &self.scheduler),
            ("matcher", &self.matcher),
            ("strategy", &self.strategy),
            ("selection-mode", &self.selection_mode),
            ("ratio", &self.ratio),
            ("n-extra", &self.n_extra),
            ("batch-size", &self.batch_size),
            ("window", &self.window),
            ("hash-base", &self.hash_base),
            ("hash-modulus", &self.hash_modulus),
            ("t-base", &self.t_base),
            ("t-comp", &self.t_comp),
            ("exponent", &self.exponent),
            ("per-token-ms", &self.per_token_ms),
            ("aging", &self.aging),
            ("decode-tick-ms", &self.decode_tick_ms),
            ("decode-extra-cost", &self.decode_extra_cost),
            ("capacity-bytes", &self.capacity_bytes),
            ("layers", &self.layers),
            ("heads", &self.heads),
            ("d-model", &self.d_model),
            ("vocab", &self.vocab),
            ("causal", &self.causal),
        ];
        flags
            .into_iter()
            .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
            .collect()
    }
}

#[derive(Debug, Args)]
struct GenTraceArgs {
    #[arg(long, default_value_t = 32)]
    requests: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, default_value_t = 16)]
    chunk_len: usize,
    #[arg(long, default_value_t = 4)]
    chunks: usize,
    #[arg(long, default_value_t = 8)]
    library: usize,
    /// Probability that a chunk comes from the shared library.
    #[arg(long, default_value_t = 0.5)]
    overlap: f64,
    /// Split requests evenly into mostly-shared and mostly-fresh.
    #[arg(long)]
    bimodal: bool,
    #[arg(long, default_value_t = 1000.0)]
    start_ms: f64,
    #[arg(long, default_value_t = 5.0)]
    gap_ms: f64,
    #[arg(long, default_value_t = 8)]
    decode_steps: usize,
    #[arg(long, default_value_t = 4096)]
    vocab: u32,
}

fn exit_code(err: &Error) -> u8 {
    if err.is_validation() {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
