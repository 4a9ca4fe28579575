use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use kvreuse::lab::{convergence_study, strategy_comparison, InstanceShape};
use kvreuse::matcher::{fixed_chunk_match, hit_rate, match_sequences, HashParams};
use kvreuse::model::{ModelConfig, TokenId};
use kvreuse::scheduler::{
    fcfs_schedule, optimal_batches_bruteforce, schedule, total_latency, Batch, LatencyModel, Request,
    BRUTE_FORCE_LIMIT,
};
use kvreuse::selector::Strategy;
use kvreuse::sim::{
    gen_trace, ingest_trace, report_json, run_simulation_with_pool, write_aggregate_csv, write_request_csv,
    write_trace, GenTraceConfig, ReportFormat, SimConfig,
};
use kvreuse::store::KvPool;
use kvreuse::{Error, Result};

use crate::{Cli, Command, DeviateArgs, GenTraceArgs, MatchArgs, ScheduleArgs, SelectArgs, SimulateArgs};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Match(args) => run_match(cli, args),
        Command::Deviate(args) => run_deviate(cli, args),
        Command::Select(args) => run_select(cli, args),
        Command::Schedule(args) => run_schedule(cli, args),
        Command::Simulate(args) => run_simulate(cli, args),
        Command::GenTrace(args) => run_gen_trace(cli, args),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TextFormat {
    Text,
    Json,
}

fn text_format(cli: &Cli) -> Result<TextFormat> {
    match cli.format.as_deref().map(str::to_ascii_lowercase).as_deref() {
        None | Some("text") => Ok(TextFormat::Text),
        Some("json") => Ok(TextFormat::Json),
        Some(other) => Err(Error::Validation(format!("unknown output format {other:?}, expected text or json"))),
    }
}

/// Writes to `--out` or stdout.
fn emit(cli: &Cli, body: &str) -> Result<()> {
    match &cli.out {
        Some(path) => fs::write(path, body).map_err(|e| Error::io_at(path, e))?,
        None => std::io::stdout().write_all(body.as_bytes())?,
    }
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

/// Integers separated by whitespace or commas; `#` starts a comment.
pub fn read_tokens(path: &Path) -> Result<Vec<TokenId>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    let mut tokens = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        for word in line.split(|c: char| c.is_whitespace() || c == ',').filter(|w| !w.is_empty()) {
            tokens.push(word.parse().map_err(|_| Error::Parse {
                line: i + 1,
                reason: format!("{word:?} is not a token id"),
            })?);
        }
    }
    Ok(tokens)
}

#[derive(Serialize)]
struct MatchOutput {
    target_len: usize,
    candidate_len: usize,
    window: usize,
    target_matches: Vec<usize>,
    candidate_matches: Vec<usize>,
    hit_rate: f64,
    fixed_chunk_hit_rate: f64,
}

fn run_match(cli: &Cli, args: &MatchArgs) -> Result<()> {
    let params = HashParams {
        window: args.window,
        base: args.hash_base,
        modulus: args.hash_modulus,
    };
    params.validate().map_err(|e| Error::Validation(e.to_string()))?;
    let target = read_tokens(&args.target)?;
    let candidate = read_tokens(&args.candidate)?;
    let adaptive = match_sequences(&target, &candidate, &params);
    let fixed = fixed_chunk_match(&target, &candidate, args.window)?;
    let out = MatchOutput {
        target_len: target.len(),
        candidate_len: candidate.len(),
        window: args.window,
        hit_rate: hit_rate(&target, &adaptive.target_matches),
        fixed_chunk_hit_rate: hit_rate(&target, &fixed.target_matches),
        target_matches: adaptive.target_matches,
        candidate_matches: adaptive.candidate_matches,
    };
    let body = match text_format(cli)? {
        TextFormat::Json => to_json(&out),
        TextFormat::Text => {
            let pairs: Vec<String> = out
                .target_matches
                .iter()
                .zip(&out.candidate_matches)
                .map(|(t, c)| format!("{t}:{c}"))
                .collect();
            format!(
                "target tokens      {}\ncandidate tokens   {}\nwindow             {}\nmatched pairs      {}\nhit rate           {:.4}\nfixed-chunk rate   {:.4}\n",
                out.target_len,
                out.candidate_len,
                out.window,
                pairs.join(" "),
                out.hit_rate,
                out.fixed_chunk_hit_rate
            )
        }
    };
    emit(cli, &body)
}

fn lab_shape(cli: &Cli) -> Result<InstanceShape> {
    let mut shape = InstanceShape::default();
    if let Some(path) = &cli.config {
        shape.model = SimConfig::from_file(path)?.model;
    }
    shape.model.validate().map_err(|e| Error::Validation(e.to_string()))?;
    Ok(shape)
}

fn check_layer(model: &ModelConfig, layer: usize) -> Result<()> {
    if layer >= model.num_layers {
        return Err(Error::Validation(format!(
            "layer {layer} outside a model with {} layers",
            model.num_layers
        )));
    }
    Ok(())
}

fn run_deviate(cli: &Cli, args: &DeviateArgs) -> Result<()> {
    let shape = lab_shape(cli)?;
    check_layer(&shape.model, args.layer)?;
    if args.head >= shape.model.num_heads {
        return Err(Error::Validation(format!("head {} out of range", args.head)));
    }
    if !(args.eps.is_finite() && args.eps > 0.0) || args.steps < 2 {
        return Err(Error::Validation("need a positive step and at least two steps".into()));
    }
    let eps: Vec<f64> = (0..args.steps).map(|i| args.eps / f64::powi(2.0, i as i32)).collect();
    let rows = (0..args.instances)
        .map(|i| convergence_study(cli.seed.wrapping_add(i), &shape, args.layer, args.head, &eps))
        .collect::<Result<Vec<_>>>()?;
    let body = match text_format(cli)? {
        TextFormat::Json => to_json(&rows),
        TextFormat::Text => {
            let mut s = String::from("seed\tresiduals\tratios\n");
            for r in &rows {
                let fmt = |v: &[f64], p: usize| v.iter().map(|x| format!("{x:.p$e}")).collect::<Vec<_>>().join(",");
                s.push_str(&format!("{}\t{}\t{}\n", r.seed, fmt(&r.residuals, 3), fmt(&r.ratios, 3)));
            }
            let within = rows.iter().filter(|r| r.within(3.0, 5.0)).count();
            s.push_str(&format!("ratios within [3, 5]: {within}/{}\n", rows.len()));
            s
        }
    };
    emit(cli, &body)
}

#[derive(Serialize)]
struct StrategySummary {
    strategy: Strategy,
    mean_residual: f64,
}

fn run_select(cli: &Cli, args: &SelectArgs) -> Result<()> {
    let shape = lab_shape(cli)?;
    check_layer(&shape.model, args.layer)?;
    if !(0.0..=1.0).contains(&args.ratio) {
        return Err(Error::Validation(format!("ratio {} outside [0, 1]", args.ratio)));
    }
    if args.instances == 0 {
        return Err(Error::Validation("need at least one instance".into()));
    }
    let rows = (0..args.instances)
        .map(|i| strategy_comparison(cli.seed.wrapping_add(i), &shape, args.layer, args.ratio))
        .collect::<Result<Vec<_>>>()?;
    let summary: Vec<StrategySummary> = Strategy::ALL
        .iter()
        .map(|&s| StrategySummary {
            strategy: s,
            mean_residual: rows.iter().map(|r| r.get(s)).sum::<f64>() / rows.len() as f64,
        })
        .collect();
    let before = rows.iter().map(|r| r.before).sum::<f64>() / rows.len() as f64;
    let body = match text_format(cli)? {
        TextFormat::Json => to_json(&summary),
        TextFormat::Text => {
            let mut s = format!("no recompute\t{before:.6}\n");
            for row in &summary {
                s.push_str(&format!("{}\t{:.6}\n", row.strategy, row.mean_residual));
            }
            s
        }
    };
    emit(cli, &body)
}

#[derive(Deserialize)]
struct ScheduleRecord {
    id: String,
    hit_rate: f64,
    #[serde(default)]
    arrival_ms: Option<f64>,
}

fn schedule_requests(args: &ScheduleArgs) -> Result<Vec<Request>> {
    let as_validation = |e: Error| Error::Validation(e.to_string());
    match &args.requests {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
            let mut out = Vec::new();
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let rec: ScheduleRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                    line: i + 1,
                    reason: e.to_string(),
                })?;
                let arrival = rec.arrival_ms.unwrap_or(out.len() as f64);
                out.push(Request::with_hit_rate(rec.id, arrival, rec.hit_rate).map_err(as_validation)?);
            }
            Ok(out)
        }
        None => args
            .hit_rates
            .iter()
            .enumerate()
            .map(|(i, &h)| Request::with_hit_rate(format!("r{i}"), i as f64, h).map_err(as_validation))
            .collect(),
    }
}

#[derive(Serialize)]
struct ScheduleOutput {
    sorted_batches: Vec<Vec<String>>,
    sorted_total_ms: f64,
    fcfs_batches: Vec<Vec<String>>,
    fcfs_total_ms: f64,
    optimal_total_ms: Option<f64>,
}

fn batch_ids(batches: &[Batch]) -> Vec<Vec<String>> {
    batches
        .iter()
        .map(|b| b.ids().into_iter().map(String::from).collect())
        .collect()
}

fn run_schedule(cli: &Cli, args: &ScheduleArgs) -> Result<()> {
    let as_validation = |e: Error| Error::Validation(e.to_string());
    let model = LatencyModel {
        base_ms: args.t_base,
        compute_ms: args.t_comp,
        exponent: args.exponent,
        per_token_ms: 0.0,
    };
    model.validate().map_err(as_validation)?;
    let requests = schedule_requests(args)?;
    if requests.is_empty() {
        return Err(Error::Validation("no requests to schedule".into()));
    }
    let sorted = schedule(&requests, args.batch_size).map_err(as_validation)?;
    let fcfs = fcfs_schedule(&requests, args.batch_size).map_err(as_validation)?;
    let optimal_total_ms = if requests.len() <= BRUTE_FORCE_LIMIT {
        Some(optimal_batches_bruteforce(&requests, args.batch_size, &model)?.1)
    } else {
        None
    };
    let out = ScheduleOutput {
        sorted_total_ms: total_latency(&sorted, &model)?,
        fcfs_total_ms: total_latency(&fcfs, &model)?,
        sorted_batches: batch_ids(&sorted),
        fcfs_batches: batch_ids(&fcfs),
        optimal_total_ms,
    };
    let body = match text_format(cli)? {
        TextFormat::Json => to_json(&out),
        TextFormat::Text => {
            let show = |b: &[Vec<String>]| b.iter().map(|v| format!("[{}]", v.join(" "))).collect::<Vec<_>>().join(" ");
            let mut s = format!(
                "cache-aware  {:>10.3} ms  {}\nfcfs         {:>10.3} ms  {}\n",
                out.sorted_total_ms,
                show(&out.sorted_batches),
                out.fcfs_total_ms,
                show(&out.fcfs_batches)
            );
            match out.optimal_total_ms {
                Some(best) => s.push_str(&format!("optimum      {best:>10.3} ms\n")),
                None => s.push_str(&format!("optimum      skipped (more than {BRUTE_FORCE_LIMIT} requests)\n")),
            }
            s
        }
    };
    emit(cli, &body)
}

fn run_simulate(cli: &Cli, args: &SimulateArgs) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => SimConfig::from_file(path)?,
        None => SimConfig::default(),
    };
    config.seed = cli.seed;
    for (key, value) in args.flag_overrides() {
        config.set(key, value)?;
    }
    for kv in &args.overrides {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::Validation(format!("override {kv:?} is not KEY=VALUE")))?;
        config.set(key.trim(), value)?;
    }
    config.validate()?;
    let format: ReportFormat = cli.format.as_deref().unwrap_or("json").parse()?;
    let trace = ingest_trace(&args.trace)?;

    let mut pool = match &cli.cache_file {
        Some(path) if path.exists() => KvPool::load(path, config.hash)?,
        _ => KvPool::new(&config.model, config.hash).map_err(|e| Error::Validation(e.to_string()))?,
    }
    .with_capacity(config.capacity_bytes);
    if let Some(max) = config.capacity_bytes {
        pool.evict_to_capacity(max);
    }
    let report = run_simulation_with_pool(&trace, &config, &mut pool)?;
    if let Some(path) = &cli.cache_file {
        pool.save(path)?;
    }

    match (format, &cli.out) {
        (ReportFormat::Json, _) => emit(cli, &report_json(&report)),
        (ReportFormat::Csv, Some(path)) => kvreuse::sim::emit_report(&report, format, path),
        (ReportFormat::Csv, None) => {
            let mut stdout = std::io::stdout().lock();
            write_request_csv(&report, &mut stdout)?;
            stdout.write_all(b"\n")?;
            write_aggregate_csv(&report, &mut stdout)
        }
    }
}

fn run_gen_trace(cli: &Cli, args: &GenTraceArgs) -> Result<()> {
    let config = GenTraceConfig {
        requests: args.requests,
        warmup: args.warmup,
        chunk_len: args.chunk_len,
        chunks_per_request: args.chunks,
        library_chunks: args.library,
        overlap: args.overlap,
        bimodal: args.bimodal,
        start_ms: args.start_ms,
        mean_gap_ms: args.gap_ms,
        decode_steps: args.decode_steps,
        vocab_size: args.vocab,
        seed: cli.seed,
        ..GenTraceConfig::default()
    };
    let records = gen_trace(&config)?;
    let mut buf = Vec::new();
    write_trace(&records, &mut buf)?;
    emit(cli, std::str::from_utf8(&buf).expect("JSON is UTF-8"))
}
