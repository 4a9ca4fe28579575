use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::SimConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestMetrics {
    pub id: String,
    pub arrival_ms: f64,
    pub dispatch_ms: f64,
    pub ttft_ms: f64,
    pub completion_ms: f64,
    pub hit_rate: f64,
    pub prompt_tokens: usize,
    pub decode_steps: usize,
    /// Reused rows recomputed during prefill, summed over layers.
    pub tokens_recomputed: usize,
    /// Reused rows left stale during prefill, summed over layers.
    pub tokens_reused_uncorrected: usize,
    /// Unmatched rows computed from scratch, summed over layers.
    pub tokens_fresh: usize,
    /// Rows recomputed while decoding.
    pub decode_recomputed: usize,
    pub tpot_ms: f64,
    /// Per-layer `‖ΔH‖_F` with every matched row reused.
    pub delta_h_before: Vec<f64>,
    /// Per-layer `‖ΔH‖_F` after the run's recomputation.
    pub delta_h_after: Vec<f64>,
    /// Summed L2 distance of decode hidden states to the reference decode.
    pub decode_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub requests: usize,
    pub mean_ttft_ms: f64,
    pub p50_ttft_ms: f64,
    pub p95_ttft_ms: f64,
    /// Mean over requests that decode at least one token.
    pub mean_tpot_ms: f64,
    pub mean_hit_rate: f64,
    /// First arrival to last completion.
    pub makespan_ms: f64,
    /// Prompt plus generated tokens per second of makespan.
    pub throughput_tokens_per_s: f64,
    pub throughput_requests_per_s: f64,
    pub tokens_recomputed: usize,
    pub tokens_reused_uncorrected: usize,
    pub tokens_fresh: usize,
    pub decode_recomputed: usize,
    pub mean_delta_h_before: f64,
    pub mean_delta_h_after: f64,
    pub total_decode_deviation: f64,
    pub evicted_entries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: SimConfig,
    pub requests: Vec<RequestMetrics>,
    pub aggregate: AggregateMetrics,
}

/// Nearest-rank percentile of an ascending slice.
pub(crate) fn percentile(sorted: &[f64], pct: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl AggregateMetrics {
    pub fn from_requests(requests: &[RequestMetrics], evicted_entries: usize) -> Self {
        let mut ttft: Vec<f64> = requests.iter().map(|r| r.ttft_ms).collect();
        ttft.sort_by(f64::total_cmp);
        let first_arrival = requests.iter().map(|r| r.arrival_ms).fold(f64::INFINITY, f64::min);
        let last_done = requests.iter().map(|r| r.completion_ms).fold(f64::NEG_INFINITY, f64::max);
        let makespan_ms = if requests.is_empty() { 0.0 } else { last_done - first_arrival };
        let tokens: usize = requests.iter().map(|r| r.prompt_tokens + r.decode_steps).sum();
        let per_s = |count: f64| if makespan_ms > 0.0 { count * 1000.0 / makespan_ms } else { 0.0 };
        let layer_mean = |v: &Vec<f64>| mean(v.iter().copied());
        Self {
            requests: requests.len(),
            mean_ttft_ms: mean(ttft.iter().copied()),
            p50_ttft_ms: percentile(&ttft, 50.0),
            p95_ttft_ms: percentile(&ttft, 95.0),
            mean_tpot_ms: mean(requests.iter().filter(|r| r.decode_steps > 0).map(|r| r.tpot_ms)),
            mean_hit_rate: mean(requests.iter().map(|r| r.hit_rate)),
            makespan_ms,
            throughput_tokens_per_s: per_s(tokens as f64),
            throughput_requests_per_s: per_s(requests.len() as f64),
            tokens_recomputed: requests.iter().map(|r| r.tokens_recomputed).sum(),
            tokens_reused_uncorrected: requests.iter().map(|r| r.tokens_reused_uncorrected).sum(),
            tokens_fresh: requests.iter().map(|r| r.tokens_fresh).sum(),
            decode_recomputed: requests.iter().map(|r| r.decode_recomputed).sum(),
            mean_delta_h_before: mean(requests.iter().map(|r| layer_mean(&r.delta_h_before))),
            mean_delta_h_after: mean(requests.iter().map(|r| layer_mean(&r.delta_h_after))),
            total_decode_deviation: requests.iter().map(|r| r.decode_deviation).sum(),
            evicted_entries,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::Validation(format!("unknown report format {other:?}"))),
        }
    }
}

/// `run.csv` → `run.agg.csv`; a path without extension gains `.agg.csv`.
pub fn aggregate_path(path: &Path) -> PathBuf {
    path.with_extension("agg.csv")
}

fn join(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

pub fn report_json(report: &MetricsReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

pub fn write_request_csv(report: &MetricsReport, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "id",
        "arrival_ms",
        "dispatch_ms",
        "ttft_ms",
        "completion_ms",
        "hit_rate",
        "prompt_tokens",
        "decode_steps",
        "tokens_recomputed",
        "tokens_reused_uncorrected",
        "tokens_fresh",
        "decode_recomputed",
        "tpot_ms",
        "delta_h_before",
        "delta_h_after",
        "decode_deviation",
    ])
    .map_err(csv_error)?;
    for r in &report.requests {
        w.write_record([
            r.id.clone(),
            r.arrival_ms.to_string(),
            r.dispatch_ms.to_string(),
            r.ttft_ms.to_string(),
            r.completion_ms.to_string(),
            r.hit_rate.to_string(),
            r.prompt_tokens.to_string(),
            r.decode_steps.to_string(),
            r.tokens_recomputed.to_string(),
            r.tokens_reused_uncorrected.to_string(),
            r.tokens_fresh.to_string(),
            r.decode_recomputed.to_string(),
            r.tpot_ms.to_string(),
            join(&r.delta_h_before),
            join(&r.delta_h_after),
            r.decode_deviation.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_aggregate_csv(report: &MetricsReport, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["metric", "value"]).map_err(csv_error)?;
    let a = &report.aggregate;
    let rows = [
        ("requests", a.requests.to_string()),
        ("mean_ttft_ms", a.mean_ttft_ms.to_string()),
        ("p50_ttft_ms", a.p50_ttft_ms.to_string()),
        ("p95_ttft_ms", a.p95_ttft_ms.to_string()),
        ("mean_tpot_ms", a.mean_tpot_ms.to_string()),
        ("mean_hit_rate", a.mean_hit_rate.to_string()),
        ("makespan_ms", a.makespan_ms.to_string()),
        ("throughput_tokens_per_s", a.throughput_tokens_per_s.to_string()),
        ("throughput_requests_per_s", a.throughput_requests_per_s.to_string()),
        ("tokens_recomputed", a.tokens_recomputed.to_string()),
        ("tokens_reused_uncorrected", a.tokens_reused_uncorrected.to_string()),
        ("tokens_fresh", a.tokens_fresh.to_string()),
        ("decode_recomputed", a.decode_recomputed.to_string()),
        ("mean_delta_h_before", a.mean_delta_h_before.to_string()),
        ("mean_delta_h_after", a.mean_delta_h_after.to_string()),
        ("total_decode_deviation", a.total_decode_deviation.to_string()),
        ("evicted_entries", a.evicted_entries.to_string()),
    ];
    for (k, v) in rows {
        w.write_record([k, v.as_str()]).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

/// Writes JSON to `path`, or per-request CSV to `path` and aggregates to
/// [`aggregate_path`].
pub fn emit_report(report: &MetricsReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match format {
        ReportFormat::Json => std::fs::write(path, report_json(report)).map_err(|e| Error::io_at(path, e))?,
        ReportFormat::Csv => {
            let create = |p: &Path| std::fs::File::create(p).map_err(|e| Error::io_at(p, e));
            write_request_csv(report, create(path)?)?;
            write_aggregate_csv(report, create(&aggregate_path(path))?)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 10.0);
        assert_eq!(percentile(&v, 95.0), 19.0);
        assert_eq!(percentile(&[3.0], 95.0), 3.0);
        assert_eq!(percentile(&[], 50.0), 0.0);
    }

    #[test]
    fn aggregate_path_swaps_extension() {
        assert_eq!(aggregate_path(Path::new("out/run.csv")), PathBuf::from("out/run.agg.csv"));
        assert_eq!(aggregate_path(Path::new("run")), PathBuf::from("run.agg.csv"));
    }
}
