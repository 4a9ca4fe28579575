//! Line-delimited request traces and a seeded synthetic generator.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub id: String,
    pub arrival_ms: f64,
    pub tokens: Vec<TokenId>,
    pub decode_steps: usize,
}

/// Parses one JSON object per line, skipping blank and `#` lines, and sorts
/// by arrival time (stable).
pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>> {
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let record: TraceRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if record.tokens.is_empty() {
            return Err(Error::Validation(format!("line {}: request {} has no tokens", i + 1, record.id)));
        }
        if !(record.arrival_ms.is_finite() && record.arrival_ms >= 0.0) {
            return Err(Error::Validation(format!(
                "line {}: arrival time {} must be finite and non-negative",
                i + 1,
                record.arrival_ms
            )));
        }
        records.push(record);
    }
    records.sort_by(|a, b| a.arrival_ms.total_cmp(&b.arrival_ms));
    Ok(records)
}

pub fn ingest_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>> {
    parse_trace(&std::fs::read_to_string(&path).map_err(|e| Error::io_at(&path, e))?)
}

pub fn write_trace(records: &[TraceRecord], mut out: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Synthetic multi-tenant traffic: prompts are sequences of fixed-length
/// chunks, each drawn from a shared library with some probability and fresh
/// otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenTraceConfig {
    pub requests: usize,
    /// Requests at time 0 that together contain every library chunk.
    pub warmup: usize,
    pub chunk_len: usize,
    pub chunks_per_request: usize,
    pub library_chunks: usize,
    /// Probability that a chunk slot is filled from the library.
    pub overlap: f64,
    /// Each request is either hot (`hot_overlap`) or cold (`cold_overlap`)
    /// with equal probability, ignoring `overlap`.
    pub bimodal: bool,
    pub hot_overlap: f64,
    pub cold_overlap: f64,
    /// Main traffic starts here, after the warm-up.
    pub start_ms: f64,
    /// Mean of the exponential inter-arrival gap.
    pub mean_gap_ms: f64,
    pub decode_steps: usize,
    pub vocab_size: u32,
    pub seed: u64,
}

impl Default for GenTraceConfig {
    fn default() -> Self {
        Self {
            requests: 32,
            warmup: 2,
            chunk_len: 16,
            chunks_per_request: 4,
            library_chunks: 8,
            overlap: 0.5,
            bimodal: false,
            hot_overlap: 0.9,
            cold_overlap: 0.1,
            start_ms: 1000.0,
            mean_gap_ms: 5.0,
            decode_steps: 8,
            vocab_size: 4096,
            seed: 0,
        }
    }
}

impl GenTraceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_len == 0 || self.chunks_per_request == 0 {
            return Err(Error::Validation("chunks must be non-empty".into()));
        }
        if self.vocab_size == 0 {
            return Err(Error::Validation("vocabulary must be non-empty".into()));
        }
        for (name, p) in [
            ("overlap", self.overlap),
            ("hot overlap", self.hot_overlap),
            ("cold overlap", self.cold_overlap),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Validation(format!("{name} {p} outside [0, 1]")));
            }
        }
        let uses_library = self.overlap > 0.0 || (self.bimodal && self.hot_overlap.max(self.cold_overlap) > 0.0);
        if self.library_chunks == 0 && uses_library {
            return Err(Error::Validation("overlap needs a non-empty chunk library".into()));
        }
        if !(self.mean_gap_ms.is_finite() && self.mean_gap_ms >= 0.0) || !(self.start_ms.is_finite() && self.start_ms >= 0.0) {
            return Err(Error::Validation("arrival timing must be finite and non-negative".into()));
        }
        Ok(())
    }
}

pub fn gen_trace(config: &GenTraceConfig) -> Result<Vec<TraceRecord>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let chunk = |rng: &mut ChaCha8Rng| -> Vec<TokenId> {
        (0..config.chunk_len).map(|_| rng.gen_range(0..config.vocab_size)).collect()
    };
    let library: Vec<Vec<TokenId>> = (0..config.library_chunks).map(|_| chunk(&mut rng)).collect();
    let mut records = Vec::with_capacity(config.warmup + config.requests);

    if config.warmup > 0 && !library.is_empty() {
        let per = library.len().div_ceil(config.warmup);
        for (w, group) in library.chunks(per).enumerate() {
            records.push(TraceRecord {
                id: format!("warmup-{w}"),
                arrival_ms: 0.0,
                tokens: group.concat(),
                decode_steps: 0,
            });
        }
    }

    let gap = (config.mean_gap_ms > 0.0).then(|| Exp::new(1.0 / config.mean_gap_ms).expect("positive rate"));
    let mut t = config.start_ms;
    for i in 0..config.requests {
        let overlap = if config.bimodal {
            if rng.gen_bool(0.5) {
                config.hot_overlap
            } else {
                config.cold_overlap
            }
        } else {
            config.overlap
        };
        let mut tokens = Vec::with_capacity(config.chunk_len * config.chunks_per_request);
        for _ in 0..config.chunks_per_request {
            if !library.is_empty() && rng.gen_bool(overlap) {
                tokens.extend_from_slice(&library[rng.gen_range(0..library.len())]);
            } else {
                tokens.extend(chunk(&mut rng));
            }
        }
        records.push(TraceRecord {
            id: format!("req-{i}"),
            arrival_ms: t,
            tokens,
            decode_steps: config.decode_steps,
        });
        if let Some(gap) = &gap {
            t += gap.sample(&mut rng);
        }
    }
    Ok(records)
}
