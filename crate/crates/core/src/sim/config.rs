use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcher::{HashParams, Matcher};
use crate::model::ModelConfig;
use crate::scheduler::LatencyModel;
use crate::selector::{SelectionMode, Strategy};

/// How cached K/V is used during prefill.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunMode {
    /// Full recompute, cache ignored.
    Fr,
    /// Reuse every matched row, recompute nothing.
    Naive,
    /// Reuse with selective recomputation.
    Selective,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SchedulerKind {
    CacheAware,
    Fcfs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MatcherKind {
    Adaptive,
    Fixed,
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $name),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_uppercase().replace('-', "_").as_str() {
                    $($name => Ok($ty::$variant),)+
                    other => Err(Error::Validation(format!(
                        concat!("unknown ", stringify!($ty), " {:?}"),
                        other
                    ))),
                }
            }
        }
    };
}

keyword_enum!(RunMode { Fr => "FR", Naive => "NAIVE", Selective => "SELECTIVE" });
keyword_enum!(SchedulerKind { CacheAware => "CACHE_AWARE", Fcfs => "FCFS" });
keyword_enum!(MatcherKind { Adaptive => "ADAPTIVE", Fixed => "FIXED" });

/// Everything that determines a simulation run besides the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub model: ModelConfig,
    pub mode: RunMode,
    pub scheduler: SchedulerKind,
    pub matcher: MatcherKind,
    pub hash: HashParams,
    pub strategy: Strategy,
    pub selection_mode: SelectionMode,
    pub recompute_ratio: f64,
    pub decode_extra: usize,
    pub batch_size: usize,
    pub latency: LatencyModel,
    /// Added to a queued request's priority per millisecond waited.
    pub aging_per_ms: f64,
    /// Logical cost of one decode step.
    pub decode_tick_ms: f64,
    /// Cost of each extra decode-time recomputation, in decode steps.
    pub decode_extra_cost: f64,
    /// Pool capacity in bytes of 64-bit K/V; unbounded when absent.
    pub capacity_bytes: Option<usize>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            mode: RunMode::Selective,
            scheduler: SchedulerKind::CacheAware,
            matcher: MatcherKind::Adaptive,
            hash: HashParams::default(),
            strategy: Strategy::Dhd,
            selection_mode: SelectionMode::Practical,
            recompute_ratio: 0.2,
            decode_extra: 3,
            batch_size: 4,
            latency: LatencyModel::default(),
            aging_per_ms: 0.0,
            decode_tick_ms: 1.0,
            decode_extra_cost: 1.0,
            capacity_bytes: None,
            seed: 0,
        }
    }
}

/// Keys accepted by [`SimConfig::set`], matching the long CLI flags.
pub const CONFIG_KEYS: &[&str] = &[
    "mode",
    "scheduler",
    "matcher",
    "window",
    "hash-base",
    "hash-modulus",
    "strategy",
    "selection-mode",
    "ratio",
    "n-extra",
    "batch-size",
    "t-base",
    "t-comp",
    "exponent",
    "per-token-ms",
    "aging",
    "decode-tick-ms",
    "decode-extra-cost",
    "capacity-bytes",
    "seed",
    "layers",
    "heads",
    "d-model",
    "vocab",
    "causal",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Validation(format!("invalid value {value:?} for {key}")))
}

impl SimConfig {
    pub fn matcher(&self) -> Matcher {
        match self.matcher {
            MatcherKind::Adaptive => Matcher::Adaptive(self.hash),
            MatcherKind::Fixed => Matcher::Fixed {
                chunk_size: self.hash.window,
            },
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "mode" => self.mode = value.parse()?,
            "scheduler" => self.scheduler = value.parse()?,
            "matcher" => self.matcher = value.parse()?,
            "window" => self.hash.window = parse_value(key, value)?,
            "hash-base" => self.hash.base = parse_value(key, value)?,
            "hash-modulus" => self.hash.modulus = parse_value(key, value)?,
            "strategy" => {
                self.strategy = value.parse().map_err(|e: Error| Error::Validation(e.to_string()))?
            }
            "selection-mode" => {
                self.selection_mode = value.parse().map_err(|e: Error| Error::Validation(e.to_string()))?
            }
            "ratio" => self.recompute_ratio = parse_value(key, value)?,
            "n-extra" => self.decode_extra = parse_value(key, value)?,
            "batch-size" => self.batch_size = parse_value(key, value)?,
            "t-base" => self.latency.base_ms = parse_value(key, value)?,
            "t-comp" => self.latency.compute_ms = parse_value(key, value)?,
            "exponent" => self.latency.exponent = parse_value(key, value)?,
            "per-token-ms" => self.latency.per_token_ms = parse_value(key, value)?,
            "aging" => self.aging_per_ms = parse_value(key, value)?,
            "decode-tick-ms" => self.decode_tick_ms = parse_value(key, value)?,
            "decode-extra-cost" => self.decode_extra_cost = parse_value(key, value)?,
            "capacity-bytes" => {
                self.capacity_bytes = match value {
                    "none" | "" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "seed" => self.seed = parse_value(key, value)?,
            "layers" => self.model.num_layers = parse_value(key, value)?,
            "heads" => self.model.num_heads = parse_value(key, value)?,
            "d-model" => self.model.d_model = parse_value(key, value)?,
            "vocab" => self.model.vocab_size = parse_value(key, value)?,
            "causal" => self.model.causal = parse_value(key, value)?,
            other => return Err(Error::Validation(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                reason: "expected key = value".into(),
            })?;
            self.set(key.trim(), value).map_err(|e| Error::Parse {
                line: i + 1,
                reason: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut config = Self::default();
        config.apply_text(&std::fs::read_to_string(&path).map_err(|e| Error::io_at(&path, e))?)?;
        Ok(config)
    }

    /// Renders the configuration in the `key = value` file format.
    pub fn to_text(&self) -> String {
        let capacity = self.capacity_bytes.map_or("none".to_string(), |c| c.to_string());
        let pairs: [(&str, String); 25] = [
            ("mode", self.mode.to_string()),
            ("scheduler", self.scheduler.to_string()),
            ("matcher", self.matcher.to_string()),
            ("window", self.hash.window.to_string()),
            ("hash-base", self.hash.base.to_string()),
            ("hash-modulus", self.hash.modulus.to_string()),
            ("strategy", self.strategy.to_string()),
            ("selection-mode", self.selection_mode.to_string()),
            ("ratio", self.recompute_ratio.to_string()),
            ("n-extra", self.decode_extra.to_string()),
            ("batch-size", self.batch_size.to_string()),
            ("t-base", self.latency.base_ms.to_string()),
            ("t-comp", self.latency.compute_ms.to_string()),
            ("exponent", self.latency.exponent.to_string()),
            ("per-token-ms", self.latency.per_token_ms.to_string()),
            ("aging", self.aging_per_ms.to_string()),
            ("decode-tick-ms", self.decode_tick_ms.to_string()),
            ("decode-extra-cost", self.decode_extra_cost.to_string()),
            ("capacity-bytes", capacity),
            ("seed", self.seed.to_string()),
            ("layers", self.model.num_layers.to_string()),
            ("heads", self.model.num_heads.to_string()),
            ("d-model", self.model.d_model.to_string()),
            ("vocab", self.model.vocab_size.to_string()),
            ("causal", self.model.causal.to_string()),
        ];
        pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Every inconsistency surfaces here as a validation error.
    pub fn validate(&self) -> Result<()> {
        let as_validation = |e: Error| Error::Validation(e.to_string());
        self.model.validate().map_err(as_validation)?;
        self.hash.validate().map_err(as_validation)?;
        self.latency.validate().map_err(as_validation)?;
        if !(0.0..=1.0).contains(&self.recompute_ratio) {
            return Err(Error::Validation(format!(
                "recompute ratio {} outside [0, 1]",
                self.recompute_ratio
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch size must be at least 1".into()));
        }
        for (name, v) in [
            ("aging", self.aging_per_ms),
            ("decode tick", self.decode_tick_ms),
            ("decode extra cost", self.decode_extra_cost),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Validation(format!("{name} {v} must be finite and non-negative")));
            }
        }
        if self.model.num_layers < 2 && self.mode == RunMode::Selective && self.selection_mode == SelectionMode::Practical {
            return Err(Error::Validation(
                "practical selection probes the second layer; the model needs at least two".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = SimConfig::default();
        c.apply_text("# comment\nmode = naive\nscheduler=fcfs\n\nratio = 0.35\ncapacity-bytes = 4096\n").unwrap();
        assert_eq!(c.mode, RunMode::Naive);
        assert_eq!(c.scheduler, SchedulerKind::Fcfs);
        assert_eq!(c.recompute_ratio, 0.35);
        assert_eq!(c.capacity_bytes, Some(4096));
        let mut d = SimConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
        assert_eq!(c.to_text().lines().count(), CONFIG_KEYS.len());
    }

    #[test]
    fn bad_lines_report_line_numbers() {
        let mut c = SimConfig::default();
        assert!(matches!(c.apply_text("mode = FR\nbogus = 1\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(c.apply_text("ratio 0.2"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(c.apply_text("mode = SOMETIMES"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn validation_catches_inconsistencies() {
        assert!(SimConfig::default().validate().is_ok());
        let bad = [
            ("ratio", "1.5"),
            ("batch-size", "0"),
            ("exponent", "2"),
            ("hash-modulus", "1000"),
            ("heads", "3"),
        ];
        for (k, v) in bad {
            let mut c = SimConfig::default();
            c.set(k, v).unwrap();
            assert!(matches!(c.validate(), Err(Error::Validation(_))), "{k}={v}");
        }
    }
}
