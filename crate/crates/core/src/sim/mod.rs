//! Discrete-event serving simulation on a logical millisecond clock.
//!
//! Requests arrive from a trace, take their hit rate from the KV pool, and are
//! dispatched in prefill batches priced by the latency model. Each request is
//! then run through the toy model in the configured mode, measured against a
//! full-recompute pass, decoded, and written back to the pool.

mod config;
mod report;
mod trace;

use std::collections::BTreeSet;

pub use config::{MatcherKind, RunMode, SchedulerKind, SimConfig, CONFIG_KEYS};
pub use report::{
    aggregate_path, emit_report, report_json, write_aggregate_csv, write_request_csv, AggregateMetrics,
    MetricsReport, ReportFormat, RequestMetrics,
};
pub use trace::{gen_trace, ingest_trace, parse_trace, write_trace, GenTraceConfig, TraceRecord};

use crate::decode::{greedy_continuation, DecodeCorrection, DecodeSession};
use crate::deviation::delta_h_exact;
use crate::error::{Error, Result};
use crate::lab::{oracle_heads, PROBE_LAYER};
use crate::linalg::Matrix;
use crate::model::{init_model, model_forward, model_forward_with_reuse, probe_layer, LayerStates, RecomputePlan, ToyModel};
use crate::reuse::{LayerKv, ReuseMap};
use crate::scheduler::{batch_latency, next_batch, Batch, Request};
use crate::selector::{select, SelectionInputs, SelectionMode};
use crate::store::KvPool;

pub fn run_simulation(trace: &[TraceRecord], config: &SimConfig) -> Result<MetricsReport> {
    let mut pool = KvPool::new(&config.model, config.hash)
        .map_err(|e| Error::Validation(e.to_string()))?
        .with_capacity(config.capacity_bytes);
    run_simulation_with_pool(trace, config, &mut pool)
}

/// Runs against an existing pool, which keeps the written-back entries.
pub fn run_simulation_with_pool(trace: &[TraceRecord], config: &SimConfig, pool: &mut KvPool) -> Result<MetricsReport> {
    config.validate()?;
    pool.check_config(&config.model)
        .map_err(|e| Error::Validation(e.to_string()))?;
    validate_trace(trace, config)?;
    let model = init_model(config.model.clone())?;

    let mut order: Vec<usize> = (0..trace.len()).collect();
    order.sort_by(|&a, &b| trace[a].arrival_ms.total_cmp(&trace[b].arrival_ms));
    let mut next_arrival = 0;
    let mut queue: Vec<usize> = Vec::new();
    let mut metrics: Vec<Option<RequestMetrics>> = vec![None; trace.len()];
    let mut evicted = 0;
    let mut now = 0.0f64;

    while next_arrival < order.len() || !queue.is_empty() {
        if queue.is_empty() {
            now = now.max(trace[order[next_arrival]].arrival_ms);
        }
        while next_arrival < order.len() && trace[order[next_arrival]].arrival_ms <= now {
            queue.push(order[next_arrival]);
            next_arrival += 1;
        }

        // Hit rates change as completed requests land in the pool.
        let lookups = queue
            .iter()
            .map(|&i| lookup(pool, config, &trace[i]))
            .collect::<Result<Vec<_>>>()?;
        let candidates = queue
            .iter()
            .zip(&lookups)
            .map(|(&i, map)| {
                let r = &trace[i];
                Request::new(r.id.clone(), r.arrival_ms, r.tokens.clone(), r.decode_steps, map.hit_rate())
            })
            .collect::<Result<Vec<_>>>()?;
        let picked = next_batch(
            &candidates,
            config.batch_size,
            config.scheduler == SchedulerKind::CacheAware,
            now,
            config.aging_per_ms,
        )?;
        let batch = Batch {
            requests: picked.iter().map(|&j| candidates[j].clone()).collect(),
        };
        let prefill_done = now + batch_latency(&batch, &config.latency)?;

        // Batch members run concurrently, so none sees another's write-back.
        let mut outcomes = Vec::with_capacity(picked.len());
        for &j in &picked {
            let i = queue[j];
            let seed = config.seed.wrapping_add(i as u64);
            outcomes.push((i, j, run_request(&model, config, &trace[i], &lookups[j], seed)?));
        }
        for (i, j, out) in outcomes {
            let r = &trace[i];
            let decode_ms = out.decode_ms;
            metrics[i] = Some(RequestMetrics {
                id: r.id.clone(),
                arrival_ms: r.arrival_ms,
                dispatch_ms: now,
                ttft_ms: prefill_done - r.arrival_ms,
                completion_ms: prefill_done + decode_ms,
                hit_rate: lookups[j].hit_rate(),
                prompt_tokens: r.tokens.len(),
                decode_steps: r.decode_steps,
                tokens_recomputed: out.recomputed,
                tokens_reused_uncorrected: out.reused_uncorrected,
                tokens_fresh: out.fresh,
                decode_recomputed: out.decode_recomputed,
                tpot_ms: if r.decode_steps > 0 { decode_ms / r.decode_steps as f64 } else { 0.0 },
                delta_h_before: out.delta_h_before,
                delta_h_after: out.delta_h_after,
                decode_deviation: out.decode_deviation,
            });
            evicted += pool.insert(r.id.clone(), out.kv)?.len();
        }
        let mut picked_sorted = picked;
        picked_sorted.sort_unstable_by(|a, b| b.cmp(a));
        for j in picked_sorted {
            queue.remove(j);
        }
        now = prefill_done;
    }

    let requests: Vec<RequestMetrics> = metrics.into_iter().map(|m| m.expect("every request served")).collect();
    let aggregate = AggregateMetrics::from_requests(&requests, evicted);
    Ok(MetricsReport {
        config: config.clone(),
        requests,
        aggregate,
    })
}

fn validate_trace(trace: &[TraceRecord], config: &SimConfig) -> Result<()> {
    for r in trace {
        if r.tokens.is_empty() {
            return Err(Error::Validation(format!("request {} has no tokens", r.id)));
        }
        if !(r.arrival_ms.is_finite() && r.arrival_ms >= 0.0) {
            return Err(Error::Validation(format!("request {} has arrival {}", r.id, r.arrival_ms)));
        }
        if let Some(&t) = r.tokens.iter().find(|&&t| t as usize >= config.model.vocab_size) {
            return Err(Error::Validation(format!(
                "request {} uses token {t} outside the vocabulary of {}",
                r.id, config.model.vocab_size
            )));
        }
    }
    Ok(())
}

fn lookup(pool: &KvPool, config: &SimConfig, record: &TraceRecord) -> Result<ReuseMap> {
    if config.mode == RunMode::Fr {
        return Ok(ReuseMap::new(record.tokens.len()));
    }
    pool.lookup_with(&record.tokens, &config.matcher())
}

struct RequestOutcome {
    kv: LayerKv,
    recomputed: usize,
    reused_uncorrected: usize,
    fresh: usize,
    decode_recomputed: usize,
    decode_ms: f64,
    delta_h_before: Vec<f64>,
    delta_h_after: Vec<f64>,
    decode_deviation: f64,
}

/// What the decode phase needs to keep correcting stale rows.
struct DecodeSetup {
    delta_v: Vec<Matrix>,
    eligible: BTreeSet<usize>,
}

fn run_request(model: &ToyModel, config: &SimConfig, record: &TraceRecord, reuse: &ReuseMap, seed: u64) -> Result<RequestOutcome> {
    let tokens = &record.tokens;
    let n = tokens.len();
    let num_layers = config.model.num_layers;
    let reference = model_forward(tokens, model)?;
    let reused = reuse.reused_positions();

    if config.mode == RunMode::Fr || reused.is_empty() {
        return Ok(RequestOutcome {
            kv: LayerKv::from_states(tokens, &reference),
            recomputed: 0,
            reused_uncorrected: 0,
            fresh: n * num_layers,
            decode_recomputed: 0,
            decode_ms: record.decode_steps as f64 * config.decode_tick_ms,
            delta_h_before: vec![0.0; num_layers],
            delta_h_after: vec![0.0; num_layers],
            decode_deviation: 0.0,
        });
    }

    let naive = model_forward_with_reuse(tokens, model, reuse, &RecomputePlan::none())?;
    let delta_h_before = delta_h_exact(&reference, &naive)?.layer_norms();
    let (states, plan, setup) = match config.mode {
        RunMode::Selective => {
            let (plan, setup) = plan_recompute(model, config, tokens, reuse, &reference, &reused, seed)?;
            let states = model_forward_with_reuse(tokens, model, reuse, &plan)?;
            (states, plan, Some(setup))
        }
        _ => (naive, RecomputePlan::none(), None),
    };
    let delta_h_after = delta_h_exact(&reference, &states)?.layer_norms();

    let mut recomputed = 0;
    for l in 0..num_layers {
        recomputed += reused.iter().filter(|&&p| plan.contains(l, p)).count();
    }
    let reused_uncorrected = reused.len() * num_layers - recomputed;
    let fresh = (n - reused.len()) * num_layers;

    let (decode_deviation, decode_recomputed, decode_ms) = decode(model, config, record, &reference, &states, setup)?;
    Ok(RequestOutcome {
        kv: LayerKv::from_states(tokens, &states),
        recomputed,
        reused_uncorrected,
        fresh,
        decode_recomputed,
        decode_ms,
        delta_h_before,
        delta_h_after,
        decode_deviation,
    })
}

fn plan_recompute(
    model: &ToyModel,
    config: &SimConfig,
    tokens: &[u32],
    reuse: &ReuseMap,
    reference: &LayerStates,
    reused: &[usize],
    seed: u64,
) -> Result<(RecomputePlan, DecodeSetup)> {
    let causal = config.model.causal;
    let probe = PROBE_LAYER.min(config.model.num_layers - 1);
    let inputs_for = |heads, perturbed_keys| SelectionInputs {
        heads,
        reused: reused.to_vec(),
        spans: reuse.spans(),
        causal,
        perturbed_keys,
    };
    match config.selection_mode {
        SelectionMode::Practical => {
            let inputs = inputs_for(probe_layer(tokens, model, reuse, probe)?, true);
            let sel = select(config.strategy, &inputs, config.recompute_ratio, seed)?;
            let chosen: BTreeSet<usize> = sel.indices.into_iter().collect();
            let setup = DecodeSetup {
                delta_v: inputs.heads.iter().map(|h| h.delta_v.clone()).collect(),
                eligible: reused.iter().copied().filter(|p| !chosen.contains(p)).collect(),
            };
            Ok((RecomputePlan::uniform(config.model.num_layers, chosen), setup))
        }
        SelectionMode::Oracle => {
            let mut sets = Vec::with_capacity(config.model.num_layers);
            let mut setup = None;
            for l in 0..config.model.num_layers {
                let inputs = inputs_for(oracle_heads(reference, reuse, l), false);
                let sel = select(config.strategy, &inputs, config.recompute_ratio, seed)?;
                let chosen: BTreeSet<usize> = sel.indices.into_iter().collect();
                if l == probe {
                    setup = Some(DecodeSetup {
                        delta_v: inputs.heads.iter().map(|h| h.delta_v.clone()).collect(),
                        eligible: reused.iter().copied().filter(|p| !chosen.contains(p)).collect(),
                    });
                }
                sets.push(chosen);
            }
            Ok((RecomputePlan::per_layer(sets), setup.expect("probe layer within depth")))
        }
    }
}

/// Decodes the reference greedy continuation with both caches. Returns the
/// summed hidden-state deviation, the rows recomputed, and the decode time.
fn decode(
    model: &ToyModel,
    config: &SimConfig,
    record: &TraceRecord,
    reference: &LayerStates,
    states: &LayerStates,
    setup: Option<DecodeSetup>,
) -> Result<(f64, usize, f64)> {
    let steps = record.decode_steps;
    if steps == 0 {
        return Ok((0.0, 0, 0.0));
    }
    let tokens = greedy_continuation(model, reference, steps)?;
    let mut clean = DecodeSession::from_prefill(model, reference);
    let mut stale = DecodeSession::from_prefill(model, states);
    if let Some(setup) = setup.filter(|_| config.decode_extra > 0) {
        let probe = PROBE_LAYER.min(config.model.num_layers - 1);
        let correction = DecodeCorrection::from_prefill(model, states, probe, setup.delta_v, setup.eligible, config.decode_extra);
        stale = stale.with_correction(correction)?;
    }
    let (mut deviation, mut recomputed, mut elapsed) = (0.0, 0, 0.0);
    for t in tokens {
        let a = clean.step(t)?;
        let b = stale.step(t)?;
        deviation += (&b.hidden - &a.hidden).mapv(|x| x * x).sum().sqrt();
        recomputed += b.recomputed.len();
        elapsed += config.decode_tick_ms * (1.0 + config.decode_extra_cost * b.recomputed.len() as f64);
    }
    Ok((deviation, recomputed, elapsed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small() -> SimConfig {
        SimConfig {
            model: ModelConfig {
                num_layers: 3,
                num_heads: 2,
                d_model: 16,
                vocab_size: 128,
                seed: 3,
                causal: true,
            },
            batch_size: 2,
            ..SimConfig::default()
        }
    }

    fn trace() -> Vec<TraceRecord> {
        gen_trace(&GenTraceConfig {
            requests: 8,
            chunk_len: 8,
            chunks_per_request: 3,
            library_chunks: 4,
            overlap: 0.7,
            decode_steps: 4,
            vocab_size: 128,
            seed: 5,
            ..GenTraceConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn full_recompute_has_no_deviation() {
        let cfg = SimConfig { mode: RunMode::Fr, ..small() };
        let report = run_simulation(&trace(), &cfg).unwrap();
        for r in &report.requests {
            assert_eq!(r.hit_rate, 0.0);
            assert!(r.delta_h_after.iter().all(|&d| d == 0.0));
            assert_eq!(r.tokens_fresh, r.prompt_tokens * 3);
        }
        let first = &report.requests[0];
        assert_eq!(first.ttft_ms, cfg.latency.latency_at(0.0));
    }

    #[test]
    fn naive_deviation_dominates_selective() {
        let t = trace();
        let naive = run_simulation(&t, &SimConfig { mode: RunMode::Naive, ..small() }).unwrap();
        let selective = run_simulation(&t, &small()).unwrap();
        assert!(naive.aggregate.mean_delta_h_after > 0.0);
        assert!(naive.aggregate.mean_delta_h_after >= selective.aggregate.mean_delta_h_after);
        for r in &naive.requests {
            assert_eq!(r.delta_h_before, r.delta_h_after);
        }
    }

    #[test]
    fn token_accounting_is_conserved() {
        let t = trace();
        for mode in [RunMode::Fr, RunMode::Naive, RunMode::Selective] {
            let report = run_simulation(&t, &SimConfig { mode, ..small() }).unwrap();
            let a = &report.aggregate;
            let total: usize = t.iter().map(|r| r.tokens.len() * 3).sum();
            assert_eq!(a.tokens_recomputed + a.tokens_reused_uncorrected + a.tokens_fresh, total, "{mode}");
        }
    }

    #[test]
    fn ttft_covers_queueing_delay() {
        let report = run_simulation(&trace(), &small()).unwrap();
        for r in &report.requests {
            assert!(r.ttft_ms >= r.dispatch_ms - r.arrival_ms);
            assert!(r.dispatch_ms >= r.arrival_ms);
        }
        assert!(report.aggregate.throughput_tokens_per_s > 0.0);
    }

    #[test]
    fn duplicate_request_reuses_everything_exactly() {
        let tokens: Vec<u32> = (0..24).map(|i| (i * 5 % 128) as u32).collect();
        let t = vec![
            TraceRecord { id: "a".into(), arrival_ms: 0.0, tokens: tokens.clone(), decode_steps: 2 },
            TraceRecord { id: "b".into(), arrival_ms: 500.0, tokens, decode_steps: 2 },
        ];
        let cfg = SimConfig { recompute_ratio: 0.0, ..small() };
        let report = run_simulation(&t, &cfg).unwrap();
        let dup = &report.requests[1];
        assert_eq!(dup.hit_rate, 1.0);
        assert!(dup.delta_h_after.iter().all(|&d| d == 0.0));
        assert_eq!(dup.decode_deviation, 0.0);
    }

    #[test]
    fn oracle_mode_runs() {
        let cfg = SimConfig { selection_mode: SelectionMode::Oracle, ..small() };
        let report = run_simulation(&trace(), &cfg).unwrap();
        assert!(report.aggregate.tokens_recomputed > 0);
    }

    #[test]
    fn invalid_inputs_rejected_before_running() {
        let mut bad = trace();
        bad[0].tokens.push(10_000);
        assert!(matches!(run_simulation(&bad, &small()), Err(Error::Validation(_))));
        let cfg = SimConfig { batch_size: 0, ..small() };
        assert!(matches!(run_simulation(&trace(), &cfg), Err(Error::Validation(_))));
    }
}
