//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use kvreuse::deviation::{delta_h_exact_head, delta_h_first_order, k_impact_scores, Perturbation};
use kvreuse::lab::{convergence_study, decode_study, strategy_comparison, CrossPrefixInstance, InstanceShape};
use kvreuse::matcher::{fixed_chunk_match, hit_rate, match_sequences, window_hashes, HashParams, MatchResult};
use kvreuse::model::{attention_forward, TokenId};
use kvreuse::scheduler::{optimal_batches_bruteforce, schedule, total_latency, LatencyModel, Request};
use kvreuse::selector::Strategy;
use kvreuse::sim::{
    gen_trace, report_json, run_simulation, run_simulation_with_pool, write_request_csv, GenTraceConfig, RunMode,
    SchedulerKind, SimConfig, TraceRecord,
};
use kvreuse::store::KvPool;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// 1
fn taylor_convergence() -> Outcome {
    let shape = InstanceShape::default();
    let eps = [1e-2, 5e-3, 2.5e-3, 1.25e-3];
    let mut ok = 0;
    let mut worst = (f64::INFINITY, f64::NEG_INFINITY);
    for seed in 0..20 {
        let row = convergence_study(seed, &shape, 3, 0, &eps).unwrap();
        if row.within(3.0, 5.0) {
            ok += 1;
        }
        for &r in &row.ratios {
            worst = (worst.0.min(r), worst.1.max(r));
        }
    }
    outcome(
        ok >= 18,
        format!("{ok}/20 instances with all ratios in [3, 5] (ratios span {:.3}..{:.3})", worst.0, worst.1),
    )
}

// 2
fn jacobian_exactness() -> Outcome {
    let shape = InstanceShape::default();
    let mut max_err: f64 = 0.0;
    for seed in 0..20 {
        let inst = CrossPrefixInstance::generate(seed, &shape).unwrap();
        for layer in 0..shape.model.num_layers {
            for h in inst.perturbed_heads(layer) {
                let p = Perturbation {
                    delta_k: Array2::zeros(h.k.dim()),
                    delta_v: h.delta_v.clone(),
                };
                let exact = delta_h_exact_head(&h.q, &h.k, &h.v, &p, true).unwrap();
                let fo = delta_h_first_order(&h.q, &h.k, &h.v, &p, true).unwrap();
                for (a, b) in exact.iter().zip(fo.iter()) {
                    max_err = max_err.max((a - b).abs());
                }
            }
        }
    }
    outcome(max_err <= 1e-12, format!("max element error {max_err:.2e} (tolerance 1e-12)"))
}

// 3
fn strategy_ordering() -> Outcome {
    let shape = InstanceShape::default();
    let mut sums = [0.0; 5];
    let mut near = 0;
    for seed in 0..100 {
        let row = strategy_comparison(seed, &shape, 3, 0.2).unwrap();
        for (i, s) in Strategy::ALL.iter().enumerate() {
            sums[i] += row.get(*s) / 100.0;
        }
        if row.get(Strategy::Dhd) <= 1.1 * row.get(Strategy::Ideal) {
            near += 1;
        }
    }
    let mean = |s: Strategy| sums[Strategy::ALL.iter().position(|&x| x == s).unwrap()];
    let (ideal, dhd, mag, random) = (
        mean(Strategy::Ideal),
        mean(Strategy::Dhd),
        mean(Strategy::Magnitude),
        mean(Strategy::Random),
    );
    let pass = ideal <= dhd && dhd <= mag && dhd <= random && near >= 80;
    outcome(
        pass,
        format!(
            "mean residual IDEAL {ideal:.4} DHD {dhd:.4} MAGNITUDE {mag:.4} RANDOM {random:.4} POSITIONAL {:.4}; DHD within 10% of IDEAL on {near}/100",
            mean(Strategy::Positional)
        ),
    )
}

// 4
fn decode_benefit() -> Outcome {
    let shape = InstanceShape::default();
    let mut wins = 0;
    for seed in 0..50 {
        let row = decode_study(seed, &shape, 0.2, 32, &[0, 3]).unwrap();
        if row.cumulative[1] < row.cumulative[0] {
            wins += 1;
        }
    }
    outcome(wins >= 45, format!("n_extra=3 beats n_extra=0 on {wins}/50 generations (need 45)"))
}

/// Extension scan without hashing: every equal window pair, extended while
/// tokens agree, first claim on a target position wins.
fn naive_match(target: &[TokenId], candidate: &[TokenId], w: usize) -> MatchResult {
    let mut result = MatchResult::default();
    if target.len() < w || candidate.len() < w {
        return result;
    }
    let mut matched = vec![false; target.len()];
    for j in 0..=candidate.len() - w {
        for i in 0..=target.len() - w {
            if target[i..i + w] != candidate[j..j + w] {
                continue;
            }
            let mut k = 0;
            while i + k < target.len() && j + k < candidate.len() && target[i + k] == candidate[j + k] {
                if !matched[i + k] {
                    matched[i + k] = true;
                    result.target_matches.push(i + k);
                    result.candidate_matches.push(j + k);
                }
                k += 1;
            }
        }
    }
    result
}

fn random_seq(rng: &mut ChaCha8Rng, len: usize, vocab: u32) -> Vec<TokenId> {
    (0..len).map(|_| rng.gen_range(0..vocab)).collect()
}

/// Sequence assembled from shared chunks, random fillers and truncations.
fn spliced_seq(rng: &mut ChaCha8Rng, library: &[Vec<TokenId>], vocab: u32) -> Vec<TokenId> {
    let mut out = Vec::new();
    for _ in 0..rng.gen_range(1..6) {
        if rng.gen_bool(0.6) {
            let c = &library[rng.gen_range(0..library.len())];
            let a = rng.gen_range(0..c.len());
            let b = rng.gen_range(a..=c.len());
            out.extend_from_slice(&c[a..b]);
        } else {
            let n = rng.gen_range(0..12);
            out.extend(random_seq(rng, n, vocab));
        }
    }
    out
}

// 5
fn matcher_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut pairs: Vec<(Vec<TokenId>, Vec<TokenId>, usize)> = Vec::new();
    for _ in 0..1000 {
        let vocab = rng.gen_range(2..50_000);
        let library: Vec<Vec<TokenId>> = (0..4)
            .map(|_| {
                let n = rng.gen_range(1..24);
                random_seq(&mut rng, n, vocab)
            })
            .collect();
        let t = spliced_seq(&mut rng, &library, vocab);
        let c = spliced_seq(&mut rng, &library, vocab);
        pairs.push((t, c, rng.gen_range(1..9)));
    }
    let n_random = pairs.len();
    for w in 1..=6 {
        for len in [0, 1, w - 1, w, w + 1, 17, 40] {
            pairs.push((vec![7; len], vec![7; 23], w));
            pairs.push((vec![7; 23], vec![7; len], w));
        }
        for period in 1..=4u32 {
            let t: Vec<TokenId> = (0..37).map(|i| i % period).collect();
            let c: Vec<TokenId> = (3..29).map(|i| i % period).collect();
            pairs.push((t.clone(), c.clone(), w));
            pairs.push((c, t, w));
        }
        let runs: Vec<TokenId> = [1, 1, 1, 2, 2, 1, 1, 1, 1, 2, 1, 1, 1].repeat(3);
        pairs.push((runs.clone(), runs[5..].to_vec(), w));
    }
    let n_adversarial = pairs.len() - n_random;

    let default = HashParams::default();
    let mut mismatches = 0;
    let mut false_matches = 0;
    let mut collisions = 0;
    for (t, c, w) in &pairs {
        let oracle = naive_match(t, c, *w);
        for modulus in [default.modulus, 251] {
            let params = HashParams {
                window: *w,
                modulus,
                ..default
            };
            params.validate().unwrap();
            let got = match_sequences(t, c, &params);
            if got != oracle {
                mismatches += 1;
            }
            false_matches += got.pairs().filter(|&(i, j)| t[i] != c[j]).count();
            if modulus == 251 && t.len() >= *w && c.len() >= *w {
                let th = window_hashes(t, &params);
                let ch = window_hashes(c, &params);
                for (j, hj) in ch.iter().enumerate() {
                    for (i, hi) in th.iter().enumerate() {
                        if hi == hj && t[i..i + w] != c[j..j + w] {
                            collisions += 1;
                        }
                    }
                }
            }
        }
    }
    outcome(
        mismatches == 0 && false_matches == 0 && collisions > 0,
        format!(
            "{n_random} random + {n_adversarial} adversarial pairs, {mismatches} disagreements with the scan oracle, {false_matches} false matches, {collisions} forced collisions at m=251"
        ),
    )
}

// 6
fn adaptive_vs_fixed() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ok = 0;
    let mut strict = 0;
    for _ in 0..1000 {
        let vocab = rng.gen_range(4..2000);
        let library: Vec<Vec<TokenId>> = (0..4)
            .map(|_| {
                let n = rng.gen_range(8..40);
                random_seq(&mut rng, n, vocab)
            })
            .collect();
        let t = spliced_seq(&mut rng, &library, vocab);
        let c = spliced_seq(&mut rng, &library, vocab);
        let w = rng.gen_range(1..9);
        let adaptive = match_sequences(&t, &c, &HashParams::with_window(w));
        let fixed = fixed_chunk_match(&t, &c, w).unwrap();
        let (a, f) = (hit_rate(&t, &adaptive.target_matches), hit_rate(&t, &fixed.target_matches));
        if a >= f {
            ok += 1;
        }
        if a > f {
            strict += 1;
        }
    }
    outcome(ok == 1000, format!("adaptive >= fixed on {ok}/1000 pairs (strictly higher on {strict})"))
}

// 7
fn scheduler_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = LatencyModel::default();
    let mut worst: f64 = 0.0;
    for k in 0..200 {
        let n = rng.gen_range(1..=8);
        let batch_size = if k % 2 == 0 { 2 } else { 3 };
        let queue: Vec<Request> = (0..n)
            .map(|i| Request::with_hit_rate(format!("r{i}"), i as f64, rng.gen_range(0.0..=1.0)).unwrap())
            .collect();
        let sorted = total_latency(&schedule(&queue, batch_size).unwrap(), &model).unwrap();
        let (_, best) = optimal_batches_bruteforce(&queue, batch_size, &model).unwrap();
        worst = worst.max(sorted - best);
    }
    outcome(
        worst <= 1e-9,
        format!("largest gap to the exhaustive minimum {worst:.2e} over 200 instances (tolerance 1e-9)"),
    )
}

// 8
fn scheduler_ablation() -> Outcome {
    let mut wins = 0;
    let mut reduction = 0.0;
    for seed in 0..20 {
        let trace = gen_trace(&GenTraceConfig {
            bimodal: true,
            decode_steps: 0,
            seed,
            ..GenTraceConfig::default()
        })
        .unwrap();
        let aware = run_simulation(&trace, &SimConfig { seed, ..SimConfig::default() }).unwrap();
        let fcfs = run_simulation(
            &trace,
            &SimConfig {
                seed,
                scheduler: SchedulerKind::Fcfs,
                ..SimConfig::default()
            },
        )
        .unwrap();
        let (a, f) = (aware.aggregate.mean_ttft_ms, fcfs.aggregate.mean_ttft_ms);
        if a < f {
            wins += 1;
        }
        reduction += (f - a) / f / 20.0;
    }
    outcome(
        wins == 20,
        format!(
            "cache-aware mean TTFT below FCFS on {wins}/20 traces, mean relative reduction {:.1}%",
            100.0 * reduction
        ),
    )
}

// 9
fn exact_prefix_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let config = SimConfig {
        mode: RunMode::Selective,
        recompute_ratio: 0.0,
        ..SimConfig::default()
    };
    let tokens = random_seq(&mut rng, 48, config.model.vocab_size as u32);
    let trace = vec![
        TraceRecord {
            id: "first".into(),
            arrival_ms: 0.0,
            tokens: tokens.clone(),
            decode_steps: 4,
        },
        TraceRecord {
            id: "again".into(),
            arrival_ms: 1000.0,
            tokens,
            decode_steps: 4,
        },
    ];
    let report = run_simulation(&trace, &config).unwrap();
    let dup = &report.requests[1];
    let max_dev = dup.delta_h_after.iter().chain(&dup.delta_h_before).fold(0.0f64, |m, &d| m.max(d));
    outcome(
        dup.hit_rate == 1.0 && max_dev == 0.0 && dup.tokens_recomputed == 0,
        format!(
            "hit rate {}, max per-layer deviation {max_dev:e}, {} tokens recomputed",
            dup.hit_rate, dup.tokens_recomputed
        ),
    )
}

// 10
fn persistence_and_determinism() -> Outcome {
    let trace = gen_trace(&GenTraceConfig {
        requests: 12,
        decode_steps: 4,
        seed: 10,
        ..GenTraceConfig::default()
    })
    .unwrap();
    let config = SimConfig {
        seed: 10,
        ..SimConfig::default()
    };
    let run = || {
        let mut pool = KvPool::new(&config.model, config.hash).unwrap();
        let report = run_simulation_with_pool(&trace, &config, &mut pool).unwrap();
        let mut csv = Vec::new();
        write_request_csv(&report, &mut csv).unwrap();
        (report_json(&report), csv, pool)
    };
    let (json_a, csv_a, pool) = run();
    let (json_b, csv_b, _) = run();
    let deterministic = json_a == json_b && csv_a == csv_b;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pool.kvsh");
    pool.save(&path).unwrap();
    let loaded = KvPool::load(&path, config.hash).unwrap();
    let mut exact = loaded.ids() == pool.ids();
    let mut values = 0usize;
    for entry in pool.entries() {
        let other = loaded.get(entry.request_id()).unwrap();
        exact &= other.tokens() == entry.tokens();
        let (a, b) = (entry.kv(), other.kv());
        for l in 0..a.num_layers() {
            for h in 0..a.num_heads() {
                for (m, n) in [(a.keys(l, h), b.keys(l, h)), (a.values(l, h), b.values(l, h))] {
                    for (x, y) in m.iter().zip(n.iter()) {
                        exact &= (*x as f32).to_bits() == (*y as f32).to_bits() && *y == *x as f32 as f64;
                        values += 1;
                    }
                }
            }
        }
    }
    exact &= loaded.to_bytes() == pool.to_bytes();
    outcome(
        deterministic && exact && !pool.is_empty(),
        format!(
            "{} entries / {values} values round-trip exactly at f32: {exact}; repeated runs byte-identical: {deterministic}",
            pool.len()
        ),
    )
}

// 11
fn k_impact_finite_difference() -> Outcome {
    let shape = InstanceShape::default();
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for seed in 0..10 {
        let inst = CrossPrefixInstance::generate(seed, &shape).unwrap();
        for layer in 1..shape.model.num_layers {
            for h in inst.perturbed_heads(layer) {
                let scores = k_impact_scores(&h.q, &h.k, &h.v, &h.delta_k, true).unwrap();
                for i in inst.reuse.reused_positions() {
                    let shifted = |sign: f64| {
                        let mut k = h.k.clone();
                        k.row_mut(i).scaled_add(sign * step, &h.delta_k.row(i));
                        attention_forward(&h.q, &k, &h.v, true).unwrap().0
                    };
                    let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * step);
                    let fd = fd.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let analytic = scores.as_slice()[i];
                    worst = worst.max((analytic - fd).abs() / fd.abs().max(1e-6));
                    checked += 1;
                }
            }
        }
    }
    outcome(
        worst <= 1e-4,
        format!("{checked} token scores, worst relative error {worst:.2e} (tolerance 1e-4)"),
    )
}

type Criterion = (&'static str, Duration, fn() -> Outcome);

fn main() -> ExitCode {
    // Runtime budgets are wall-clock limits for an optimized build.
    let criteria: [Criterion; 11] = [
        ("first-order residual converges quadratically", Duration::from_secs(10), taylor_convergence),
        ("value-only first-order deviation is exact", Duration::from_secs(1), jacobian_exactness),
        ("strategy ordering at r=0.2", Duration::from_secs(60), strategy_ordering),
        ("decode-stage recomputation reduces drift", Duration::from_secs(60), decode_benefit),
        ("matcher agrees with the scan oracle", Duration::from_secs(30), matcher_oracle),
        ("adaptive matching never loses to fixed chunks", Duration::from_secs(30), adaptive_vs_fixed),
        ("sorted batching is globally optimal", Duration::from_secs(60), scheduler_optimality),
        ("cache-aware scheduling lowers mean TTFT", Duration::from_secs(60), scheduler_ablation),
        ("exact-prefix reuse is lossless", Duration::from_secs(5), exact_prefix_identity),
        ("pool persistence and run determinism", Duration::from_secs(10), persistence_and_determinism),
        ("k-impact matches finite differences", Duration::from_secs(10), k_impact_finite_difference),
    ];
    let mut failed = 0;
    for (n, (name, budget, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = run();
        let elapsed = start.elapsed();
        let in_time = elapsed <= *budget;
        let pass = o.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "{} criterion {}: {name}: {} [{:.2}s of {}s]",
            if pass { "PASS" } else { "FAIL" },
            n + 1,
            o.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
