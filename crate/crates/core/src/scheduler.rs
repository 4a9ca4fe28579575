//! Cache-aware prefill batching.
//!
//! Requests are ordered by cache hit rate, highest first, and sliced into
//! consecutive batches. Batch cost comes from a decreasing concave function of
//! the batch's mean hit rate, which is what makes grouping similar hit rates pay
//! off. An exhaustive partition search is provided as a reference minimizer.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenId;

/// Largest instance the exhaustive search accepts.
pub const BRUTE_FORCE_LIMIT: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: String,
    pub arrival_ms: f64,
    pub tokens: Arc<[TokenId]>,
    pub decode_steps: usize,
    hit_rate: f64,
}

impl Request {
    pub fn new(
        id: impl Into<String>,
        arrival_ms: f64,
        tokens: impl Into<Arc<[TokenId]>>,
        decode_steps: usize,
        hit_rate: f64,
    ) -> Result<Self> {
        if !(arrival_ms.is_finite() && arrival_ms >= 0.0) {
            return Err(Error::Parameter(format!("arrival time {arrival_ms} must be finite and non-negative")));
        }
        let mut r = Self {
            id: id.into(),
            arrival_ms,
            tokens: tokens.into(),
            decode_steps,
            hit_rate: 0.0,
        };
        r.set_hit_rate(hit_rate)?;
        Ok(r)
    }

    /// Request carrying only a hit rate, for scheduling studies.
    pub fn with_hit_rate(id: impl Into<String>, arrival_ms: f64, hit_rate: f64) -> Result<Self> {
        Self::new(id, arrival_ms, Vec::new(), 0, hit_rate)
    }

    pub fn hit_rate(&self) -> f64 {
        self.hit_rate
    }

    pub fn set_hit_rate(&mut self, hit_rate: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&hit_rate) {
            return Err(Error::Parameter(format!("hit rate {hit_rate} outside [0, 1]")));
        }
        self.hit_rate = hit_rate;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub requests: Vec<Request>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    /// Unweighted mean of member hit rates; 0 for an empty batch.
    pub fn mean_hit_rate(&self) -> f64 {
        if self.requests.is_empty() {
            return 0.0;
        }
        self.requests.iter().map(Request::hit_rate).sum::<f64>() / self.requests.len() as f64
    }

    pub fn ids(&self) -> Vec<&str> {
        self.requests.iter().map(|r| r.id.as_str()).collect()
    }

    fn max_tokens(&self) -> usize {
        self.requests.iter().map(|r| r.tokens.len()).max().unwrap_or(0)
    }
}

/// `f(h) = base_ms + compute_ms·(1−h)^exponent`, plus `per_token_ms` times the
/// longest request in the batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub base_ms: f64,
    pub compute_ms: f64,
    pub exponent: f64,
    pub per_token_ms: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            base_ms: 10.0,
            compute_ms: 100.0,
            exponent: 0.5,
            per_token_ms: 0.0,
        }
    }
}

const CONCAVITY_GRID: usize = 64;

impl LatencyModel {
    pub fn latency_at(&self, hit_rate: f64) -> f64 {
        self.base_ms + self.compute_ms * (1.0 - hit_rate).max(0.0).powf(self.exponent)
    }

    /// Midpoint concavity of `latency_at` on a uniform grid over [0, 1].
    pub fn is_concave(&self) -> bool {
        let grid: Vec<f64> = (0..=CONCAVITY_GRID).map(|i| i as f64 / CONCAVITY_GRID as f64).collect();
        grid.iter().all(|&x| {
            grid.iter().all(|&y| {
                let mid = self.latency_at(0.5 * (x + y));
                let chord = 0.5 * (self.latency_at(x) + self.latency_at(y));
                mid >= chord - 1e-9 * (1.0 + chord.abs())
            })
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("base latency", self.base_ms),
            ("compute latency", self.compute_ms),
            ("per-token latency", self.per_token_ms),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Parameter(format!("{name} {v} must be finite and non-negative")));
            }
        }
        if !self.exponent.is_finite() {
            return Err(Error::Parameter("latency exponent must be finite".into()));
        }
        if !self.is_concave() {
            return Err(Error::Parameter(format!(
                "latency model with exponent {} is not concave in the hit rate",
                self.exponent
            )));
        }
        if !(self.exponent > 0.0 && self.exponent <= 1.0) {
            return Err(Error::Parameter(format!("latency exponent {} outside (0, 1]", self.exponent)));
        }
        Ok(())
    }
}

pub fn batch_latency(batch: &Batch, model: &LatencyModel) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Parameter("cannot price an empty batch".into()));
    }
    Ok(model.latency_at(batch.mean_hit_rate()) + model.per_token_ms * batch.max_tokens() as f64)
}

pub fn total_latency(batches: &[Batch], model: &LatencyModel) -> Result<f64> {
    batches.iter().map(|b| batch_latency(b, model)).sum()
}

fn check_batch_size(batch_size: usize) -> Result<()> {
    if batch_size == 0 {
        Err(Error::Parameter("batch size must be at least 1".into()))
    } else {
        Ok(())
    }
}

/// Consecutive batches of `batch_size`; when the count does not divide evenly
/// the short batch comes first.
fn slice(requests: Vec<Request>, batch_size: usize) -> Vec<Batch> {
    let mut batches = Vec::with_capacity(requests.len().div_ceil(batch_size));
    let mut it = requests.into_iter();
    let head = it.len() % batch_size;
    if head > 0 {
        batches.push(Batch {
            requests: it.by_ref().take(head).collect(),
        });
    }
    while it.len() > 0 {
        batches.push(Batch {
            requests: it.by_ref().take(batch_size).collect(),
        });
    }
    batches
}

/// Stable sort by hit rate, highest first, then consecutive batches of at most
/// `batch_size`. Ties keep queue order.
///
/// Only the first batch can be short. Leaving the short batch at the tail
/// instead can lose to other partitions, e.g. hit rates `[1, 0.5, 0.5]` with
/// batches of two.
pub fn schedule(queue: &[Request], batch_size: usize) -> Result<Vec<Batch>> {
    schedule_with_aging(queue, batch_size, 0.0, 0.0)
}

/// Like [`schedule`], ordering by `hit_rate + aging_per_ms · (now_ms − arrival_ms)`.
pub fn schedule_with_aging(queue: &[Request], batch_size: usize, now_ms: f64, aging_per_ms: f64) -> Result<Vec<Batch>> {
    check_batch_size(batch_size)?;
    if !(aging_per_ms.is_finite() && aging_per_ms >= 0.0) {
        return Err(Error::Parameter(format!("aging rate {aging_per_ms} must be finite and non-negative")));
    }
    let priority = |r: &Request| r.hit_rate + aging_per_ms * (now_ms - r.arrival_ms).max(0.0);
    let mut order: Vec<Request> = queue.to_vec();
    order.sort_by(|a, b| priority(b).total_cmp(&priority(a)));
    Ok(slice(order, batch_size))
}

/// Queue order, sliced like [`schedule`].
pub fn fcfs_schedule(queue: &[Request], batch_size: usize) -> Result<Vec<Batch>> {
    check_batch_size(batch_size)?;
    Ok(slice(queue.to_vec(), batch_size))
}

/// Online dispatch: the first `batch_size` requests in priority order, as
/// indices into `queue`. Cache-aware order is hit rate (plus aging) descending,
/// otherwise queue order.
pub fn next_batch(
    queue: &[Request],
    batch_size: usize,
    cache_aware: bool,
    now_ms: f64,
    aging_per_ms: f64,
) -> Result<Vec<usize>> {
    check_batch_size(batch_size)?;
    let mut order: Vec<usize> = (0..queue.len()).collect();
    if cache_aware {
        let priority = |r: &Request| r.hit_rate + aging_per_ms * (now_ms - r.arrival_ms).max(0.0);
        order.sort_by(|&a, &b| priority(&queue[b]).total_cmp(&priority(&queue[a])));
    }
    order.truncate(batch_size);
    Ok(order)
}

/// Minimum total latency over every partition of `requests` into batches of
/// at most `batch_size`. Batches are returned by decreasing mean hit rate.
pub fn optimal_batches_bruteforce(
    requests: &[Request],
    batch_size: usize,
    model: &LatencyModel,
) -> Result<(Vec<Batch>, f64)> {
    check_batch_size(batch_size)?;
    if requests.len() > BRUTE_FORCE_LIMIT {
        return Err(Error::Parameter(format!(
            "exhaustive search limited to {BRUTE_FORCE_LIMIT} requests, got {}",
            requests.len()
        )));
    }
    let mut search = PartitionSearch {
        requests,
        batch_size,
        model,
        blocks: Vec::new(),
        best: None,
    };
    search.descend(0)?;
    let (blocks, cost) = search.best.unwrap_or((Vec::new(), 0.0));
    let mut batches: Vec<Batch> = blocks
        .into_iter()
        .map(|b| Batch {
            requests: b.into_iter().map(|i| requests[i].clone()).collect(),
        })
        .collect();
    batches.sort_by(|a, b| b.mean_hit_rate().total_cmp(&a.mean_hit_rate()));
    Ok((batches, cost))
}

struct PartitionSearch<'a> {
    requests: &'a [Request],
    batch_size: usize,
    model: &'a LatencyModel,
    blocks: Vec<Vec<usize>>,
    best: Option<(Vec<Vec<usize>>, f64)>,
}

impl PartitionSearch<'_> {
    /// Places request `next` into each open block with room, or a new block.
    fn descend(&mut self, next: usize) -> Result<()> {
        if next == self.requests.len() {
            let batches: Vec<Batch> = self
                .blocks
                .iter()
                .map(|b| Batch {
                    requests: b.iter().map(|&i| self.requests[i].clone()).collect(),
                })
                .collect();
            let cost = total_latency(&batches, self.model)?;
            if self.best.as_ref().is_none_or(|(_, c)| cost < *c) {
                self.best = Some((self.blocks.clone(), cost));
            }
            return Ok(());
        }
        for b in 0..self.blocks.len() {
            if self.blocks[b].len() < self.batch_size {
                self.blocks[b].push(next);
                self.descend(next + 1)?;
                self.blocks[b].pop();
            }
        }
        self.blocks.push(vec![next]);
        self.descend(next + 1)?;
        self.blocks.pop();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, proptest};

    fn queue(hits: &[f64]) -> Vec<Request> {
        hits.iter()
            .enumerate()
            .map(|(i, &h)| Request::with_hit_rate(format!("r{i}"), i as f64, h).unwrap())
            .collect()
    }

    fn hit_rates(batches: &[Batch]) -> Vec<Vec<f64>> {
        batches
            .iter()
            .map(|b| b.requests.iter().map(Request::hit_rate).collect())
            .collect()
    }

    fn single(h: f64) -> Batch {
        Batch { requests: queue(&[h]) }
    }

    #[test]
    fn batch_latency_examples() {
        let m = LatencyModel::default();
        assert_eq!(batch_latency(&single(1.0), &m).unwrap(), 10.0);
        assert_eq!(batch_latency(&single(0.75), &m).unwrap(), 60.0);
        assert_eq!(batch_latency(&single(0.0), &m).unwrap(), 110.0);
        assert!(batch_latency(&Batch { requests: vec![] }, &m).is_err());
    }

    #[test]
    fn per_token_term_uses_longest_request() {
        let m = LatencyModel {
            per_token_ms: 0.5,
            ..LatencyModel::default()
        };
        let b = Batch {
            requests: vec![
                Request::new("a", 0.0, vec![1; 4], 0, 1.0).unwrap(),
                Request::new("b", 0.0, vec![1; 10], 0, 1.0).unwrap(),
            ],
        };
        assert_eq!(batch_latency(&b, &m).unwrap(), 15.0);
    }

    #[test]
    fn sorted_slicing_example() {
        let q = queue(&[0.9, 0.1, 0.8, 0.2]);
        let sorted = schedule(&q, 2).unwrap();
        assert_eq!(hit_rates(&sorted), vec![vec![0.9, 0.8], vec![0.2, 0.1]]);
        let m = LatencyModel::default();
        let sorted_total = total_latency(&sorted, &m).unwrap();
        let expected = 20.0 + 100.0 * 0.15f64.sqrt() + 100.0 * 0.85f64.sqrt();
        assert!((sorted_total - expected).abs() < 1e-12);
        assert!((sorted_total - 150.93).abs() < 5e-3);
        let fcfs = fcfs_schedule(&q, 2).unwrap();
        let mixed_total = total_latency(&fcfs, &m).unwrap();
        assert!((mixed_total - 161.42).abs() < 5e-3);
        assert!(sorted_total < mixed_total);
        let (_, best) = optimal_batches_bruteforce(&q, 2, &m).unwrap();
        assert!((best - sorted_total).abs() < 1e-9);
    }

    #[test]
    fn ties_keep_arrival_order() {
        let q = queue(&[0.5; 5]);
        let batches = schedule(&q, 2).unwrap();
        let ids: Vec<Vec<&str>> = batches.iter().map(Batch::ids).collect();
        assert_eq!(ids, vec![vec!["r0"], vec!["r1", "r2"], vec!["r3", "r4"]]);
    }

    #[test]
    fn trivial_cases() {
        let m = LatencyModel::default();
        let q = queue(&[0.3]);
        assert_eq!(schedule(&q, 4).unwrap().len(), 1);
        let (b, cost) = optimal_batches_bruteforce(&q, 4, &m).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(cost, batch_latency(&b[0], &m).unwrap());
        let ones = schedule(&queue(&[1.0; 5]), 2).unwrap();
        assert_eq!(total_latency(&ones, &m).unwrap(), 30.0);
        assert!(schedule(&q, 0).is_err());
        assert!(fcfs_schedule(&q, 0).is_err());
        assert!(optimal_batches_bruteforce(&queue(&[0.5; 11]), 2, &m).is_err());
        assert!(schedule(&[], 2).unwrap().is_empty());
    }

    #[test]
    fn fcfs_equals_sorted_when_already_sorted() {
        let q = queue(&[0.9, 0.7, 0.4, 0.2, 0.1]);
        assert_eq!(fcfs_schedule(&q, 2).unwrap(), schedule(&q, 2).unwrap());
    }

    #[test]
    fn hit_rate_range_enforced() {
        assert!(Request::with_hit_rate("x", 0.0, 1.1).is_err());
        assert!(Request::with_hit_rate("x", 0.0, -0.1).is_err());
        assert!(Request::with_hit_rate("x", -1.0, 0.5).is_err());
    }

    #[test]
    fn convex_model_is_rejected() {
        let convex = LatencyModel {
            exponent: 2.0,
            ..LatencyModel::default()
        };
        assert!(!convex.is_concave());
        assert!(convex.validate().is_err());
        assert!(LatencyModel::default().validate().is_ok());
        assert!(LatencyModel { exponent: 1.0, ..LatencyModel::default() }.validate().is_ok());
        assert!(LatencyModel { exponent: 0.0, ..LatencyModel::default() }.validate().is_err());
        assert!(LatencyModel { base_ms: -1.0, ..LatencyModel::default() }.validate().is_err());
    }

    #[test]
    fn aging_promotes_old_requests() {
        let q = vec![
            Request::with_hit_rate("old", 0.0, 0.1).unwrap(),
            Request::with_hit_rate("new", 900.0, 0.9).unwrap(),
        ];
        assert_eq!(schedule(&q, 1).unwrap()[0].ids(), vec!["new"]);
        assert_eq!(schedule_with_aging(&q, 1, 1000.0, 0.01).unwrap()[0].ids(), vec!["old"]);
        assert!(schedule_with_aging(&q, 1, 1000.0, -1.0).is_err());
    }

    #[test]
    fn short_batch_goes_first() {
        let m = LatencyModel::default();
        let q = queue(&[1.0, 0.5, 0.5]);
        let batches = schedule(&q, 2).unwrap();
        assert_eq!(hit_rates(&batches), vec![vec![1.0], vec![0.5, 0.5]]);
        let tail_short = vec![
            Batch { requests: q[..2].to_vec() },
            Batch { requests: q[2..].to_vec() },
        ];
        let (_, best) = optimal_batches_bruteforce(&q, 2, &m).unwrap();
        assert!((total_latency(&batches, &m).unwrap() - best).abs() < 1e-12);
        assert!(total_latency(&tail_short, &m).unwrap() > best + 40.0);
    }

    #[test]
    fn next_batch_takes_top_of_order() {
        let q = queue(&[0.2, 0.9, 0.5, 0.9]);
        assert_eq!(next_batch(&q, 3, true, 0.0, 0.0).unwrap(), vec![1, 3, 2]);
        assert_eq!(next_batch(&q, 3, false, 0.0, 0.0).unwrap(), vec![0, 1, 2]);
        assert_eq!(next_batch(&q, 8, true, 0.0, 0.0).unwrap().len(), 4);
        assert!(next_batch(&q, 0, true, 0.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn sorted_matches_exhaustive_minimum(
            hits in proptest::collection::vec(0.0f64..=1.0, 1..=8),
            batch_size in 2usize..=3,
            base in 0.0f64..50.0,
            compute in 1.0f64..200.0,
            exponent in 0.05f64..=1.0,
        ) {
            let m = LatencyModel { base_ms: base, compute_ms: compute, exponent, per_token_ms: 0.0 };
            let q = queue(&hits);
            let sorted = total_latency(&schedule(&q, batch_size).unwrap(), &m).unwrap();
            let (_, best) = optimal_batches_bruteforce(&q, batch_size, &m).unwrap();
            prop_assert!((sorted - best).abs() <= 1e-9);
        }

        #[test]
        fn cross_batch_swaps_never_help(hits in proptest::collection::vec(0.0f64..=1.0, 2..=8), batch_size in 2usize..=3) {
            let m = LatencyModel::default();
            let batches = schedule(&queue(&hits), batch_size).unwrap();
            let base = total_latency(&batches, &m).unwrap();
            for i in 0..batches.len() {
                for j in i + 1..batches.len() {
                    for a in 0..batches[i].len() {
                        for b in 0..batches[j].len() {
                            let mut swapped = batches.clone();
                            let ra = swapped[i].requests[a].clone();
                            swapped[i].requests[a] = swapped[j].requests[b].clone();
                            swapped[j].requests[b] = ra;
                            prop_assert!(total_latency(&swapped, &m).unwrap() >= base - 1e-9);
                        }
                    }
                }
            }
        }

        #[test]
        fn schedule_ignores_queue_permutation(hits in proptest::collection::vec(0.0f64..=1.0, 1..=8), seed in 0u64..1000) {
            use rand::{seq::SliceRandom, SeedableRng};
            let q = queue(&hits);
            let mut shuffled = q.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            shuffled.sort_by(|a, b| a.arrival_ms.total_cmp(&b.arrival_ms));
            prop_assert!(schedule(&q, 3).unwrap() == schedule(&shuffled, 3).unwrap());
        }
    }
}
