//! Adaptive-length token matching with a polynomial rolling hash.
//!
//! Windows of the target are indexed by hash. Each candidate window that hits
//! the index is extended token by token from the indexed target position for as
//! long as the tokens agree, so a match is never shorter than what the tokens
//! support and hash collisions never produce a pair of unequal tokens.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashParams {
    pub window: usize,
    pub base: u64,
    pub modulus: u64,
}

impl Default for HashParams {
    fn default() -> Self {
        Self {
            window: 8,
            base: 31,
            modulus: 1_000_000_007,
        }
    }
}

impl HashParams {
    pub fn with_window(window: usize) -> Self {
        Self {
            window,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Parameter("window size must be at least 1".into()));
        }
        if self.base < 2 {
            return Err(Error::Parameter("hash base must be at least 2".into()));
        }
        if self.modulus <= self.base || !is_prime(self.modulus) {
            return Err(Error::Parameter(format!(
                "modulus {} must be a prime larger than the base {}",
                self.modulus, self.base
            )));
        }
        Ok(())
    }

    /// `base^(window-1) mod modulus`, the weight of the outgoing token.
    fn lead_weight(&self) -> u64 {
        pow_mod(self.base, self.window as u64 - 1, self.modulus)
    }
}

fn mul_mod(a: u64, b: u64, m: u64) -> u64 {
    ((a as u128 * b as u128) % m as u128) as u64
}

fn pow_mod(mut b: u64, mut e: u64, m: u64) -> u64 {
    let mut acc = 1 % m;
    b %= m;
    while e > 0 {
        if e & 1 == 1 {
            acc = mul_mod(acc, b, m);
        }
        b = mul_mod(b, b, m);
        e >>= 1;
    }
    acc
}

/// Deterministic Miller-Rabin for 64-bit inputs.
fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    const WITNESSES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    for p in WITNESSES {
        if n.is_multiple_of(p) {
            return n == p;
        }
    }
    let mut d = n - 1;
    let mut s = 0;
    while d.is_multiple_of(2) {
        d /= 2;
        s += 1;
    }
    'witness: for a in WITNESSES {
        let mut x = pow_mod(a, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mul_mod(x, x, n);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// `(t_0·b^(w−1) + t_1·b^(w−2) + … + t_(w−1)) mod m` over `tokens[start..start + w]`.
pub fn rolling_hash(tokens: &[TokenId], start: usize, params: &HashParams) -> Result<u64> {
    let end = start
        .checked_add(params.window)
        .filter(|&e| e <= tokens.len())
        .ok_or_else(|| {
            Error::Range(format!(
                "window [{start}, {start}+{}) exceeds sequence of length {}",
                params.window,
                tokens.len()
            ))
        })?;
    let m = params.modulus as u128;
    let b = params.base as u128;
    let h = tokens[start..end]
        .iter()
        .fold(0u128, |acc, &t| (acc * b + t as u128) % m);
    Ok(h as u64)
}

/// Hashes of every window, left to right, using the O(1) rolling update.
pub fn window_hashes(tokens: &[TokenId], params: &HashParams) -> Vec<u64> {
    let w = params.window;
    if w == 0 || tokens.len() < w {
        return Vec::new();
    }
    let m = params.modulus as u128;
    let b = params.base as u128;
    let lead = params.lead_weight() as u128;
    let mut h = rolling_hash(tokens, 0, params).expect("window fits") as u128;
    let mut out = Vec::with_capacity(tokens.len() - w + 1);
    out.push(h as u64);
    for i in 1..=tokens.len() - w {
        let outgoing = (tokens[i - 1] as u128 % m) * lead % m;
        h = ((h + m - outgoing) % m * b + tokens[i + w - 1] as u128) % m;
        out.push(h as u64);
    }
    out
}

/// Window hash → ascending start positions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HashIndex {
    buckets: HashMap<u64, Vec<usize>>,
    entries: usize,
}

impl HashIndex {
    pub fn positions(&self, hash: u64) -> &[usize] {
        self.buckets.get(&hash).map_or(&[], Vec::as_slice)
    }

    pub fn num_keys(&self) -> usize {
        self.buckets.len()
    }

    /// Total number of indexed window starts.
    pub fn num_entries(&self) -> usize {
        self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries == 0
    }
}

pub fn build_hash_index(target: &[TokenId], params: &HashParams) -> HashIndex {
    let mut index = HashIndex::default();
    for (i, h) in window_hashes(target, params).into_iter().enumerate() {
        index.buckets.entry(h).or_default().push(i);
        index.entries += 1;
    }
    index
}

/// Aligned matched positions: `target[target_matches[k]] == candidate[candidate_matches[k]]`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    pub target_matches: Vec<usize>,
    pub candidate_matches: Vec<usize>,
}

impl MatchResult {
    pub fn len(&self) -> usize {
        self.target_matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_matches.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.target_matches
            .iter()
            .copied()
            .zip(self.candidate_matches.iter().copied())
    }
}

pub fn match_sequences(target: &[TokenId], candidate: &[TokenId], params: &HashParams) -> MatchResult {
    let index = build_hash_index(target, params);
    match_with_index(target, &index, candidate, &window_hashes(candidate, params))
}

/// Matching against a prebuilt target index and precomputed candidate window
/// hashes (both under the same parameters).
///
/// Only target positions are deduplicated, so one candidate position may back
/// several target positions. Extensions shorter than the window are hash
/// collisions and are dropped.
pub fn match_with_index(
    target: &[TokenId],
    index: &HashIndex,
    candidate: &[TokenId],
    candidate_hashes: &[u64],
) -> MatchResult {
    let mut result = MatchResult::default();
    let mut matched = vec![false; target.len()];
    if candidate_hashes.is_empty() {
        return result;
    }
    let window = candidate.len() + 1 - candidate_hashes.len();
    for (j, &h) in candidate_hashes.iter().enumerate() {
        for &i in index.positions(h) {
            let mut k = 0;
            while i + k < target.len() && j + k < candidate.len() && target[i + k] == candidate[j + k] {
                k += 1;
            }
            // A shorter run means the hashes collided.
            if k < window {
                continue;
            }
            for d in 0..k {
                if !matched[i + d] {
                    matched[i + d] = true;
                    result.target_matches.push(i + d);
                    result.candidate_matches.push(j + d);
                }
            }
        }
    }
    result
}

/// Baseline: whole aligned target chunks found verbatim at an aligned chunk
/// boundary of the candidate. No extension; the first equal candidate chunk wins.
pub fn fixed_chunk_match(target: &[TokenId], candidate: &[TokenId], chunk_size: usize) -> Result<MatchResult> {
    if chunk_size == 0 {
        return Err(Error::Parameter("chunk size must be at least 1".into()));
    }
    let mut candidate_chunks: HashMap<&[TokenId], usize> = HashMap::new();
    for (d, chunk) in candidate.chunks_exact(chunk_size).enumerate() {
        candidate_chunks.entry(chunk).or_insert(d);
    }
    let mut result = MatchResult::default();
    for (c, chunk) in target.chunks_exact(chunk_size).enumerate() {
        if let Some(&d) = candidate_chunks.get(chunk) {
            for k in 0..chunk_size {
                result.target_matches.push(c * chunk_size + k);
                result.candidate_matches.push(d * chunk_size + k);
            }
        }
    }
    Ok(result)
}

/// Distinct matched positions over request length; 0 for an empty request.
pub fn hit_rate(tokens: &[TokenId], matched: &[usize]) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    let distinct: HashSet<usize> = matched.iter().copied().filter(|&p| p < tokens.len()).collect();
    distinct.len() as f64 / tokens.len() as f64
}

/// How cached entries are matched against a new request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Matcher {
    Adaptive(HashParams),
    Fixed { chunk_size: usize },
}

impl Matcher {
    pub fn match_pair(&self, target: &[TokenId], candidate: &[TokenId]) -> Result<MatchResult> {
        match self {
            Matcher::Adaptive(p) => Ok(match_sequences(target, candidate, p)),
            Matcher::Fixed { chunk_size } => fixed_chunk_match(target, candidate, *chunk_size),
        }
    }
}
