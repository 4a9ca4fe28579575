//! Choosing which reused tokens to recompute.
//!
//! The deviation-aware rule scores a reused token by the attention it receives
//! times the L1 norm of its value deviation, and recomputes the top fraction.
//! During decoding the same rule is re-evaluated against the current query so
//! that tokens gaining attention late still get corrected. The baselines
//! (deviation magnitude, leading positions, random, exact attribution) exist
//! for comparison.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deviation::{
    concatenated_l1, layer_v_impact_scores, ratio_budget, residual_after_recompute, PerturbedHead,
    ScoreVector,
};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::attend;

/// Where the value deviation used for scoring comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SelectionMode {
    /// Deviations against a full reference pass, selected per layer.
    Oracle,
    /// Deviations measured at one probe layer, selection shared by all layers.
    Practical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Strategy {
    Dhd,
    Magnitude,
    Positional,
    Random,
    Ideal,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Ideal,
        Strategy::Dhd,
        Strategy::Magnitude,
        Strategy::Positional,
        Strategy::Random,
    ];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Strategy::Dhd => "DHD",
            Strategy::Magnitude => "MAGNITUDE",
            Strategy::Positional => "POSITIONAL",
            Strategy::Random => "RANDOM",
            Strategy::Ideal => "IDEAL",
        };
        f.write_str(s)
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "DHD" => Ok(Strategy::Dhd),
            "MAGNITUDE" => Ok(Strategy::Magnitude),
            "POSITIONAL" => Ok(Strategy::Positional),
            "RANDOM" => Ok(Strategy::Random),
            "IDEAL" => Ok(Strategy::Ideal),
            other => Err(Error::Parameter(format!("unknown strategy {other:?}"))),
        }
    }
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionMode::Oracle => "ORACLE",
            SelectionMode::Practical => "PRACTICAL",
        })
    }
}

impl FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ORACLE" => Ok(SelectionMode::Oracle),
            "PRACTICAL" => Ok(SelectionMode::Practical),
            other => Err(Error::Parameter(format!("unknown selection mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Fraction of reused tokens recomputed during prefill. Zero disables
    /// prefill recomputation.
    pub recompute_ratio: f64,
    /// Extra tokens recomputed per decode step.
    pub decode_extra: usize,
    pub mode: SelectionMode,
    pub strategy: Strategy,
    /// Seed for [`Strategy::Random`].
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            recompute_ratio: 0.2,
            decode_extra: 3,
            mode: SelectionMode::Practical,
            strategy: Strategy::Dhd,
            seed: 0,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.recompute_ratio) {
            return Err(Error::Parameter(format!(
                "recompute ratio {} must lie in [0, 1]",
                self.recompute_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    /// Selected positions, ascending.
    pub indices: Vec<usize>,
    pub scores: ScoreVector,
}

/// Everything a strategy may look at for one layer.
#[derive(Debug, Clone)]
pub struct SelectionInputs {
    pub heads: Vec<PerturbedHead>,
    /// Reused positions, ascending.
    pub reused: Vec<usize>,
    /// Matched spans; when empty, contiguous runs of `reused` are used.
    pub spans: Vec<Range<usize>>,
    pub causal: bool,
    /// Score attention with the cached (perturbed) keys instead of the
    /// reference keys.
    pub perturbed_keys: bool,
}

impl SelectionInputs {
    pub fn num_tokens(&self) -> usize {
        self.heads.first().map_or(0, PerturbedHead::num_tokens)
    }

    fn scoring_keys(&self) -> Vec<Matrix> {
        self.heads
            .iter()
            .map(|h| if self.perturbed_keys { h.perturbed_k() } else { h.k.clone() })
            .collect()
    }

    fn effective_spans(&self) -> Vec<Range<usize>> {
        if !self.spans.is_empty() {
            return self.spans.clone();
        }
        let mut spans: Vec<Range<usize>> = Vec::new();
        for &p in &self.reused {
            match spans.last_mut() {
                Some(s) if s.end == p => s.end = p + 1,
                _ => spans.push(p..p + 1),
            }
        }
        spans
    }

    /// Exact post-recompute `‖ΔH‖_F` at this layer.
    pub fn residual(&self, recomputed: &[usize]) -> Result<f64> {
        let set: BTreeSet<usize> = recomputed.iter().copied().collect();
        residual_after_recompute(&self.heads, &set, self.causal)
    }
}

fn ensure_reused(reused: &[usize]) -> Result<()> {
    if reused.is_empty() {
        Err(Error::Parameter("no reused positions to select from".into()))
    } else {
        Ok(())
    }
}

/// Prefill selection: top `⌈r·|reused|⌉` reused positions by V-impact score.
pub fn select_prefill(
    queries: &[Matrix],
    keys: &[Matrix],
    delta_v: &[Matrix],
    reused: &[usize],
    causal: bool,
    config: &SelectionConfig,
) -> Result<SelectionResult> {
    ensure_reused(reused)?;
    config.validate()?;
    let scores = layer_v_impact_scores(queries, keys, delta_v, causal)?;
    if let Some(&p) = reused.iter().find(|&&p| p >= scores.len()) {
        return Err(Error::Input(format!("reused position {p} out of range")));
    }
    let k = ratio_budget(config.recompute_ratio, reused.len());
    Ok(SelectionResult {
        indices: scores.top_k(reused, k),
        scores,
    })
}

/// Decode-step selection against the current query row of each head.
///
/// `query_rows[h]` is `1 × d_k`; `keys[h]` holds every cached row the decode
/// token attends to. Per-head softmax weights are averaged before being
/// multiplied by the token's concatenated-head `‖ΔV_i‖₁`.
pub fn select_decode_step(
    query_rows: &[Matrix],
    keys: &[Matrix],
    delta_v: &[Matrix],
    eligible: &[usize],
    n_extra: usize,
) -> Result<SelectionResult> {
    if query_rows.len() != keys.len() || keys.is_empty() {
        return Err(Error::Shape("one query row and key matrix per head required".into()));
    }
    let n = keys[0].nrows();
    if eligible.is_empty() || n_extra == 0 {
        return Ok(SelectionResult {
            indices: Vec::new(),
            scores: ScoreVector::zeros(n),
        });
    }
    let mut weights = vec![0.0; n];
    for (q, k) in query_rows.iter().zip(keys) {
        if q.nrows() != 1 || q.ncols() != k.ncols() || k.nrows() != n {
            return Err(Error::Shape(format!(
                "decode query {:?} against keys {:?}",
                q.dim(),
                k.dim()
            )));
        }
        let empty = Matrix::zeros((n, 0));
        let (_, a) = attend(q, k, &empty, None);
        for (w, x) in weights.iter_mut().zip(a.row(0)) {
            *w += x;
        }
    }
    let covered = delta_v.first().map_or(0, |m| m.nrows());
    let norms = concatenated_l1(delta_v, covered)?;
    let heads = query_rows.len() as f64;
    let scores: Vec<f64> = (0..n)
        .map(|i| if i < covered { weights[i] / heads * norms[i] } else { 0.0 })
        .collect();
    if let Some(&p) = eligible.iter().find(|&&p| p >= covered) {
        return Err(Error::Input(format!("eligible position {p} has no deviation row")));
    }
    let scores = ScoreVector::new(scores)?;
    Ok(SelectionResult {
        indices: scores.top_k(eligible, n_extra.min(eligible.len())),
        scores,
    })
}

/// Any strategy over a layer's inputs with budget `⌈r·|reused|⌉`.
pub fn select(strategy: Strategy, inputs: &SelectionInputs, r: f64, seed: u64) -> Result<SelectionResult> {
    ensure_reused(&inputs.reused)?;
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Parameter(format!("recompute ratio {r} must lie in [0, 1]")));
    }
    let n = inputs.num_tokens();
    let budget = ratio_budget(r, inputs.reused.len());
    match strategy {
        Strategy::Dhd => {
            let queries: Vec<Matrix> = inputs.heads.iter().map(|h| h.q.clone()).collect();
            let delta_v: Vec<Matrix> = inputs.heads.iter().map(|h| h.delta_v.clone()).collect();
            let config = SelectionConfig {
                recompute_ratio: r,
                ..SelectionConfig::default()
            };
            select_prefill(
                &queries,
                &inputs.scoring_keys(),
                &delta_v,
                &inputs.reused,
                inputs.causal,
                &config,
            )
        }
        Strategy::Magnitude => {
            let dv: Vec<Matrix> = inputs.heads.iter().map(|h| h.delta_v.clone()).collect();
            let dk: Vec<Matrix> = inputs.heads.iter().map(|h| h.delta_k.clone()).collect();
            let scores: Vec<f64> = concatenated_l1(&dv, n)?
                .into_iter()
                .zip(concatenated_l1(&dk, n)?)
                .map(|(a, b)| a + b)
                .collect();
            let scores = ScoreVector::new(scores)?;
            Ok(SelectionResult {
                indices: scores.top_k(&inputs.reused, budget),
                scores,
            })
        }
        Strategy::Positional => {
            let reused: BTreeSet<usize> = inputs.reused.iter().copied().collect();
            let mut picked = Vec::with_capacity(budget);
            for span in inputs.effective_spans() {
                let members: Vec<usize> = span.filter(|p| reused.contains(p)).collect();
                let quota = ratio_budget(r, members.len());
                picked.extend(members.into_iter().take(quota));
            }
            picked.truncate(budget);
            picked.sort_unstable();
            Ok(SelectionResult {
                indices: picked,
                scores: ScoreVector::zeros(n),
            })
        }
        Strategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, inputs.reused.len(), budget)
                .into_iter()
                .map(|i| inputs.reused[i])
                .collect();
            picked.sort_unstable();
            Ok(SelectionResult {
                indices: picked,
                scores: ScoreVector::zeros(n),
            })
        }
        Strategy::Ideal => {
            let scores = ideal_scores(inputs)?;
            Ok(SelectionResult {
                indices: scores.top_k(&inputs.reused, budget),
                scores,
            })
        }
    }
}

/// Baseline strategies only; DHD goes through [`select_prefill`].
pub fn select_baseline(strategy: Strategy, inputs: &SelectionInputs, r: f64, seed: u64) -> Result<SelectionResult> {
    if strategy == Strategy::Dhd {
        return Err(Error::Parameter("DHD is not a baseline strategy".into()));
    }
    select(strategy, inputs, r, seed)
}

/// Exact reduction of the layer's `‖ΔH‖_F` obtained by recomputing each
/// reused token on its own.
pub fn ideal_scores(inputs: &SelectionInputs) -> Result<ScoreVector> {
    let base = inputs.residual(&[])?;
    let mut scores = vec![0.0; inputs.num_tokens()];
    for &i in &inputs.reused {
        scores[i] = base - inputs.residual(&[i])?;
    }
    // Reductions can be negative; shift so the vector stays non-negative
    // without changing the ranking.
    let min = scores.iter().copied().fold(0.0, f64::min);
    ScoreVector::new(scores.into_iter().map(|s| s - min).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::Rng;

    fn uniform_inputs(dv_l1: &[f64]) -> (Vec<Matrix>, Vec<Matrix>, Vec<Matrix>) {
        let n = dv_l1.len();
        let q = Array2::zeros((n, 1));
        let k = Array2::from_shape_fn((n, 1), |(i, _)| i as f64);
        let dv = Array2::from_shape_fn((n, 1), |(i, _)| dv_l1[i]);
        (vec![q], vec![k], vec![dv])
    }

    fn random_inputs(seed: u64, n: usize, heads: usize) -> SelectionInputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = |scale: f64| Array2::from_shape_fn((n, 4), |_| rng.gen_range(-1.0..1.0) * scale);
        let heads = (0..heads)
            .map(|_| {
                let (q, k, v) = (m(1.5), m(1.5), m(1.0));
                let (mut dk, mut dv) = (m(0.3), m(0.3));
                dk.row_mut(0).fill(0.0);
                dv.row_mut(0).fill(0.0);
                PerturbedHead { q, k, v, delta_k: dk, delta_v: dv }
            })
            .collect();
        SelectionInputs {
            heads,
            reused: (1..n).collect(),
            spans: vec![],
            causal: true,
            perturbed_keys: false,
        }
    }

    #[test]
    fn prefill_picks_highest_score_under_uniform_attention() {
        let (q, k, dv) = uniform_inputs(&[0.5, 0.2, 0.9]);
        let cfg = SelectionConfig {
            recompute_ratio: 1.0 / 3.0,
            ..SelectionConfig::default()
        };
        let r = select_prefill(&q, &k, &dv, &[0, 1, 2], false, &cfg).unwrap();
        assert_eq!(r.indices, vec![2]);
    }

    #[test]
    fn prefill_ties_go_to_lower_indices() {
        let (q, k, dv) = uniform_inputs(&[0.0, 0.0, 0.0, 0.0]);
        let cfg = SelectionConfig {
            recompute_ratio: 0.5,
            ..SelectionConfig::default()
        };
        let r = select_prefill(&q, &k, &dv, &[0, 1, 2, 3], false, &cfg).unwrap();
        assert_eq!(r.indices, vec![0, 1]);
        let full = SelectionConfig {
            recompute_ratio: 1.0,
            ..cfg
        };
        assert_eq!(
            select_prefill(&q, &k, &dv, &[1, 3], false, &full).unwrap().indices,
            vec![1, 3]
        );
        assert!(select_prefill(&q, &k, &dv, &[], false, &full).is_err());
    }

    #[test]
    fn decode_step_edge_cases() {
        let q = vec![array![[0.0, 0.0]]];
        let k = vec![Array2::zeros((4, 2))];
        let dv = vec![Array2::ones((4, 2))];
        assert!(select_decode_step(&q, &k, &dv, &[], 3).unwrap().indices.is_empty());
        assert_eq!(
            select_decode_step(&q, &k, &dv, &[1, 3], 5).unwrap().indices,
            vec![1, 3]
        );
    }

    #[test]
    fn decode_step_follows_concentrated_attention() {
        let n = 8;
        let mut k = Array2::zeros((n, 2));
        k[[5, 0]] = 40.0;
        let q = vec![array![[1.0, 0.0]]];
        let dv = vec![Array2::ones((n, 2))];
        let eligible: Vec<usize> = (0..n).collect();
        let r = select_decode_step(&q, &[k.clone()], &dv, &eligible, 1).unwrap();
        assert_eq!(r.indices, vec![5]);
        // Oracle: softmax weight of token 5 with logits 40/√2 vs 0.
        let l = 40.0 / 2f64.sqrt();
        let w5 = l.exp() / (l.exp() + (n - 1) as f64);
        assert!((r.scores.as_slice()[5] - w5 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn magnitude_ignores_attention() {
        // Attention piles onto token 3 while deviations are uniform.
        let n = 6;
        let q = Array2::from_elem((n, 2), 1.0);
        let mut k = Array2::zeros((n, 2));
        k.row_mut(3).fill(10.0);
        let mut dv = Array2::from_elem((n, 2), 0.1);
        dv[[0, 0]] = 0.11;
        let head = PerturbedHead {
            q,
            k,
            v: Array2::zeros((n, 2)),
            delta_k: Array2::zeros((n, 2)),
            delta_v: dv,
        };
        let inputs = SelectionInputs {
            heads: vec![head],
            reused: (0..n).collect(),
            spans: vec![],
            causal: false,
            perturbed_keys: false,
        };
        let dhd = select(Strategy::Dhd, &inputs, 0.1, 0).unwrap();
        let mag = select(Strategy::Magnitude, &inputs, 0.1, 0).unwrap();
        assert_eq!(dhd.indices, vec![3]);
        assert_eq!(mag.indices, vec![0]);
    }

    #[test]
    fn random_is_reproducible() {
        let inputs = random_inputs(3, 12, 2);
        let a = select(Strategy::Random, &inputs, 0.3, 99).unwrap();
        let b = select(Strategy::Random, &inputs, 0.3, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.indices.len(), 4);
    }

    #[test]
    fn positional_takes_span_heads() {
        let mut inputs = random_inputs(4, 12, 1);
        inputs.reused = vec![2, 3, 4, 5, 8, 9, 10, 11];
        inputs.spans = vec![2..6, 8..12];
        let r = select(Strategy::Positional, &inputs, 0.25, 0).unwrap();
        assert_eq!(r.indices, vec![2, 8]);
    }

    #[test]
    fn ideal_matches_exhaustive_single_token_recompute() {
        let inputs = random_inputs(5, 6, 2);
        let r = select(Strategy::Ideal, &inputs, 0.4, 0).unwrap();
        // Brute force: residual after recomputing each single token.
        let mut residuals: Vec<(f64, usize)> = inputs
            .reused
            .iter()
            .map(|&i| {
                let mut heads = inputs.heads.clone();
                for h in &mut heads {
                    h.delta_k.row_mut(i).fill(0.0);
                    h.delta_v.row_mut(i).fill(0.0);
                }
                let mut total = 0.0;
                for h in &heads {
                    let (h0, _) = attend(&h.q, &h.k, &h.v, Some(0));
                    let (h1, _) = attend(&h.q, &(&h.k + &h.delta_k), &(&h.v + &h.delta_v), Some(0));
                    total += (h1 - h0).iter().map(|x| x * x).sum::<f64>();
                }
                (total.sqrt(), i)
            })
            .collect();
        residuals.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut expected: Vec<usize> = residuals.iter().take(2).map(|x| x.1).collect();
        expected.sort_unstable();
        assert_eq!(r.indices, expected);
    }

    #[test]
    fn unknown_strategy_is_rejected() {
        assert!("EPIC".parse::<Strategy>().is_err());
        assert_eq!("dhd".parse::<Strategy>().unwrap(), Strategy::Dhd);
        assert!(select_baseline(Strategy::Dhd, &random_inputs(1, 4, 1), 0.5, 0).is_err());
    }

    mod props {
        use super::*;
        use proptest::{prop_assert, prop_assert_eq, proptest};

        proptest! {
            #[test]
            fn budget_is_exact(seed in 0u64..500, n in 2usize..20, r in 0.01f64..=1.0) {
                let inputs = random_inputs(seed, n, 2);
                let expected = ratio_budget(r, inputs.reused.len());
                prop_assert_eq!(expected, ((r * inputs.reused.len() as f64 - 1e-9).ceil() as usize).min(inputs.reused.len()));
                for s in Strategy::ALL {
                    let sel = select(s, &inputs, r, seed).unwrap();
                    prop_assert_eq!(sel.indices.len(), expected);
                    prop_assert!(sel.indices.iter().all(|i| inputs.reused.contains(i)));
                }
            }

            #[test]
            fn dhd_selection_is_scale_invariant(seed in 0u64..500, c in 0.01f64..100.0) {
                let inputs = random_inputs(seed, 10, 2);
                let mut scaled = inputs.clone();
                for h in &mut scaled.heads {
                    h.delta_v *= c;
                }
                let a = select(Strategy::Dhd, &inputs, 0.3, 0).unwrap();
                let b = select(Strategy::Dhd, &scaled, 0.3, 0).unwrap();
                prop_assert_eq!(a.indices, b.indices);
            }
        }
    }
}
