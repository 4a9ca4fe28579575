//! Seeded cross-prefix instances and the studies run on them.
//!
//! An instance caches `[prefix_a, shared]`, then serves `[prefix_b, shared,
//! suffix]` reusing the shared span. Without positional encoding the first
//! layer's reused K/V are exact; deeper layers carry the prefix mismatch.

use std::collections::BTreeSet;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deviation::{delta_h_exact_head, delta_h_first_order, PerturbedHead};
use crate::error::{Error, Result};
use crate::linalg::frobenius;
use crate::model::{init_model, model_forward, LayerStates, ModelConfig, TokenId, ToyModel};
use crate::reuse::{LayerKv, ReuseMap};
use crate::selector::{select, SelectionInputs, Strategy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceShape {
    pub model: ModelConfig,
    pub prefix_len: usize,
    pub shared_len: usize,
    pub suffix_len: usize,
}

impl Default for InstanceShape {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            prefix_len: 8,
            shared_len: 24,
            suffix_len: 8,
        }
    }
}

pub struct CrossPrefixInstance {
    pub model: ToyModel,
    pub cached_tokens: Vec<TokenId>,
    pub tokens: Vec<TokenId>,
    pub cached: Arc<LayerKv>,
    pub reference: LayerStates,
    pub reuse: ReuseMap,
}

fn random_tokens(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<TokenId> {
    (0..n).map(|_| rng.gen_range(0..vocab) as TokenId).collect()
}

impl CrossPrefixInstance {
    pub fn generate(seed: u64, shape: &InstanceShape) -> Result<Self> {
        if shape.shared_len == 0 {
            return Err(Error::Parameter("shared span must be non-empty".into()));
        }
        let model = init_model(ModelConfig {
            seed,
            ..shape.model.clone()
        })?;
        let vocab = shape.model.vocab_size;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x1ab);
        let prefix_a = random_tokens(&mut rng, shape.prefix_len, vocab);
        let prefix_b = random_tokens(&mut rng, shape.prefix_len, vocab);
        let shared = random_tokens(&mut rng, shape.shared_len, vocab);
        let suffix = random_tokens(&mut rng, shape.suffix_len, vocab);
        let cached_tokens: Vec<TokenId> = prefix_a.iter().chain(&shared).copied().collect();
        let tokens: Vec<TokenId> = prefix_b.iter().chain(&shared).chain(&suffix).copied().collect();
        let cached = Arc::new(LayerKv::from_states(&cached_tokens, &model_forward(&cached_tokens, &model)?));
        let reference = model_forward(&tokens, &model)?;
        let mut reuse = ReuseMap::new(tokens.len());
        let src = reuse.add_source("cached", Arc::clone(&cached));
        for p in shape.prefix_len..shape.prefix_len + shape.shared_len {
            reuse.assign(p, src, p)?;
        }
        Ok(Self {
            model,
            cached_tokens,
            tokens,
            cached,
            reference,
            reuse,
        })
    }

    /// Reference Q/K/V at `layer` with the true cached deviation on reused rows.
    pub fn perturbed_heads(&self, layer: usize) -> Vec<PerturbedHead> {
        oracle_heads(&self.reference, &self.reuse, layer)
    }

    pub fn selection_inputs(&self, layer: usize) -> SelectionInputs {
        SelectionInputs {
            heads: self.perturbed_heads(layer),
            reused: self.reuse.reused_positions(),
            spans: self.reuse.spans(),
            causal: self.model.config().causal,
            perturbed_keys: false,
        }
    }
}

/// Per-head deviation of the cached rows in `reuse` against reference states.
pub fn oracle_heads(reference: &LayerStates, reuse: &ReuseMap, layer: usize) -> Vec<PerturbedHead> {
    reference.layers[layer]
        .heads
        .iter()
        .enumerate()
        .map(|(h, s)| {
            let mut delta_k = Array2::zeros(s.k.dim());
            let mut delta_v = Array2::zeros(s.v.dim());
            for (t, slot) in reuse.iter() {
                let kv = &reuse.source(slot.source).kv;
                delta_k
                    .row_mut(t)
                    .assign(&(&kv.keys(layer, h).row(slot.position) - &s.k.row(t)));
                delta_v
                    .row_mut(t)
                    .assign(&(&kv.values(layer, h).row(slot.position) - &s.v.row(t)));
            }
            PerturbedHead {
                q: s.q.clone(),
                k: s.k.clone(),
                v: s.v.clone(),
                delta_k,
                delta_v,
            }
        })
        .collect()
}

/// Residuals of the first-order expansion at successive step sizes.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRow {
    pub seed: u64,
    pub eps: Vec<f64>,
    pub residuals: Vec<f64>,
    /// `residual(eps[i]) / residual(eps[i + 1])`.
    pub ratios: Vec<f64>,
}

impl ConvergenceRow {
    pub fn within(&self, lo: f64, hi: f64) -> bool {
        self.ratios.iter().all(|r| (lo..=hi).contains(r))
    }
}

/// Scales one head's cross-prefix deviation by each `eps` and measures how far
/// the first-order estimate is from the exact deviation.
pub fn convergence_study(seed: u64, shape: &InstanceShape, layer: usize, head: usize, eps: &[f64]) -> Result<ConvergenceRow> {
    let inst = CrossPrefixInstance::generate(seed, shape)?;
    let heads = inst.perturbed_heads(layer);
    let h = heads
        .get(head)
        .ok_or_else(|| Error::Parameter(format!("head {head} out of range")))?;
    let causal = shape.model.causal;
    let residuals = eps
        .iter()
        .map(|&e| {
            let p = h.perturbation().scaled(e);
            let exact = delta_h_exact_head(&h.q, &h.k, &h.v, &p, causal)?;
            let fo = delta_h_first_order(&h.q, &h.k, &h.v, &p, causal)?;
            Ok(frobenius(&(exact - fo)))
        })
        .collect::<Result<Vec<f64>>>()?;
    let ratios = residuals.windows(2).map(|w| w[0] / w[1]).collect();
    Ok(ConvergenceRow {
        seed,
        eps: eps.to_vec(),
        residuals,
        ratios,
    })
}

/// Post-recompute `‖ΔH‖_F` of each strategy on one instance.
#[derive(Debug, Clone, Serialize)]
pub struct StrategyRow {
    pub seed: u64,
    pub before: f64,
    pub after: Vec<(Strategy, f64)>,
}

impl StrategyRow {
    pub fn get(&self, s: Strategy) -> f64 {
        self.after
            .iter()
            .find(|(k, _)| *k == s)
            .map(|(_, v)| *v)
            .expect("strategy evaluated")
    }
}

/// Compares strategies at one layer under the same recompute budget.
pub fn strategy_comparison(seed: u64, shape: &InstanceShape, layer: usize, ratio: f64) -> Result<StrategyRow> {
    let inst = CrossPrefixInstance::generate(seed, shape)?;
    let inputs = inst.selection_inputs(layer);
    let before = inputs.residual(&[])?;
    let after = Strategy::ALL
        .iter()
        .map(|&s| {
            let sel = select(s, &inputs, ratio, seed)?;
            Ok((s, inputs.residual(&sel.indices)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StrategyRow { seed, before, after })
}

/// Top-`r` selections of the deviation-aware rule at every layer, scored with
/// oracle deviations.
pub fn per_layer_selections(inst: &CrossPrefixInstance, ratio: f64) -> Result<Vec<BTreeSet<usize>>> {
    (0..inst.model.config().num_layers)
        .map(|l| {
            let sel = select(Strategy::Dhd, &inst.selection_inputs(l), ratio, 0)?;
            Ok(sel.indices.into_iter().collect())
        })
        .collect()
}

/// Cumulative decode deviation with and without per-step recomputation.
#[derive(Debug, Clone, Serialize)]
pub struct DecodeRow {
    pub seed: u64,
    /// `n_extra` values evaluated, aligned with `cumulative`.
    pub n_extra: Vec<usize>,
    pub cumulative: Vec<f64>,
}

/// Prefill with practical DHD selection at `ratio`, then decode `steps`
/// reference-greedy tokens for each `n_extra` and sum the per-step output
/// deviation.
pub fn decode_study(seed: u64, shape: &InstanceShape, ratio: f64, steps: usize, n_extra: &[usize]) -> Result<DecodeRow> {
    use crate::decode::{greedy_continuation, step_deviations, DecodeCorrection, DecodeSession};
    use crate::model::{model_forward_with_reuse, probe_layer, RecomputePlan};

    let inst = CrossPrefixInstance::generate(seed, shape)?;
    let probe = PROBE_LAYER.min(inst.model.config().num_layers - 1);
    let heads = probe_layer(&inst.tokens, &inst.model, &inst.reuse, probe)?;
    let inputs = SelectionInputs {
        heads,
        reused: inst.reuse.reused_positions(),
        spans: inst.reuse.spans(),
        causal: inst.model.config().causal,
        perturbed_keys: true,
    };
    let sel = select(Strategy::Dhd, &inputs, ratio, seed)?;
    let plan = RecomputePlan::uniform(inst.model.config().num_layers, sel.indices.iter().copied());
    let prefill = model_forward_with_reuse(&inst.tokens, &inst.model, &inst.reuse, &plan)?;
    let tokens = greedy_continuation(&inst.model, &inst.reference, steps)?;
    let chosen: BTreeSet<usize> = sel.indices.iter().copied().collect();
    let eligible: BTreeSet<usize> = inputs.reused.iter().copied().filter(|p| !chosen.contains(p)).collect();
    let delta_v: Vec<_> = inputs.heads.iter().map(|h| h.delta_v.clone()).collect();
    let cumulative = n_extra
        .iter()
        .map(|&extra| {
            let correction = DecodeCorrection::from_prefill(
                &inst.model,
                &prefill,
                probe,
                delta_v.clone(),
                eligible.clone(),
                extra,
            );
            let mut reference = DecodeSession::from_prefill(&inst.model, &inst.reference);
            let mut perturbed = DecodeSession::from_prefill(&inst.model, &prefill).with_correction(correction)?;
            Ok(step_deviations(&mut reference, &mut perturbed, &tokens)?.iter().sum())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(DecodeRow {
        seed,
        n_extra: n_extra.to_vec(),
        cumulative,
    })
}

/// First layer whose inputs depend on context; deviations are measured here
/// in practical mode.
pub const PROBE_LAYER: usize = 1;
