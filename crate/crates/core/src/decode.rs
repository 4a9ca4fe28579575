//! Token-by-token decoding over a KV cache, with optional per-step
//! recomputation of stale reused rows.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::linalg::{head_slice, matmul, Matrix};
use crate::model::{attend, LayerStates, TokenId, ToyModel};
use crate::selector::select_decode_step;

/// State for recomputing reused rows while decoding.
#[derive(Debug, Clone)]
pub struct DecodeCorrection {
    /// Layer whose query row drives the per-step selection.
    pub probe_layer: usize,
    /// Per-head value deviation at the probe layer, one row per prompt token.
    pub delta_v: Vec<Matrix>,
    /// Reused positions not yet recomputed.
    pub eligible: BTreeSet<usize>,
    pub n_extra: usize,
    /// `[layer][head]` K/V to write when a position is recomputed.
    pub fresh_keys: Vec<Vec<Matrix>>,
    pub fresh_values: Vec<Vec<Matrix>>,
}

impl DecodeCorrection {
    /// Recompute values come from projecting each layer's prompt inputs as
    /// they were during the (possibly perturbed) prefill.
    pub fn from_prefill(
        model: &ToyModel,
        prefill: &LayerStates,
        probe_layer: usize,
        delta_v: Vec<Matrix>,
        eligible: BTreeSet<usize>,
        n_extra: usize,
    ) -> Self {
        let d_k = model.config().d_k();
        let heads = model.config().num_heads;
        let mut fresh_keys = Vec::with_capacity(prefill.layers.len());
        let mut fresh_values = Vec::with_capacity(prefill.layers.len());
        for (l, layer) in prefill.layers.iter().enumerate() {
            let w = model.layer_weights(l);
            let kf = matmul(layer.input.view(), w.w_k.view());
            let vf = matmul(layer.input.view(), w.w_v.view());
            fresh_keys.push((0..heads).map(|h| head_slice(&kf, h, d_k)).collect());
            fresh_values.push((0..heads).map(|h| head_slice(&vf, h, d_k)).collect());
        }
        Self {
            probe_layer,
            delta_v,
            eligible,
            n_extra,
            fresh_keys,
            fresh_values,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Final-layer hidden row of the decoded token.
    pub hidden: Array1<f64>,
    /// Positions recomputed during this step.
    pub recomputed: Vec<usize>,
}

pub struct DecodeSession<'m> {
    model: &'m ToyModel,
    keys: Vec<Vec<Matrix>>,
    values: Vec<Vec<Matrix>>,
    correction: Option<DecodeCorrection>,
}

impl<'m> DecodeSession<'m> {
    /// Starts from the K/V that a prefill pass left in its states.
    pub fn from_prefill(model: &'m ToyModel, prefill: &LayerStates) -> Self {
        let keys = prefill
            .layers
            .iter()
            .map(|l| l.heads.iter().map(|h| h.k.clone()).collect())
            .collect();
        let values = prefill
            .layers
            .iter()
            .map(|l| l.heads.iter().map(|h| h.v.clone()).collect())
            .collect();
        Self {
            model,
            keys,
            values,
            correction: None,
        }
    }

    pub fn with_correction(mut self, correction: DecodeCorrection) -> Result<Self> {
        if correction.probe_layer >= self.keys.len() {
            return Err(Error::Parameter(format!(
                "probe layer {} out of range",
                correction.probe_layer
            )));
        }
        self.correction = Some(correction);
        Ok(self)
    }

    pub fn context_len(&self) -> usize {
        self.keys[0][0].nrows()
    }

    pub fn remaining_eligible(&self) -> usize {
        self.correction.as_ref().map_or(0, |c| c.eligible.len())
    }

    fn recompute_rows(&mut self, positions: &[usize]) {
        let Some(c) = &self.correction else { return };
        for (l, (lk, lv)) in self.keys.iter_mut().zip(self.values.iter_mut()).enumerate() {
            for (h, (k, v)) in lk.iter_mut().zip(lv.iter_mut()).enumerate() {
                for &i in positions {
                    k.row_mut(i).assign(&c.fresh_keys[l][h].row(i));
                    v.row_mut(i).assign(&c.fresh_values[l][h].row(i));
                }
            }
        }
    }

    /// Feeds one token through every layer, appending its K/V.
    pub fn step(&mut self, token: TokenId) -> Result<StepOutput> {
        let mut x = self.model.embed(&[token])?;
        let mut recomputed = Vec::new();
        for l in 0..self.keys.len() {
            let (qs, ks, vs) = self.model.project_heads(l, &x);
            for (h, (k, v)) in ks.iter().zip(&vs).enumerate() {
                self.keys[l][h].push_row(k.row(0)).expect("row width");
                self.values[l][h].push_row(v.row(0)).expect("row width");
            }
            if let Some(c) = &self.correction {
                if l == c.probe_layer && !c.eligible.is_empty() && c.n_extra > 0 {
                    let eligible: Vec<usize> = c.eligible.iter().copied().collect();
                    let sel = select_decode_step(&qs, &self.keys[l], &c.delta_v, &eligible, c.n_extra)?;
                    self.recompute_rows(&sel.indices);
                    if let Some(c) = &mut self.correction {
                        for i in &sel.indices {
                            c.eligible.remove(i);
                        }
                    }
                    recomputed = sel.indices;
                }
            }
            let outs: Vec<Matrix> = qs
                .iter()
                .enumerate()
                .map(|(h, q)| attend(q, &self.keys[l][h], &self.values[l][h], None).0)
                .collect();
            x = self.model.residual_output(l, &x, &outs);
        }
        Ok(StepOutput {
            hidden: x.index_axis(Axis(0), 0).to_owned(),
            recomputed,
        })
    }
}

/// Greedy next token under tied embeddings: `argmax_t ⟨hidden, E_t⟩`,
/// ties to the lower id.
pub fn greedy_token(model: &ToyModel, hidden: &Array1<f64>) -> TokenId {
    let logits = model.embedding().dot(hidden);
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Reference continuation: greedy tokens from a full-recompute prefill.
pub fn greedy_continuation(model: &ToyModel, reference: &LayerStates, steps: usize) -> Result<Vec<TokenId>> {
    let last = reference.final_output().nrows().checked_sub(1).ok_or_else(|| {
        Error::Input("cannot decode after an empty prompt".into())
    })?;
    let mut next = greedy_token(model, &reference.final_output().row(last).to_owned());
    let mut session = DecodeSession::from_prefill(model, reference);
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        out.push(next);
        let step = session.step(next)?;
        next = greedy_token(model, &step.hidden);
    }
    Ok(out)
}

/// Per-step `‖h′_t − h_t‖₂` of a session against a reference session fed the
/// same tokens.
pub fn step_deviations(
    reference: &mut DecodeSession<'_>,
    perturbed: &mut DecodeSession<'_>,
    tokens: &[TokenId],
) -> Result<Vec<f64>> {
    tokens
        .iter()
        .map(|&t| {
            let a = reference.step(t)?;
            let b = perturbed.step(t)?;
            Ok((&b.hidden - &a.hidden).mapv(|x| x * x).sum().sqrt())
        })
        .collect()
}

/// Zero-row padding helper for tests and callers with partial deviations.
pub fn zero_deviation(n: usize, d_k: usize, heads: usize) -> Vec<Matrix> {
    vec![Array2::zeros((n, d_k)); heads]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, model_forward, ModelConfig};

    fn model() -> ToyModel {
        init_model(ModelConfig {
            num_layers: 3,
            num_heads: 2,
            d_model: 16,
            vocab_size: 50,
            seed: 21,
            causal: true,
        })
        .unwrap()
    }

    #[test]
    fn decoding_matches_a_full_forward_of_the_extended_sequence() {
        let m = model();
        let prompt = [3, 1, 4, 1, 5];
        let prefill = model_forward(&prompt, &m).unwrap();
        let mut session = DecodeSession::from_prefill(&m, &prefill);
        let out = session.step(9).unwrap();
        let full = model_forward(&[3, 1, 4, 1, 5, 9], &m).unwrap();
        let expected = full.final_output().row(5).to_owned();
        for (a, b) in out.hidden.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(session.context_len(), 6);
    }

    #[test]
    fn identical_sessions_have_zero_deviation() {
        let m = model();
        let prefill = model_forward(&[7, 8, 9], &m).unwrap();
        let tokens = greedy_continuation(&m, &prefill, 5).unwrap();
        assert_eq!(tokens.len(), 5);
        let mut a = DecodeSession::from_prefill(&m, &prefill);
        let mut b = DecodeSession::from_prefill(&m, &prefill);
        let d = step_deviations(&mut a, &mut b, &tokens).unwrap();
        assert!(d.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn correction_drains_eligible_positions() {
        let m = model();
        let prefill = model_forward(&[7, 8, 9, 10], &m).unwrap();
        let mut dv = zero_deviation(4, 8, 2);
        for h in &mut dv {
            h.fill(0.5);
        }
        let c = DecodeCorrection::from_prefill(&m, &prefill, 1, dv, [1, 2, 3].into_iter().collect(), 2);
        let mut s = DecodeSession::from_prefill(&m, &prefill).with_correction(c).unwrap();
        assert_eq!(s.step(1).unwrap().recomputed.len(), 2);
        assert_eq!(s.step(2).unwrap().recomputed.len(), 1);
        assert!(s.step(3).unwrap().recomputed.is_empty());
        assert_eq!(s.remaining_eligible(), 0);
    }
}
