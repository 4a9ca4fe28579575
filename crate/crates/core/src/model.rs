//! Seeded toy transformer: attention-only layers with residual connections.
//!
//! There is no positional encoding, so the K/V rows of a token at the first
//! layer depend only on its embedding. From the second layer on they depend on
//! the whole visible prefix, which is where reused KV goes stale.

use std::collections::BTreeSet;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deviation::PerturbedHead;
use crate::error::{Error, Result};
use crate::linalg::{self, concat_heads, ensure_finite, head_slice, matmul, Matrix};
use crate::reuse::ReuseMap;

pub type TokenId = u32;

/// Embedding entries are drawn uniformly from `[-EMBEDDING_SCALE, EMBEDDING_SCALE]`.
///
/// Large enough that attention logits spread over a few units, so attention
/// is content-dependent rather than nearly uniform.
pub const EMBEDDING_SCALE: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub seed: u64,
    pub causal: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            d_model: 64,
            vocab_size: 4096,
            seed: 0,
            causal: true,
        }
    }
}

impl ModelConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.num_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.d_model == 0 || self.vocab_size == 0
        {
            return Err(Error::Config(
                "num_layers, num_heads, d_model and vocab_size must be positive".into(),
            ));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    config: ModelConfig,
    embedding: Matrix,
    layers: Vec<LayerWeights>,
}

/// Q/K/V, attention weights and output of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadState {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub a: Matrix,
    pub h: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    /// Hidden sequence entering the layer.
    pub input: Matrix,
    pub heads: Vec<HeadState>,
    /// `input + concat(H) · W_o`, the input of the next layer.
    pub output: Matrix,
}

impl LayerState {
    /// Concatenated per-head attention outputs.
    pub fn attention_output(&self) -> Matrix {
        let hs: Vec<Matrix> = self.heads.iter().map(|h| h.h.clone()).collect();
        concat_heads(&hs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStates {
    pub layers: Vec<LayerState>,
}

impl LayerStates {
    pub fn num_tokens(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input.nrows())
    }

    pub fn final_output(&self) -> &Matrix {
        &self.layers.last().expect("at least one layer").output
    }
}

/// Which reused positions get fresh K/V at each layer.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecomputePlan {
    per_layer: Vec<BTreeSet<usize>>,
}

impl RecomputePlan {
    pub fn none() -> Self {
        Self::default()
    }

    /// The same positions at every one of `num_layers` layers.
    pub fn uniform(num_layers: usize, positions: impl IntoIterator<Item = usize>) -> Self {
        let set: BTreeSet<usize> = positions.into_iter().collect();
        Self {
            per_layer: vec![set; num_layers],
        }
    }

    pub fn per_layer(sets: Vec<BTreeSet<usize>>) -> Self {
        Self { per_layer: sets }
    }

    pub fn contains(&self, layer: usize, position: usize) -> bool {
        self.per_layer
            .get(layer)
            .is_some_and(|s| s.contains(&position))
    }

    pub fn layer(&self, layer: usize) -> Option<&BTreeSet<usize>> {
        self.per_layer.get(layer)
    }

    pub fn num_layers(&self) -> usize {
        self.per_layer.len()
    }
}

fn seeded_uniform(seed: u64, stream: u64, rows: usize, cols: usize, scale: f64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..=1.0) * scale)
}

/// Builds the model. Identical configs give bit-identical weights.
pub fn init_model(config: ModelConfig) -> Result<ToyModel> {
    config.validate()?;
    let d = config.d_model;
    let scale = 1.0 / (d as f64).sqrt();
    let embedding = seeded_uniform(config.seed, 0, config.vocab_size, d, EMBEDDING_SCALE);
    let layers = (0..config.num_layers as u64)
        .map(|l| {
            let base = 1 + 4 * l;
            LayerWeights {
                w_q: seeded_uniform(config.seed, base, d, d, scale),
                w_k: seeded_uniform(config.seed, base + 1, d, d, scale),
                w_v: seeded_uniform(config.seed, base + 2, d, d, scale),
                w_o: seeded_uniform(config.seed, base + 3, d, d, scale),
            }
        })
        .collect();
    Ok(ToyModel {
        config,
        embedding,
        layers,
    })
}

/// Softmax attention for `q` rows against `k`/`v` rows.
///
/// With `causal_offset = Some(o)`, query row `j` sees keys `0..=o + j`.
/// Returns `(H, A)`; masked entries of `A` are exactly zero.
pub(crate) fn attend(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    causal_offset: Option<usize>,
) -> (Matrix, Matrix) {
    let (n_q, d_k) = q.dim();
    let n_k = k.nrows();
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut a = Array2::zeros((n_q, n_k));
    let mut h = Array2::zeros((n_q, v.ncols()));
    let d_v = v.ncols();
    let k = k.as_standard_layout();
    let v = v.as_standard_layout();
    let k_rows = k.as_slice().expect("standard layout");
    let v_rows = v.as_slice().expect("standard layout");
    for (j, ((q_row, mut a_row), mut h_row)) in q
        .axis_iter(Axis(0))
        .zip(a.axis_iter_mut(Axis(0)))
        .zip(h.axis_iter_mut(Axis(0)))
        .enumerate()
    {
        let limit = causal_offset.map_or(n_k, |o| (o + j + 1).min(n_k));
        let q_row = q_row.to_vec();
        let a_row = a_row.as_slice_mut().expect("fresh array");
        let mut max = f64::NEG_INFINITY;
        for (logit, k_row) in a_row[..limit].iter_mut().zip(k_rows.chunks_exact(d_k.max(1))) {
            *logit = linalg::dot(&q_row, &k_row[..d_k]) * scale;
            max = max.max(*logit);
        }
        let mut sum = 0.0;
        for logit in &mut a_row[..limit] {
            *logit = (*logit - max).exp();
            sum += *logit;
        }
        let h_row = h_row.as_slice_mut().expect("fresh array");
        for w in &mut a_row[..limit] {
            *w /= sum;
        }
        if d_v > 0 {
            for (&w, v_row) in a_row[..limit].iter().zip(v_rows.chunks_exact(d_v)) {
                for (o, &x) in h_row.iter_mut().zip(v_row) {
                    *o += w * x;
                }
            }
        }
    }
    (h, a)
}

/// `A = softmax(QKᵀ/√d_k)` with an optional causal mask and `H = A·V`.
pub fn attention_forward(q: &Matrix, k: &Matrix, v: &Matrix, causal: bool) -> Result<(Matrix, Matrix)> {
    let n = q.nrows();
    if k.nrows() != n || v.nrows() != n {
        return Err(Error::Shape(format!(
            "Q, K, V row counts differ: {}, {}, {}",
            n,
            k.nrows(),
            v.nrows()
        )));
    }
    if k.ncols() != q.ncols() || v.ncols() != q.ncols() {
        return Err(Error::Shape(format!(
            "column counts differ: Q {}, K {}, V {}",
            q.ncols(),
            k.ncols(),
            v.ncols()
        )));
    }
    ensure_finite(q, "Q")?;
    ensure_finite(k, "K")?;
    ensure_finite(v, "V")?;
    Ok(attend(q, k, v, causal.then_some(0)))
}

impl ToyModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layer_weights(&self, layer: usize) -> &LayerWeights {
        &self.layers[layer]
    }

    pub fn embedding(&self) -> &Matrix {
        &self.embedding
    }

    pub(crate) fn causal_offset(&self) -> Option<usize> {
        self.config.causal.then_some(0)
    }

    pub fn embed(&self, tokens: &[TokenId]) -> Result<Matrix> {
        let d = self.config.d_model;
        let mut x = Array2::zeros((tokens.len(), d));
        for (row, &t) in x.axis_iter_mut(Axis(0)).zip(tokens) {
            let t = t as usize;
            if t >= self.config.vocab_size {
                return Err(Error::Input(format!(
                    "token {t} is outside the vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            let mut row = row;
            row.assign(&self.embedding.row(t));
        }
        Ok(x)
    }

    /// Fresh per-head projections of `x` at `layer`.
    pub(crate) fn project_heads(&self, layer: usize, x: &Matrix) -> (Vec<Matrix>, Vec<Matrix>, Vec<Matrix>) {
        let w = &self.layers[layer];
        let d_k = self.config.d_k();
        let qf = matmul(x.view(), w.w_q.view());
        let kf = matmul(x.view(), w.w_k.view());
        let vf = matmul(x.view(), w.w_v.view());
        let split = |m: &Matrix| -> Vec<Matrix> {
            (0..self.config.num_heads).map(|h| head_slice(m, h, d_k)).collect()
        };
        (split(&qf), split(&kf), split(&vf))
    }

    /// `x + concat(heads) · W_o`.
    pub(crate) fn residual_output(&self, layer: usize, x: &Matrix, heads: &[Matrix]) -> Matrix {
        let concat = concat_heads(heads);
        x + &matmul(concat.view(), self.layers[layer].w_o.view())
    }

    fn run_layer(
        &self,
        layer: usize,
        input: Matrix,
        patch: impl Fn(usize, &mut Matrix, &mut Matrix),
    ) -> LayerState {
        let (qs, mut ks, mut vs) = self.project_heads(layer, &input);
        let mut heads = Vec::with_capacity(qs.len());
        for (h, q) in qs.into_iter().enumerate() {
            patch(h, &mut ks[h], &mut vs[h]);
            let (out, a) = attend(&q, &ks[h], &vs[h], self.causal_offset());
            heads.push(HeadState {
                q,
                k: ks[h].clone(),
                v: vs[h].clone(),
                a,
                h: out,
            });
        }
        let outs: Vec<Matrix> = heads.iter().map(|s| s.h.clone()).collect();
        let output = self.residual_output(layer, &input, &outs);
        LayerState {
            input,
            heads,
            output,
        }
    }
}

/// Full forward pass; every K/V row computed from the current context.
pub fn model_forward(tokens: &[TokenId], model: &ToyModel) -> Result<LayerStates> {
    let mut x = model.embed(tokens)?;
    let mut layers = Vec::with_capacity(model.config.num_layers);
    for l in 0..model.config.num_layers {
        let state = model.run_layer(l, x, |_, _, _| {});
        x = state.output.clone();
        layers.push(state);
    }
    Ok(LayerStates { layers })
}

fn validate_reuse(tokens: &[TokenId], model: &ToyModel, reuse: &ReuseMap) -> Result<()> {
    if reuse.len() != tokens.len() {
        return Err(Error::Input(format!(
            "reuse map covers {} positions but the request has {} tokens",
            reuse.len(),
            tokens.len()
        )));
    }
    let cfg = &model.config;
    for src in reuse.sources() {
        let kv = &src.kv;
        if kv.num_layers() != cfg.num_layers || kv.num_heads() != cfg.num_heads || kv.d_k() != cfg.d_k()
        {
            return Err(Error::Cache(format!(
                "cached entry {} has shape {}x{}x{}, model expects {}x{}x{}",
                src.request_id,
                kv.num_layers(),
                kv.num_heads(),
                kv.d_k(),
                cfg.num_layers,
                cfg.num_heads,
                cfg.d_k()
            )));
        }
    }
    for (target, slot) in reuse.iter() {
        let src = reuse.source(slot.source);
        if slot.position >= src.kv.len() {
            return Err(Error::Input(format!(
                "reuse position {} is outside cached entry {} of length {}",
                slot.position,
                src.request_id,
                src.kv.len()
            )));
        }
        if src.kv.tokens()[slot.position] != tokens[target] {
            return Err(Error::Cache(format!(
                "cached token at {}:{} does not match request token at {target}",
                src.request_id, slot.position
            )));
        }
    }
    Ok(())
}

/// Forward pass where reused, non-recomputed positions take cached K/V.
///
/// Queries are always fresh. With a map built from a prefix-identical cached
/// request and no recomputation the result is bit-identical to
/// [`model_forward`], since both paths share the same kernels.
pub fn model_forward_with_reuse(
    tokens: &[TokenId],
    model: &ToyModel,
    reuse: &ReuseMap,
    recompute: &RecomputePlan,
) -> Result<LayerStates> {
    validate_reuse(tokens, model, reuse)?;
    for l in 0..recompute.num_layers() {
        if let Some(&max) = recompute.layer(l).and_then(|s| s.iter().next_back()) {
            if max >= tokens.len() {
                return Err(Error::Input(format!(
                    "recompute position {max} out of range at layer {l}"
                )));
            }
        }
    }
    let mut x = model.embed(tokens)?;
    let mut layers = Vec::with_capacity(model.config.num_layers);
    for l in 0..model.config.num_layers {
        let state = model.run_layer(l, x, |h, k, v| {
            for (target, slot) in reuse.iter() {
                if recompute.contains(l, target) {
                    continue;
                }
                let kv = &reuse.source(slot.source).kv;
                k.row_mut(target).assign(&kv.keys(l, h).row(slot.position));
                v.row_mut(target).assign(&kv.values(l, h).row(slot.position));
            }
        });
        x = state.output.clone();
        layers.push(state);
    }
    Ok(LayerStates { layers })
}

/// Runs the reuse forward (no recomputation) up to `layer` and measures, at
/// that layer, fresh Q/K/V for every token alongside the cached deviation.
///
/// Rows of the returned deviations are zero for non-reused positions. When all
/// layers below `layer` are deviation-free (as the first layer always is), the
/// fresh values equal those of a full forward pass exactly.
pub fn probe_layer(
    tokens: &[TokenId],
    model: &ToyModel,
    reuse: &ReuseMap,
    layer: usize,
) -> Result<Vec<PerturbedHead>> {
    if layer >= model.config.num_layers {
        return Err(Error::Parameter(format!(
            "probe layer {layer} exceeds model depth {}",
            model.config.num_layers
        )));
    }
    let states = if layer == 0 {
        None
    } else {
        let mut partial = model.clone();
        partial.layers.truncate(layer);
        partial.config.num_layers = layer;
        let trimmed = trim_reuse(reuse, layer)?;
        Some(model_forward_with_reuse(tokens, &partial, &trimmed, &RecomputePlan::none())?)
    };
    let x = match &states {
        Some(s) => s.final_output().clone(),
        None => {
            validate_reuse(tokens, model, reuse)?;
            model.embed(tokens)?
        }
    };
    let (qs, ks, vs) = model.project_heads(layer, &x);
    let heads = qs
        .into_iter()
        .zip(ks)
        .zip(vs)
        .enumerate()
        .map(|(h, ((q, k), v))| {
            let mut delta_k = Array2::zeros(k.dim());
            let mut delta_v = Array2::zeros(v.dim());
            for (target, slot) in reuse.iter() {
                let kv = &reuse.source(slot.source).kv;
                let dk = &kv.keys(layer, h).row(slot.position) - &k.row(target);
                let dv = &kv.values(layer, h).row(slot.position) - &v.row(target);
                delta_k.row_mut(target).assign(&dk);
                delta_v.row_mut(target).assign(&dv);
            }
            PerturbedHead {
                q,
                k,
                v,
                delta_k,
                delta_v,
            }
        })
        .collect();
    Ok(heads)
}

fn trim_reuse(reuse: &ReuseMap, layers: usize) -> Result<ReuseMap> {
    reuse.map_sources(|kv| kv.truncated(layers))
}
