//! Exact and first-order attention-output deviation under K/V perturbation,
//! plus the per-token impact scores derived from the first-order terms.
//!
//! For one head with `A = softmax(QKᵀ/√d_k)` and `H = A·V`:
//!
//! * the V-direction term is `A·ΔV` (the attention matrix is `∂H/∂V`);
//! * the K-direction term applies the softmax differential row by row:
//!   `ds_j = q_j·ΔKᵀ/√d_k`, `dA_j = a_j ⊙ (ds_j − ⟨a_j, ds_j⟩)`, `dH_j = dA_j·V`.

use std::collections::BTreeSet;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::linalg::{self, ensure_same_shape, frobenius, Matrix};
use crate::model::{attend, LayerStates};

/// A head's reference Q/K/V together with the deviation reuse would add.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedHead {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub delta_k: Matrix,
    pub delta_v: Matrix,
}

impl PerturbedHead {
    pub fn perturbation(&self) -> Perturbation {
        Perturbation {
            delta_k: self.delta_k.clone(),
            delta_v: self.delta_v.clone(),
        }
    }

    /// K as seen by a reuse pass: reference K plus the cached deviation.
    pub fn perturbed_k(&self) -> Matrix {
        &self.k + &self.delta_k
    }

    pub fn num_tokens(&self) -> usize {
        self.k.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub delta_k: Matrix,
    pub delta_v: Matrix,
}

impl Perturbation {
    pub fn zeros(n: usize, d_k: usize) -> Self {
        Self {
            delta_k: Array2::zeros((n, d_k)),
            delta_v: Array2::zeros((n, d_k)),
        }
    }

    pub fn scaled(&self, eps: f64) -> Self {
        Self {
            delta_k: &self.delta_k * eps,
            delta_v: &self.delta_v * eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadDeviation {
    pub exact: Matrix,
    pub exact_norm: f64,
    pub first_order: Option<Matrix>,
    pub first_order_norm: Option<f64>,
    /// `‖exact − first_order‖_F`, once a first-order estimate is attached.
    pub residual: Option<f64>,
}

impl HeadDeviation {
    pub fn from_exact(exact: Matrix) -> Self {
        let exact_norm = frobenius(&exact);
        Self {
            exact,
            exact_norm,
            first_order: None,
            first_order_norm: None,
            residual: None,
        }
    }

    pub fn attach_first_order(&mut self, first_order: Matrix) -> Result<()> {
        ensure_same_shape(&self.exact, &first_order, "first-order estimate")?;
        self.residual = Some(frobenius(&(&self.exact - &first_order)));
        self.first_order_norm = Some(frobenius(&first_order));
        self.first_order = Some(first_order);
        Ok(())
    }
}

/// `layers[l][h]` deviation of head `h` at layer `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationReport {
    pub layers: Vec<Vec<HeadDeviation>>,
}

impl DeviationReport {
    /// Frobenius norm of the concatenated-heads deviation at each layer.
    pub fn layer_norms(&self) -> Vec<f64> {
        self.layers
            .iter()
            .map(|heads| heads.iter().map(|h| h.exact_norm.powi(2)).sum::<f64>().sqrt())
            .collect()
    }
}

/// `ΔH = H′ − H` for every layer and head.
pub fn delta_h_exact(states: &LayerStates, perturbed: &LayerStates) -> Result<DeviationReport> {
    if states.layers.len() != perturbed.layers.len() {
        return Err(Error::Shape(format!(
            "layer counts differ: {} vs {}",
            states.layers.len(),
            perturbed.layers.len()
        )));
    }
    let mut layers = Vec::with_capacity(states.layers.len());
    for (a, b) in states.layers.iter().zip(&perturbed.layers) {
        if a.heads.len() != b.heads.len() {
            return Err(Error::Shape("head counts differ".into()));
        }
        let mut heads = Vec::with_capacity(a.heads.len());
        for (ha, hb) in a.heads.iter().zip(&b.heads) {
            ensure_same_shape(&ha.h, &hb.h, "attention outputs")?;
            heads.push(HeadDeviation::from_exact(&hb.h - &ha.h));
        }
        layers.push(heads);
    }
    Ok(DeviationReport { layers })
}

fn check_head(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<()> {
    let n = q.nrows();
    if k.nrows() != n || v.nrows() != n || k.ncols() != q.ncols() {
        return Err(Error::Shape(format!(
            "incompatible Q {:?}, K {:?}, V {:?}",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    Ok(())
}

fn causal_offset(causal: bool) -> Option<usize> {
    causal.then_some(0)
}

/// Number of keys visible to query row `j`.
fn visible(j: usize, n: usize, causal: bool) -> usize {
    if causal {
        (j + 1).min(n)
    } else {
        n
    }
}

/// Attention weights `A` for a head.
pub fn attention_weights(q: &Matrix, k: &Matrix, causal: bool) -> Matrix {
    let v = Array2::zeros((k.nrows(), 0));
    attend(q, k, &v, causal_offset(causal)).1
}

/// `(∂H/∂K)·ΔK` through the analytic softmax differential.
pub fn k_direction_term(q: &Matrix, k: &Matrix, v: &Matrix, delta_k: &Matrix, causal: bool) -> Result<Matrix> {
    check_head(q, k, v)?;
    ensure_same_shape(k, delta_k, "ΔK")?;
    let (_, a) = attend(q, k, v, causal_offset(causal));
    let n = q.nrows();
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut out = Array2::zeros(v.dim());
    let mut ds = vec![0.0; n];
    for j in 0..n {
        let limit = visible(j, n, causal);
        let q_row = q.row(j);
        let q_row = q_row.as_slice().expect("standard layout");
        let mut mean = 0.0;
        for i in 0..limit {
            ds[i] = linalg::dot(q_row, delta_k.row(i).as_slice().expect("standard layout")) * scale;
            mean += a[[j, i]] * ds[i];
        }
        let mut row = out.row_mut(j);
        for i in 0..limit {
            let da = a[[j, i]] * (ds[i] - mean);
            row.scaled_add(da, &v.row(i));
        }
    }
    Ok(out)
}

/// `(∂H/∂V)·ΔV = A·ΔV`.
pub fn v_direction_term(q: &Matrix, k: &Matrix, delta_v: &Matrix, causal: bool) -> Result<Matrix> {
    check_head(q, k, delta_v)?;
    Ok(attend(q, k, delta_v, causal_offset(causal)).0)
}

/// First-order estimate of `ΔH` for one head.
pub fn delta_h_first_order(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    perturbation: &Perturbation,
    causal: bool,
) -> Result<Matrix> {
    ensure_same_shape(v, &perturbation.delta_v, "ΔV")?;
    let kd = k_direction_term(q, k, v, &perturbation.delta_k, causal)?;
    let vd = v_direction_term(q, k, &perturbation.delta_v, causal)?;
    Ok(kd + vd)
}

/// Exact `softmax(Q(K+ΔK)ᵀ/√d_k)(V+ΔV) − softmax(QKᵀ/√d_k)V` for one head.
pub fn delta_h_exact_head(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    perturbation: &Perturbation,
    causal: bool,
) -> Result<Matrix> {
    check_head(q, k, v)?;
    ensure_same_shape(k, &perturbation.delta_k, "ΔK")?;
    ensure_same_shape(v, &perturbation.delta_v, "ΔV")?;
    let (h, _) = attend(q, k, v, causal_offset(causal));
    let (h2, _) = attend(
        q,
        &(k + &perturbation.delta_k),
        &(v + &perturbation.delta_v),
        causal_offset(causal),
    );
    Ok(h2 - h)
}

/// Per-token non-negative scores, one per position.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!("score {bad} is not finite")));
        }
        Ok(Self(scores))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The `k` highest-scoring `candidates`, ties to the lower index,
    /// returned in ascending index order.
    pub fn top_k(&self, candidates: &[usize], k: usize) -> Vec<usize> {
        let mut ranked: Vec<usize> = candidates.to_vec();
        ranked.sort_by(|&a, &b| self.0[b].total_cmp(&self.0[a]).then(a.cmp(&b)));
        ranked.truncate(k);
        ranked.sort_unstable();
        ranked
    }
}

/// Column sums of `A`: total attention each token receives.
pub fn column_sums(a: &Matrix) -> Vec<f64> {
    a.columns().into_iter().map(|c| c.sum()).collect()
}

/// `Score_i = (Σ_j A_{j,i}) · ‖ΔV_i‖₁`.
pub fn v_impact_scores(q: &Matrix, k: &Matrix, delta_v: &Matrix, causal: bool) -> Result<ScoreVector> {
    check_head(q, k, delta_v)?;
    let alpha = column_sums(&attention_weights(q, k, causal));
    let scores = alpha
        .iter()
        .zip(delta_v.rows())
        .map(|(a, row)| a * linalg::l1(row.iter().copied()))
        .collect();
    ScoreVector::new(scores)
}

/// Norm of the K-direction first-order term when only `ΔK_i` is kept.
///
/// Keeping a single row makes `ds_j` one-hot, so row `j` of the term
/// collapses to `a_ji · ds_ji · (V_i − H_j)`.
pub fn k_impact_scores(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    delta_k: &Matrix,
    causal: bool,
) -> Result<ScoreVector> {
    check_head(q, k, v)?;
    ensure_same_shape(k, delta_k, "ΔK")?;
    let (h, a) = attend(q, k, v, causal_offset(causal));
    let n = q.nrows();
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut sq = vec![0.0; n];
    for j in 0..n {
        let q_row = q.row(j);
        let q_row = q_row.as_slice().expect("standard layout");
        for (i, acc) in sq.iter_mut().enumerate().take(visible(j, n, causal)) {
            let ds = linalg::dot(q_row, delta_k.row(i).as_slice().expect("standard layout")) * scale;
            let coef = a[[j, i]] * ds;
            if coef == 0.0 {
                continue;
            }
            let diff: f64 = v
                .row(i)
                .iter()
                .zip(h.row(j).iter())
                .map(|(vi, hj)| (vi - hj).powi(2))
                .sum();
            *acc += coef * coef * diff;
        }
    }
    ScoreVector::new(sq.into_iter().map(f64::sqrt).collect())
}

/// Multi-head V-impact: mean column sum across heads times the L1 norm of the
/// token's concatenated ΔV rows.
pub fn layer_v_impact_scores(
    queries: &[Matrix],
    keys: &[Matrix],
    delta_v: &[Matrix],
    causal: bool,
) -> Result<ScoreVector> {
    if queries.is_empty() || queries.len() != keys.len() || keys.len() != delta_v.len() {
        return Err(Error::Shape("head lists must be non-empty and equally long".into()));
    }
    let n = keys[0].nrows();
    let mut alpha = vec![0.0; n];
    for (q, k) in queries.iter().zip(keys) {
        check_head(q, k, k)?;
        if k.nrows() != n {
            return Err(Error::Shape("heads disagree on token count".into()));
        }
        for (acc, c) in alpha.iter_mut().zip(column_sums(&attention_weights(q, k, causal))) {
            *acc += c;
        }
    }
    let heads = queries.len() as f64;
    let norms = concatenated_l1(delta_v, n)?;
    ScoreVector::new(alpha.iter().zip(norms).map(|(a, d)| a / heads * d).collect())
}

/// Per-token L1 norm over the concatenation of every head's row.
pub fn concatenated_l1(per_head: &[Matrix], n: usize) -> Result<Vec<f64>> {
    let mut norms = vec![0.0; n];
    for m in per_head {
        if m.nrows() < n {
            return Err(Error::Shape(format!("expected at least {n} rows, got {}", m.nrows())));
        }
        for (acc, row) in norms.iter_mut().zip(m.rows()) {
            *acc += linalg::l1(row.iter().copied());
        }
    }
    Ok(norms)
}

/// Multi-head K-impact: Frobenius norm over the concatenated heads.
pub fn layer_k_impact_scores(heads: &[PerturbedHead], causal: bool) -> Result<ScoreVector> {
    let n = heads.first().map_or(0, PerturbedHead::num_tokens);
    let mut sq = vec![0.0; n];
    for h in heads {
        let s = k_impact_scores(&h.q, &h.k, &h.v, &h.delta_k, causal)?;
        for (acc, x) in sq.iter_mut().zip(s.as_slice()) {
            *acc += x * x;
        }
    }
    ScoreVector::new(sq.into_iter().map(f64::sqrt).collect())
}

/// Exact `‖ΔH‖_F` over all heads when positions in `recomputed` carry no
/// deviation and every other position keeps its full `ΔK`, `ΔV`.
pub fn residual_after_recompute(heads: &[PerturbedHead], recomputed: &BTreeSet<usize>, causal: bool) -> Result<f64> {
    let mut total = 0.0;
    for h in heads {
        let mut p = h.perturbation();
        for &i in recomputed {
            if i >= p.delta_k.nrows() {
                return Err(Error::Input(format!("position {i} out of range")));
            }
            p.delta_k.row_mut(i).fill(0.0);
            p.delta_v.row_mut(i).fill(0.0);
        }
        let d = delta_h_exact_head(&h.q, &h.k, &h.v, &p, causal)?;
        total += d.iter().map(|x| x * x).sum::<f64>();
    }
    Ok(total.sqrt())
}

/// Number of entries in a top-`r` set of `n` items: `⌈r·n⌉`, clamped to `n`.
///
/// The product is nudged down by a few ulps first so that e.g. `0.1 × 30`
/// counts as 3 rather than 4.
pub fn ratio_budget(r: f64, n: usize) -> usize {
    let raw = r * n as f64;
    let k = (raw - raw.abs() * 1e-12).ceil();
    (k.max(0.0) as usize).min(n)
}

fn check_ratio(r: f64) -> Result<()> {
    if r.is_nan() || r <= 0.0 || r > 1.0 {
        return Err(Error::Parameter(format!("ratio {r} must lie in (0, 1]")));
    }
    Ok(())
}

/// Jaccard similarity of the top-`⌈r·n⌉` index sets of `a` and `b`.
pub fn impact_overlap(a: &ScoreVector, b: &ScoreVector, r: f64) -> Result<f64> {
    check_ratio(r)?;
    if a.len() != b.len() {
        return Err(Error::Shape(format!("score lengths differ: {} vs {}", a.len(), b.len())));
    }
    let n = a.len();
    let all: Vec<usize> = (0..n).collect();
    let k = ratio_budget(r, n);
    let sa: BTreeSet<usize> = a.top_k(&all, k).into_iter().collect();
    let sb: BTreeSet<usize> = b.top_k(&all, k).into_iter().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return Ok(1.0);
    }
    Ok(sa.intersection(&sb).count() as f64 / union as f64)
}

/// Fraction of the first layer's selection still selected at each later layer.
pub fn layer_retention(selections: &[BTreeSet<usize>]) -> Result<Vec<f64>> {
    let first = selections
        .first()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::Parameter("first-layer selection is empty".into()))?;
    Ok(selections[1..]
        .iter()
        .map(|s| first.intersection(s).count() as f64 / first.len() as f64)
        .collect())
}
