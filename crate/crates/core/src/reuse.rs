//! Cached per-layer K/V and the alignment of cached rows to a new request.

use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{LayerStates, TokenId};

/// Per-layer, per-head K and V of one processed token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv {
    tokens: Vec<TokenId>,
    keys: Vec<Vec<Matrix>>,
    values: Vec<Vec<Matrix>>,
    d_k: usize,
}

impl LayerKv {
    /// `keys[layer][head]` and `values[layer][head]` are `tokens.len() × d_k`.
    pub fn new(tokens: Vec<TokenId>, keys: Vec<Vec<Matrix>>, values: Vec<Vec<Matrix>>) -> Result<Self> {
        let n = tokens.len();
        let num_layers = keys.len();
        if values.len() != num_layers || num_layers == 0 {
            return Err(Error::Cache("keys and values need the same non-zero layer count".into()));
        }
        let num_heads = keys[0].len();
        if num_heads == 0 {
            return Err(Error::Cache("at least one head is required".into()));
        }
        let d_k = keys[0][0].ncols();
        for (lk, lv) in keys.iter().zip(&values) {
            if lk.len() != num_heads || lv.len() != num_heads {
                return Err(Error::Cache("inconsistent head count across layers".into()));
            }
            for m in lk.iter().chain(lv) {
                if m.dim() != (n, d_k) {
                    return Err(Error::Cache(format!(
                        "matrix of shape {:?}, expected ({n}, {d_k})",
                        m.dim()
                    )));
                }
            }
        }
        Ok(Self {
            tokens,
            keys,
            values,
            d_k,
        })
    }

    /// Captures K/V right after projection (or after reuse substitution) at
    /// every layer and head.
    pub fn from_states(tokens: &[TokenId], states: &LayerStates) -> Self {
        let keys = states
            .layers
            .iter()
            .map(|l| l.heads.iter().map(|h| h.k.clone()).collect())
            .collect();
        let values = states
            .layers
            .iter()
            .map(|l| l.heads.iter().map(|h| h.v.clone()).collect())
            .collect();
        Self::new(tokens.to_vec(), keys, values).expect("forward states are consistent")
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn num_heads(&self) -> usize {
        self.keys[0].len()
    }

    pub fn d_k(&self) -> usize {
        self.d_k
    }

    pub fn keys(&self, layer: usize, head: usize) -> &Matrix {
        &self.keys[layer][head]
    }

    pub fn values(&self, layer: usize, head: usize) -> &Matrix {
        &self.values[layer][head]
    }

    /// In-memory footprint of the 64-bit K and V tensors.
    pub fn size_bytes(&self) -> usize {
        2 * self.num_layers() * self.num_heads() * self.len() * self.d_k * std::mem::size_of::<f64>()
    }

    pub fn truncated(&self, layers: usize) -> LayerKv {
        Self {
            tokens: self.tokens.clone(),
            keys: self.keys[..layers].to_vec(),
            values: self.values[..layers].to_vec(),
            d_k: self.d_k,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReuseSource {
    pub request_id: String,
    pub kv: Arc<LayerKv>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReuseSlot {
    pub source: usize,
    pub position: usize,
}

/// For each position of a new request, at most one cached K/V row to reuse.
#[derive(Debug, Clone, Default)]
pub struct ReuseMap {
    slots: Vec<Option<ReuseSlot>>,
    sources: Vec<ReuseSource>,
}

impl ReuseMap {
    pub fn new(len: usize) -> Self {
        Self {
            slots: vec![None; len],
            sources: Vec::new(),
        }
    }

    pub fn add_source(&mut self, request_id: impl Into<String>, kv: Arc<LayerKv>) -> usize {
        self.sources.push(ReuseSource {
            request_id: request_id.into(),
            kv,
        });
        self.sources.len() - 1
    }

    pub fn assign(&mut self, target: usize, source: usize, position: usize) -> Result<()> {
        if target >= self.slots.len() {
            return Err(Error::Input(format!(
                "reuse target {target} outside request of length {}",
                self.slots.len()
            )));
        }
        if source >= self.sources.len() {
            return Err(Error::Input(format!("unknown reuse source {source}")));
        }
        self.slots[target] = Some(ReuseSlot { source, position });
        Ok(())
    }

    pub fn is_assigned(&self, target: usize) -> bool {
        self.slots.get(target).is_some_and(Option::is_some)
    }

    /// Request length this map is aligned to.
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn get(&self, target: usize) -> Option<ReuseSlot> {
        self.slots.get(target).copied().flatten()
    }

    pub fn source(&self, index: usize) -> &ReuseSource {
        &self.sources[index]
    }

    pub fn sources(&self) -> &[ReuseSource] {
        &self.sources
    }

    /// `(target position, slot)` for every reused position, ascending.
    pub fn iter(&self) -> impl Iterator<Item = (usize, ReuseSlot)> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(t, s)| s.map(|s| (t, s)))
    }

    pub fn reused_positions(&self) -> Vec<usize> {
        self.iter().map(|(t, _)| t).collect()
    }

    pub fn num_reused(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    /// Mapped positions over request length; 0 for an empty request.
    pub fn hit_rate(&self) -> f64 {
        if self.slots.is_empty() {
            0.0
        } else {
            self.num_reused() as f64 / self.slots.len() as f64
        }
    }

    /// Maximal runs of target positions copied from consecutive rows of one
    /// cached entry.
    pub fn spans(&self) -> Vec<Range<usize>> {
        let mut spans = Vec::new();
        let mut current: Option<(usize, ReuseSlot)> = None;
        let mut start = 0;
        for (t, slot) in self.slots.iter().enumerate() {
            let continues = match (current, slot) {
                (Some((pt, ps)), Some(s)) => {
                    pt + 1 == t && ps.source == s.source && ps.position + 1 == s.position
                }
                _ => false,
            };
            if !continues {
                if let Some((pt, _)) = current {
                    spans.push(start..pt + 1);
                }
                start = t;
            }
            current = slot.map(|s| (t, s));
        }
        if let Some((pt, _)) = current {
            spans.push(start..pt + 1);
        }
        spans
    }

    /// Same alignment with every source's K/V transformed by `f`.
    pub fn map_sources(&self, f: impl Fn(&LayerKv) -> LayerKv) -> Result<ReuseMap> {
        Ok(ReuseMap {
            slots: self.slots.clone(),
            sources: self
                .sources
                .iter()
                .map(|s| ReuseSource {
                    request_id: s.request_id.clone(),
                    kv: Arc::new(f(&s.kv)),
                })
                .collect(),
        })
    }
}
