//! Content-addressed pool of per-request K/V caches.
//!
//! Entries are whole requests. A lookup matches the new request against every
//! entry, most recently inserted first, and a target position keeps the first
//! cached row it is matched to. Access recency is a logical counter kept in an
//! atomic so that lookups only need a shared reference.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::matcher::{build_hash_index, match_with_index, window_hashes, HashParams, Matcher};
use crate::model::{ModelConfig, TokenId};
use crate::reuse::{LayerKv, ReuseMap};

const MAGIC: &[u8; 4] = b"KVSH";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KvShape {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_k: usize,
}

impl KvShape {
    pub fn of_config(config: &ModelConfig) -> Self {
        Self {
            num_layers: config.num_layers,
            num_heads: config.num_heads,
            d_k: config.d_k(),
        }
    }

    fn of_kv(kv: &LayerKv) -> Self {
        Self {
            num_layers: kv.num_layers(),
            num_heads: kv.num_heads(),
            d_k: kv.d_k(),
        }
    }
}

#[derive(Debug)]
pub struct KvEntry {
    request_id: String,
    kv: Arc<LayerKv>,
    window_hashes: Vec<u64>,
    last_access: AtomicU64,
}

impl KvEntry {
    pub fn request_id(&self) -> &str {
        &self.request_id
    }

    pub fn tokens(&self) -> &[TokenId] {
        self.kv.tokens()
    }

    pub fn kv(&self) -> &Arc<LayerKv> {
        &self.kv
    }

    pub fn last_access(&self) -> u64 {
        self.last_access.load(Ordering::Relaxed)
    }

    pub fn size_bytes(&self) -> usize {
        self.kv.size_bytes()
    }
}

#[derive(Debug)]
pub struct KvPool {
    shape: Option<KvShape>,
    params: HashParams,
    capacity: Option<usize>,
    /// Insertion order, oldest first.
    entries: Vec<KvEntry>,
    clock: AtomicU64,
}

impl KvPool {
    /// Pool bound to a model's K/V shape, without a capacity limit.
    pub fn new(config: &ModelConfig, params: HashParams) -> Result<Self> {
        config.validate()?;
        params.validate()?;
        Ok(Self {
            shape: Some(KvShape::of_config(config)),
            params,
            capacity: None,
            entries: Vec::new(),
            clock: AtomicU64::new(0),
        })
    }

    /// Pool whose shape is fixed by the first inserted entry.
    pub fn unbound(params: HashParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            shape: None,
            params,
            capacity: None,
            entries: Vec::new(),
            clock: AtomicU64::new(0),
        })
    }

    pub fn with_capacity(mut self, max_bytes: Option<usize>) -> Self {
        self.capacity = max_bytes;
        self
    }

    pub fn shape(&self) -> Option<KvShape> {
        self.shape
    }

    pub fn params(&self) -> &HashParams {
        &self.params
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &KvEntry> {
        self.entries.iter()
    }

    pub fn get(&self, request_id: &str) -> Option<&KvEntry> {
        self.entries.iter().find(|e| e.request_id == request_id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.request_id.clone()).collect()
    }

    pub fn total_bytes(&self) -> usize {
        self.entries.iter().map(KvEntry::size_bytes).sum()
    }

    /// Errors unless the pool's shape agrees with `config`.
    pub fn check_config(&self, config: &ModelConfig) -> Result<()> {
        match self.shape {
            Some(s) if s != KvShape::of_config(config) => Err(Error::Cache(format!(
                "pool holds {s:?}, model expects {:?}",
                KvShape::of_config(config)
            ))),
            _ => Ok(()),
        }
    }

    fn tick(&self) -> u64 {
        self.clock.fetch_add(1, Ordering::Relaxed) + 1
    }

    /// Stores `kv` under `request_id`, replacing any entry with the same id,
    /// then evicts down to the capacity. Returns the evicted ids.
    pub fn insert(&mut self, request_id: impl Into<String>, kv: LayerKv) -> Result<Vec<String>> {
        let request_id = request_id.into();
        let shape = KvShape::of_kv(&kv);
        match self.shape {
            Some(s) if s != shape => {
                return Err(Error::Cache(format!(
                    "entry {request_id} has shape {shape:?}, pool holds {s:?}"
                )))
            }
            None => self.shape = Some(shape),
            _ => {}
        }
        self.entries.retain(|e| e.request_id != request_id);
        let window_hashes = window_hashes(kv.tokens(), &self.params);
        let stamp = self.tick();
        self.entries.push(KvEntry {
            request_id,
            kv: Arc::new(kv),
            window_hashes,
            last_access: AtomicU64::new(stamp),
        });
        Ok(match self.capacity {
            Some(max) => self.evict_to_capacity(max),
            None => Vec::new(),
        })
    }

    /// Marks an entry as accessed now. Returns false for an unknown id.
    pub fn touch(&self, request_id: &str) -> bool {
        match self.get(request_id) {
            Some(e) => {
                e.last_access.store(self.tick(), Ordering::Relaxed);
                true
            }
            None => false,
        }
    }

    /// Adaptive matching with the pool's hash parameters.
    pub fn lookup(&self, tokens: &[TokenId]) -> ReuseMap {
        let index = build_hash_index(tokens, &self.params);
        self.assemble(tokens, |entry| {
            match_with_index(tokens, &index, entry.tokens(), &entry.window_hashes)
                .pairs()
                .collect()
        })
    }

    pub fn lookup_with(&self, tokens: &[TokenId], matcher: &Matcher) -> Result<ReuseMap> {
        match matcher {
            Matcher::Adaptive(p) if p == &self.params => Ok(self.lookup(tokens)),
            Matcher::Adaptive(p) => {
                p.validate()?;
                let index = build_hash_index(tokens, p);
                Ok(self.assemble(tokens, |entry| {
                    match_with_index(tokens, &index, entry.tokens(), &window_hashes(entry.tokens(), p))
                        .pairs()
                        .collect()
                }))
            }
            Matcher::Fixed { .. } => {
                let mut pairs = Vec::with_capacity(self.entries.len());
                for entry in self.entries.iter().rev() {
                    pairs.push(matcher.match_pair(tokens, entry.tokens())?);
                }
                let mut pairs = pairs.into_iter();
                Ok(self.assemble(tokens, |_| pairs.next().expect("one result per entry").pairs().collect()))
            }
        }
    }

    /// Visits entries most recent first; `matches` yields (target, candidate)
    /// pairs for one entry. Contributing entries are touched.
    fn assemble(&self, tokens: &[TokenId], mut matches: impl FnMut(&KvEntry) -> Vec<(usize, usize)>) -> ReuseMap {
        let mut map = ReuseMap::new(tokens.len());
        for entry in self.entries.iter().rev() {
            let fresh: Vec<(usize, usize)> = matches(entry)
                .into_iter()
                .filter(|&(t, _)| !map.is_assigned(t))
                .collect();
            if fresh.is_empty() {
                continue;
            }
            let source = map.add_source(entry.request_id.clone(), Arc::clone(&entry.kv));
            for (t, c) in fresh {
                debug_assert_eq!(tokens[t], entry.tokens()[c]);
                map.assign(t, source, c).expect("target and source in range");
            }
            entry.last_access.store(self.tick(), Ordering::Relaxed);
        }
        map
    }

    /// Removes least recently accessed entries until the pool fits in
    /// `max_bytes`. Returns evicted ids in eviction order.
    pub fn evict_to_capacity(&mut self, max_bytes: usize) -> Vec<String> {
        let mut evicted = Vec::new();
        let mut total = self.total_bytes();
        while total > max_bytes && !self.entries.is_empty() {
            let victim = self
                .entries
                .iter()
                .enumerate()
                .min_by_key(|(_, e)| e.last_access())
                .map(|(i, _)| i)
                .expect("pool not empty");
            let entry = self.entries.remove(victim);
            total -= entry.size_bytes();
            evicted.push(entry.request_id);
        }
        evicted
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for entry in &self.entries {
            let kv = &entry.kv;
            out.extend_from_slice(&(entry.request_id.len() as u32).to_le_bytes());
            out.extend_from_slice(entry.request_id.as_bytes());
            out.extend_from_slice(&(kv.len() as u32).to_le_bytes());
            for &t in kv.tokens() {
                out.extend_from_slice(&t.to_le_bytes());
            }
            for dim in [kv.num_layers(), kv.num_heads(), kv.d_k()] {
                out.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            for values in [false, true] {
                for l in 0..kv.num_layers() {
                    for t in 0..kv.len() {
                        for h in 0..kv.num_heads() {
                            let m = if values { kv.values(l, h) } else { kv.keys(l, h) };
                            for &x in m.row(t) {
                                out.extend_from_slice(&(x as f32).to_le_bytes());
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Parses the on-disk format. Every entry must share one shape.
    pub fn from_bytes(bytes: &[u8], params: HashParams) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: "bad magic".into(),
            });
        }
        let version_at = r.pos;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format {
                offset: version_at as u64,
                reason: format!("unsupported version {version}"),
            });
        }
        let count = r.u64()?;
        let mut pool = Self::unbound(params)?;
        let mut seen = HashMap::new();
        for _ in 0..count {
            let entry_at = r.pos;
            let id_len = r.u32()? as usize;
            let id_at = r.pos;
            let id = std::str::from_utf8(r.take(id_len)?)
                .map_err(|_| Error::Format {
                    offset: id_at as u64,
                    reason: "request id is not UTF-8".into(),
                })?
                .to_string();
            if seen.insert(id.clone(), ()).is_some() {
                return Err(Error::Format {
                    offset: entry_at as u64,
                    reason: format!("duplicate request id {id}"),
                });
            }
            let n = r.u32()? as usize;
            let tokens = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let dims_at = r.pos;
            let (layers, heads, d_k) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
            if layers == 0 || heads == 0 || d_k == 0 {
                return Err(Error::Format {
                    offset: dims_at as u64,
                    reason: "zero-sized K/V dimension".into(),
                });
            }
            let needed = 2 * layers * heads * n * d_k * 4;
            if r.remaining() < needed {
                return Err(Error::Format {
                    offset: r.bytes.len() as u64,
                    reason: format!("truncated K/V block: {needed} bytes expected"),
                });
            }
            let mut blocks = Vec::with_capacity(2);
            for _ in 0..2 {
                let mut mats = vec![vec![Array2::<f64>::zeros((n, d_k)); heads]; layers];
                for layer in mats.iter_mut() {
                    for t in 0..n {
                        for m in layer.iter_mut() {
                            for d in 0..d_k {
                                m[[t, d]] = r.f32()? as f64;
                            }
                        }
                    }
                }
                blocks.push(mats);
            }
            let values = blocks.pop().expect("two blocks");
            let keys = blocks.pop().expect("two blocks");
            let kv = LayerKv::new(tokens, keys, values)?;
            pool.insert(id, kv).map_err(|e| Error::Format {
                offset: dims_at as u64,
                reason: e.to_string(),
            })?;
        }
        if r.remaining() != 0 {
            return Err(Error::Format {
                offset: r.pos as u64,
                reason: "trailing bytes after last entry".into(),
            });
        }
        Ok(pool)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(&path, self.to_bytes()).map_err(|e| Error::io_at(&path, e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, params: HashParams) -> Result<Self> {
        Self::from_bytes(&std::fs::read(&path).map_err(|e| Error::io_at(&path, e))?, params)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                reason: format!("unexpected end of data: {n} bytes needed at offset {}", self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
