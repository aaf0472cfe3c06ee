//! Key/value cache storage and the three cache strategies.
//!
//! * `NoCache` recomputes every candidate's full sequence.
//! * `StandardKV` computes the prefix once, then physically replicates it for
//!   every candidate row ([`expand_standard`]).
//! * `PSKV` keeps one compact prefix cache per prompt and lets each layer's
//!   attention read it through a row map ([`pskv_layer_view`]). An optional
//!   fallback materializes the broadcast for one layer at a time.
//!
//! Keys are always presented to attention prefix-first, then candidate slots,
//! so all strategies feed the same kernel the same numbers in the same order.

use std::borrow::Cow;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bench::accountant::{Accountant, MemKind, Reservation};
use crate::bench::Counters;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights, StepInput};
use crate::numerics::{Element, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheStrategy {
    #[serde(alias = "none", alias = "no_cache")]
    NoCache,
    #[serde(alias = "standard_kv")]
    Standard,
    #[default]
    Pskv,
}

impl CacheStrategy {
    pub const ALL: [CacheStrategy; 3] = [
        CacheStrategy::NoCache,
        CacheStrategy::Standard,
        CacheStrategy::Pskv,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CacheStrategy::NoCache => "nocache",
            CacheStrategy::Standard => "standard",
            CacheStrategy::Pskv => "pskv",
        }
    }

    pub fn is_cached(self) -> bool {
        !matches!(self, CacheStrategy::NoCache)
    }
}

impl std::fmt::Display for CacheStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CacheStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nocache" | "none" | "no_cache" => Ok(CacheStrategy::NoCache),
            "standard" | "standard_kv" => Ok(CacheStrategy::Standard),
            "pskv" => Ok(CacheStrategy::Pskv),
            other => Err(Error::invalid(
                "strategy",
                format!("unknown strategy `{other}`"),
            )),
        }
    }
}

/// How a PSKV view serves prefix keys to attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PskvMode {
    /// Rows read the shared block through an index map; nothing is copied.
    #[default]
    IndexMapped,
    /// The broadcast for the current layer is copied, accounted, and freed
    /// before the next layer opens.
    LayerExpand,
}

/// Exact bytes of a K and V cache over `rows` sequences of `tokens` slots.
pub fn cache_bytes(config: &ModelConfig, rows: usize, tokens: usize) -> usize {
    2 * config.n_layers
        * rows
        * tokens
        * config.n_kv_heads
        * config.d_head()
        * config.precision.bytes()
}

/// One layer's K and V, laid out `[row][kv_head][slot][d_head]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvBlock<T> {
    rows: usize,
    heads: usize,
    slots: usize,
    d_head: usize,
    k: Vec<T>,
    v: Vec<T>,
}

impl<T: Element> KvBlock<T> {
    pub fn zeros(rows: usize, heads: usize, slots: usize, d_head: usize) -> Self {
        let n = rows * heads * slots * d_head;
        Self {
            rows,
            heads,
            slots,
            d_head,
            k: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    fn head_range(&self, row: usize, head: usize) -> std::ops::Range<usize> {
        let len = self.slots * self.d_head;
        let start = (row * self.heads + head) * len;
        start..start + len
    }

    fn row_range(&self, row: usize) -> std::ops::Range<usize> {
        let len = self.heads * self.slots * self.d_head;
        row * len..(row + 1) * len
    }

    pub fn keys(&self, row: usize, head: usize) -> &[T] {
        &self.k[self.head_range(row, head)]
    }

    pub fn values(&self, row: usize, head: usize) -> &[T] {
        &self.v[self.head_range(row, head)]
    }

    pub fn keys_mut(&mut self, row: usize, head: usize) -> &mut [T] {
        let r = self.head_range(row, head);
        &mut self.k[r]
    }

    /// Bit patterns of both K and V for one row, for equality checks.
    pub fn row_bits(&self, row: usize) -> Vec<u64> {
        let r = self.row_range(row);
        self.k[r.clone()]
            .iter()
            .chain(&self.v[r])
            .map(|x| x.bits())
            .collect()
    }

    fn copy_row_from(&mut self, dst: usize, src: &KvBlock<T>, src_row: usize) {
        let (d, s) = (self.row_range(dst), src.row_range(src_row));
        self.k[d.clone()].copy_from_slice(&src.k[s.clone()]);
        self.v[d].copy_from_slice(&src.v[s]);
    }

    /// Copies the first `n` slots of every head of `src_row`.
    fn copy_slots_from(&mut self, dst: usize, src: &KvBlock<T>, src_row: usize, n: usize) {
        let dh = self.d_head;
        for h in 0..self.heads {
            let d = self.head_range(dst, h).start;
            let s = src.head_range(src_row, h).start;
            self.k[d..d + n * dh].copy_from_slice(&src.k[s..s + n * dh]);
            self.v[d..d + n * dh].copy_from_slice(&src.v[s..s + n * dh]);
        }
    }
}

/// Per-layer K/V storage for a set of sequences, registered with an accountant.
#[derive(Debug)]
pub struct KvStore<T> {
    layers: Vec<KvBlock<T>>,
    /// `[layer][row]` filled slot counts.
    filled: Vec<Vec<usize>>,
    /// `[row * capacity + slot]`: slot holds a real (non-pad) token.
    real: Vec<bool>,
    rows: usize,
    capacity: usize,
    kv_heads: usize,
    d_head: usize,
    /// Holds one layer's K/V at a time; every layer writes the same block.
    scoped: bool,
    reservation: Reservation,
}

impl<T: Element> KvStore<T> {
    pub fn new(
        config: &ModelConfig,
        rows: usize,
        capacity: usize,
        kind: MemKind,
        accountant: &Arc<Accountant>,
    ) -> Result<Self> {
        let reservation = accountant.reserve(kind, cache_bytes(config, rows, capacity))?;
        let (kv_heads, d_head) = (config.n_kv_heads, config.d_head());
        Ok(Self {
            layers: (0..config.n_layers)
                .map(|_| KvBlock::zeros(rows, kv_heads, capacity, d_head))
                .collect(),
            filled: vec![vec![0; rows]; config.n_layers],
            real: vec![false; rows * capacity],
            rows,
            capacity,
            kv_heads,
            d_head,
            scoped: false,
            reservation,
        })
    }

    /// Storage for a cacheless forward: only the current layer's K/V are
    /// live, so the block is reused (and the bytes charged) once, not per
    /// layer. Each layer's entries are overwritten by the next.
    pub fn layer_scoped(
        config: &ModelConfig,
        rows: usize,
        capacity: usize,
        kind: MemKind,
        accountant: &Arc<Accountant>,
    ) -> Result<Self> {
        let reservation =
            accountant.reserve(kind, cache_bytes(config, rows, capacity) / config.n_layers)?;
        Ok(Self {
            layers: vec![KvBlock::zeros(
                rows,
                config.n_kv_heads,
                capacity,
                config.d_head(),
            )],
            filled: vec![vec![0; rows]; config.n_layers],
            real: vec![false; rows * capacity],
            rows,
            capacity,
            kv_heads: config.n_kv_heads,
            d_head: config.d_head(),
            scoped: true,
            reservation,
        })
    }

    fn block_index(&self, layer: usize) -> usize {
        if self.scoped {
            0
        } else {
            layer
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn n_layers(&self) -> usize {
        self.filled.len()
    }

    pub fn bytes(&self) -> usize {
        self.reservation.bytes()
    }

    pub fn accountant(&self) -> &Arc<Accountant> {
        self.reservation.accountant()
    }

    pub fn layer(&self, layer: usize) -> &KvBlock<T> {
        &self.layers[self.block_index(layer)]
    }

    pub fn filled(&self, layer: usize, row: usize) -> usize {
        self.filled[layer][row]
    }

    /// Filled length of a row once every layer has been written.
    pub fn len(&self, row: usize) -> usize {
        self.filled.last().map_or(0, |f| f[row])
    }

    pub fn is_empty(&self) -> bool {
        (0..self.rows).all(|r| self.len(r) == 0)
    }

    pub fn real(&self, row: usize) -> &[bool] {
        &self.real[row * self.capacity..(row + 1) * self.capacity]
    }

    pub fn real_len(&self, row: usize) -> usize {
        self.real(row)[..self.len(row)]
            .iter()
            .filter(|&&b| b)
            .count()
    }

    /// Appends `real.len()` token slots to one row of one layer. `k` and `v`
    /// are token-major `[token][kv_head][d_head]`.
    pub fn append_row(
        &mut self,
        layer: usize,
        row: usize,
        k: &[T],
        v: &[T],
        real: &[bool],
    ) -> Result<()> {
        if layer >= self.filled.len() {
            return Err(Error::Index {
                what: "layer",
                index: layer,
                len: self.filled.len(),
            });
        }
        if row >= self.rows {
            return Err(Error::Index {
                what: "cache row",
                index: row,
                len: self.rows,
            });
        }
        let n = real.len();
        let width = self.kv_heads * self.d_head;
        if k.len() != n * width || v.len() != n * width {
            return Err(Error::Shape(format!(
                "append of {n} tokens with {} key and {} value elements",
                k.len(),
                v.len()
            )));
        }
        let start = self.filled[layer][row];
        if start + n > self.capacity {
            return Err(Error::Capacity {
                what: "candidate cache",
                requested: start + n,
                capacity: self.capacity,
            });
        }
        let dh = self.d_head;
        let bi = self.block_index(layer);
        let block = &mut self.layers[bi];
        for h in 0..self.kv_heads {
            let base = block.head_range(row, h).start;
            for t in 0..n {
                let dst = base + (start + t) * dh;
                let src = t * width + h * dh;
                block.k[dst..dst + dh].copy_from_slice(&k[src..src + dh]);
                block.v[dst..dst + dh].copy_from_slice(&v[src..src + dh]);
            }
        }
        self.real[row * self.capacity + start..row * self.capacity + start + n]
            .copy_from_slice(real);
        self.filled[layer][row] = start + n;
        Ok(())
    }

    /// Copies the first `n` filled slots of `src_row` in `src` into `dst_row`,
    /// replacing whatever it held.
    pub fn copy_prefix_of_row(
        &mut self,
        dst_row: usize,
        src: &KvStore<T>,
        src_row: usize,
        n: usize,
    ) -> Result<()> {
        if self.scoped || src.scoped {
            return Err(Error::Shape(
                "layer-scoped storage holds no history to copy".into(),
            ));
        }
        if n > self.capacity || n > src.len(src_row) {
            return Err(Error::Capacity {
                what: "row copy",
                requested: n,
                capacity: self.capacity.min(src.len(src_row)),
            });
        }
        for (l, block) in self.layers.iter_mut().enumerate() {
            block.copy_slots_from(dst_row, &src.layers[l], src_row, n);
            self.filled[l][dst_row] = n;
        }
        let d = dst_row * self.capacity;
        let s = src_row * src.capacity;
        self.real[d..d + n].copy_from_slice(&src.real[s..s + n]);
        self.real[d + n..d + self.capacity].fill(false);
        Ok(())
    }

    /// Flips the lowest mantissa bit of one cached key. Exists so verification
    /// suites can prove they detect a corrupted cache.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, layer: usize, row: usize, head: usize, slot: usize, dim: usize) {
        let dh = self.d_head;
        let bi = self.block_index(layer);
        let x = &mut self.layers[bi].keys_mut(row, head)[slot * dh + dim];
        let flipped = x.bits() ^ 1;
        *x = if T::BYTES == 4 {
            T::from_f64(f32::from_bits(flipped as u32) as f64)
        } else {
            T::from_f64(f64::from_bits(flipped))
        };
    }
}

/// One layer of prefix keys as seen by a batch of candidate rows.
pub struct LayerPrefix<'a, T: Element> {
    block: Cow<'a, KvBlock<T>>,
    block_rows: Vec<usize>,
    valid: Vec<&'a [bool]>,
    _hold: Option<Reservation>,
}

impl<'a, T: Element> LayerPrefix<'a, T> {
    pub fn empty(rows: usize) -> Self {
        Self {
            block: Cow::Owned(KvBlock::zeros(0, 0, 0, 0)),
            block_rows: vec![0; rows],
            valid: vec![&[]; rows],
            _hold: None,
        }
    }

    pub fn slots(&self) -> usize {
        self.block.slots
    }

    pub fn keys(&self, row: usize, head: usize) -> &[T] {
        if self.block.slots == 0 {
            return &[];
        }
        self.block.keys(self.block_rows[row], head)
    }

    pub fn values(&self, row: usize, head: usize) -> &[T] {
        if self.block.slots == 0 {
            return &[];
        }
        self.block.values(self.block_rows[row], head)
    }

    pub fn valid(&self, row: usize) -> &[bool] {
        self.valid[row]
    }

    /// True when the rows read prefix data owned by a temporary copy.
    pub fn is_materialized(&self) -> bool {
        matches!(self.block, Cow::Owned(_)) && self.block.slots > 0
    }
}

/// Per-layer provider of prefix keys for a forward pass.
pub trait PrefixView<T: Element> {
    /// Prefix slots presented ahead of candidate keys (pads included).
    fn slots(&self) -> usize;
    /// Real prefix tokens behind a batch row.
    fn real_len(&self, row: usize) -> usize;
    fn open_layer(&self, layer: usize, rows: usize) -> Result<LayerPrefix<'_, T>>;
}

/// No prefix at all: every key comes from the candidate store.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoPrefix;

impl<T: Element> PrefixView<T> for NoPrefix {
    fn slots(&self) -> usize {
        0
    }
    fn real_len(&self, _row: usize) -> usize {
        0
    }
    fn open_layer(&self, _layer: usize, rows: usize) -> Result<LayerPrefix<'_, T>> {
        Ok(LayerPrefix::empty(rows))
    }
}

/// Left-padded prefix K/V. Compact caches hold one row per prompt; caches
/// produced by [`expand_standard`] hold `copies` rows per prompt.
#[derive(Debug)]
pub struct PrefixCache<T> {
    store: KvStore<T>,
    lens: Vec<usize>,
    copies: usize,
    last_logits: Vec<Option<Vec<T>>>,
}

impl<T: Element> PrefixCache<T> {
    pub fn store(&self) -> &KvStore<T> {
        &self.store
    }

    pub fn n_prompts(&self) -> usize {
        self.lens.len()
    }

    pub fn rows(&self) -> usize {
        self.store.rows
    }

    pub fn copies_per_prompt(&self) -> usize {
        self.copies
    }

    /// Slot count `N_p_max`.
    pub fn max_len(&self) -> usize {
        self.store.capacity
    }

    pub fn prompt_len(&self, prompt: usize) -> usize {
        self.lens[prompt]
    }

    pub fn bytes(&self) -> usize {
        self.store.bytes()
    }

    /// Next-token logits after the last real prefix token of a prompt.
    pub fn last_logits(&self, prompt: usize) -> Option<&[T]> {
        self.last_logits[prompt].as_deref()
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, prompt: usize) {
        let row = prompt * self.copies;
        let slot = self.store.capacity - 1;
        self.store.inject_fault(0, row, 0, slot, 0);
    }
}

/// Runs one batched forward pass over the left-padded prompts and keeps the
/// resulting K/V. Counts one prefix forward per prompt.
pub fn build_prefix_cache<T: Element>(
    weights: &ModelWeights<T>,
    prompts: &[Vec<u32>],
    max_len: usize,
    accountant: &Arc<Accountant>,
    counters: &Counters,
) -> Result<PrefixCache<T>> {
    if prompts.is_empty() {
        return Err(Error::DegenerateInput("no prompts".into()));
    }
    let pad = weights.config().pad_id();
    let mut tokens = Vec::with_capacity(prompts.len());
    let mut positions = Vec::with_capacity(prompts.len());
    for p in prompts {
        if p.len() > max_len {
            return Err(Error::Capacity {
                what: "prefix cache",
                requested: p.len(),
                capacity: max_len,
            });
        }
        let lead = max_len - p.len();
        let mut row = vec![pad; lead];
        row.extend_from_slice(p);
        let mut pos = vec![0; lead];
        pos.extend(0..p.len());
        tokens.push(row);
        positions.push(pos);
    }
    let mut store = KvStore::new(
        weights.config(),
        prompts.len(),
        max_len,
        MemKind::Prefix,
        accountant,
    )?;
    let logits_from = max_len.saturating_sub(1);
    let input = StepInput {
        tokens: &tokens,
        positions: &positions,
        logits_from,
    };
    let logits = weights.forward_step(
        &input,
        &NoPrefix,
        &mut store,
        &counters.attention_cells,
        false,
    )?;
    counters.add_prefix_forwards(prompts.len() as u64);
    let last_logits = prompts
        .iter()
        .zip(&logits)
        .map(|(p, l)| (!p.is_empty() && l.rows() > 0).then(|| l.row(l.rows() - 1).to_vec()))
        .collect();
    Ok(PrefixCache {
        store,
        lens: prompts.iter().map(Vec::len).collect(),
        copies: 1,
        last_logits,
    })
}

/// Physically replicates each prompt's prefix `copies_per_prompt` times.
/// Prompt `b` occupies rows `b*copies .. (b+1)*copies` of the result. The
/// input is consumed: with one copy its storage is reused as is, otherwise
/// it is released once the replica exists.
pub fn expand_standard<T: Element>(
    prefix: PrefixCache<T>,
    copies_per_prompt: usize,
    accountant: &Arc<Accountant>,
) -> Result<PrefixCache<T>> {
    if copies_per_prompt == 0 {
        return Err(Error::invalid("copies_per_prompt", "must be at least 1"));
    }
    if copies_per_prompt == 1 && prefix.copies == 1 {
        return Ok(prefix);
    }
    let src = &prefix.store;
    let b = prefix.n_prompts();
    let rows = b * copies_per_prompt;
    let reservation = accountant.reserve(
        MemKind::PrefixExpanded,
        2 * src.layers.len() * rows * src.capacity * src.kv_heads * src.d_head * T::BYTES,
    )?;
    let mut layers = Vec::with_capacity(src.layers.len());
    for block in &src.layers {
        let mut out = KvBlock::zeros(rows, src.kv_heads, src.capacity, src.d_head);
        for r in 0..rows {
            out.copy_row_from(r, block, (r / copies_per_prompt) * prefix.copies);
        }
        layers.push(out);
    }
    let mut real = Vec::with_capacity(rows * src.capacity);
    for r in 0..rows {
        real.extend_from_slice(src.real((r / copies_per_prompt) * prefix.copies));
    }
    let store = KvStore {
        layers,
        filled: vec![vec![src.capacity; rows]; src.layers.len()],
        real,
        rows,
        capacity: src.capacity,
        kv_heads: src.kv_heads,
        d_head: src.d_head,
        scoped: false,
        reservation,
    };
    Ok(PrefixCache {
        store,
        lens: prefix.lens.clone(),
        copies: copies_per_prompt,
        last_logits: prefix.last_logits.clone(),
    })
}

/// A batch's access path into a prefix cache: each batch row reads one
/// cache row. Used for both the shared (PSKV) and the duplicated
/// (StandardKV) layouts.
pub struct PrefixAccess<'a, T: Element> {
    cache: &'a PrefixCache<T>,
    block_rows: Vec<usize>,
    materialize: bool,
    observed_prefix_bytes: AtomicUsize,
}

impl<'a, T: Element> PrefixAccess<'a, T> {
    /// Shared access for PSKV: row `i` reads prompt `row_prompt[i]`.
    pub fn shared(cache: &'a PrefixCache<T>, row_prompt: &[usize], mode: PskvMode) -> Result<Self> {
        let block_rows = row_prompt
            .iter()
            .map(|&p| {
                if p < cache.n_prompts() {
                    Ok(p * cache.copies)
                } else {
                    Err(Error::Index {
                        what: "prompt",
                        index: p,
                        len: cache.n_prompts(),
                    })
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cache,
            block_rows,
            materialize: mode == PskvMode::LayerExpand,
            observed_prefix_bytes: AtomicUsize::new(0),
        })
    }

    /// Access into a physically expanded cache: row `i` reads its own copy
    /// `row_slot[i]` = (prompt, index within prompt).
    pub fn duplicated(cache: &'a PrefixCache<T>, row_slot: &[(usize, usize)]) -> Result<Self> {
        let block_rows = row_slot
            .iter()
            .map(|&(p, j)| {
                if p >= cache.n_prompts() {
                    Err(Error::Index {
                        what: "prompt",
                        index: p,
                        len: cache.n_prompts(),
                    })
                } else if j >= cache.copies {
                    Err(Error::Capacity {
                        what: "expanded prefix copies",
                        requested: j + 1,
                        capacity: cache.copies,
                    })
                } else {
                    Ok(p * cache.copies + j)
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cache,
            block_rows,
            materialize: false,
            observed_prefix_bytes: AtomicUsize::new(0),
        })
    }

    /// Largest prefix-resident byte total seen while a layer was open.
    pub fn observed_prefix_bytes(&self) -> usize {
        self.observed_prefix_bytes.load(Ordering::Relaxed)
    }

    fn observe(&self) {
        let live = self.cache.store.accountant().live_prefix();
        self.observed_prefix_bytes
            .fetch_max(live, Ordering::Relaxed);
    }
}

impl<T: Element> PrefixView<T> for PrefixAccess<'_, T> {
    fn slots(&self) -> usize {
        self.cache.store.capacity
    }

    fn real_len(&self, row: usize) -> usize {
        self.cache.store.real_len(self.block_rows[row])
    }

    fn open_layer(&self, layer: usize, rows: usize) -> Result<LayerPrefix<'_, T>> {
        if rows != self.block_rows.len() {
            return Err(Error::Shape(format!(
                "prefix view maps {} rows, forward has {rows}",
                self.block_rows.len()
            )));
        }
        if layer >= self.cache.store.layers.len() {
            return Err(Error::Index {
                what: "layer",
                index: layer,
                len: self.cache.store.layers.len(),
            });
        }
        let store = &self.cache.store;
        let valid = self.block_rows.iter().map(|&r| store.real(r)).collect();
        let view = if self.materialize {
            let src = &store.layers[layer];
            let bytes = 2 * rows * src.heads * src.slots * src.d_head * T::BYTES;
            let hold = store.accountant().reserve(MemKind::LayerExpansion, bytes)?;
            let mut block = KvBlock::zeros(rows, src.heads, src.slots, src.d_head);
            for (i, &r) in self.block_rows.iter().enumerate() {
                block.copy_row_from(i, src, r);
            }
            LayerPrefix {
                block: Cow::Owned(block),
                block_rows: (0..rows).collect(),
                valid,
                _hold: Some(hold),
            }
        } else {
            LayerPrefix {
                block: Cow::Borrowed(&store.layers[layer]),
                block_rows: self.block_rows.clone(),
                valid,
                _hold: None,
            }
        };
        self.observe();
        Ok(view)
    }
}

/// Layer-scoped read view of a shared prefix for `candidate_rows` rows laid
/// out in contiguous per-prompt blocks (row `i` reads prompt
/// `i / (candidate_rows / B)`).
pub fn pskv_layer_view<'a, T: Element>(
    prefix: &'a PrefixCache<T>,
    layer: usize,
    candidate_rows: usize,
) -> Result<LayerPrefix<'a, T>> {
    let b = prefix.n_prompts();
    if !candidate_rows.is_multiple_of(b) {
        return Err(Error::Shape(format!(
            "{candidate_rows} candidate rows over {b} prompts"
        )));
    }
    let per = candidate_rows / b;
    let rows: Vec<usize> = (0..candidate_rows).map(|i| i / per).collect();
    let access = PrefixAccess::shared(prefix, &rows, PskvMode::IndexMapped)?;
    let store = &prefix.store;
    if layer >= store.layers.len() {
        return Err(Error::Index {
            what: "layer",
            index: layer,
            len: store.layers.len(),
        });
    }
    Ok(LayerPrefix {
        block: Cow::Borrowed(&store.layers[layer]),
        valid: access.block_rows.iter().map(|&r| store.real(r)).collect(),
        block_rows: access.block_rows,
        _hold: None,
    })
}

/// Per-candidate suffix/target cache with its candidate→prompt map.
#[derive(Debug)]
pub struct CandidateCache<T> {
    store: KvStore<T>,
    prompt_of: Vec<usize>,
}

impl<T: Element> CandidateCache<T> {
    /// `rows_per_prompt` candidates per prompt in contiguous blocks.
    pub fn new(
        config: &ModelConfig,
        n_prompts: usize,
        rows_per_prompt: usize,
        capacity: usize,
        accountant: &Arc<Accountant>,
    ) -> Result<Self> {
        let rows = n_prompts * rows_per_prompt;
        Ok(Self {
            store: KvStore::new(config, rows, capacity, MemKind::Candidate, accountant)?,
            prompt_of: (0..rows).map(|i| i / rows_per_prompt.max(1)).collect(),
        })
    }

    pub fn with_prompt_map(
        config: &ModelConfig,
        prompt_of: Vec<usize>,
        capacity: usize,
        accountant: &Arc<Accountant>,
    ) -> Result<Self> {
        Ok(Self {
            store: KvStore::new(
                config,
                prompt_of.len(),
                capacity,
                MemKind::Candidate,
                accountant,
            )?,
            prompt_of,
        })
    }

    pub fn prompt_of(&self) -> &[usize] {
        &self.prompt_of
    }

    pub fn store(&self) -> &KvStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut KvStore<T> {
        &mut self.store
    }

    pub fn filled(&self, row: usize) -> usize {
        self.store.len(row)
    }

    /// Appends per-row K/V (`[tokens × kv_heads·d_head]`) for one layer.
    pub fn append_candidate(
        &mut self,
        layer: usize,
        new_k: &[Matrix<T>],
        new_v: &[Matrix<T>],
        rows: &[usize],
    ) -> Result<()> {
        if new_k.len() != rows.len() || new_v.len() != rows.len() {
            return Err(Error::Shape(format!(
                "{} key and {} value blocks for {} rows",
                new_k.len(),
                new_v.len(),
                rows.len()
            )));
        }
        for ((&r, k), v) in rows.iter().zip(new_k).zip(new_v) {
            if k.rows() != v.rows() {
                return Err(Error::Shape("key/value token counts differ".into()));
            }
            self.store
                .append_row(layer, r, k.data(), v.data(), &vec![true; k.rows()])?;
        }
        Ok(())
    }
}
