//! Deterministic toy decoder-only transformer.
//!
//! Pre-norm blocks (RMSNorm → attention → RMSNorm → SiLU MLP), rotary
//! positions, grouped-query attention and an untied output projection.
//! Positions count real tokens only: the first real token of every row sits
//! at position 0 and cached keys are stored already rotated.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::accountant::{Accountant, MemKind};
use crate::error::{Error, Result};
use crate::kvcache::{KvStore, LayerPrefix, NoPrefix, PrefixView};
use crate::numerics::{
    masked_attention, rms_norm_into, rope_frequencies, rope_rotate, vec_mat_into, BoolMatrix,
    CellCounter, Element, Matrix, Precision, SegmentedRows,
};
use crate::rng::DetRng;

pub type TokenId = u32;

pub const NORM_EPS: f64 = 1e-5;
pub const MLP_EXPANSION: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    /// 256 byte values plus one pad id by default. The pad id is always the last id.
    pub vocab_size: usize,
    pub rope_base: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 32,
            n_q_heads: 4,
            n_kv_heads: 2,
            vocab_size: 257,
            rope_base: 10000.0,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_q_heads.max(1)
    }

    /// Query heads served by each KV head.
    pub fn group_size(&self) -> usize {
        self.n_q_heads / self.n_kv_heads.max(1)
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.d_head()
    }

    pub fn pad_id(&self) -> TokenId {
        (self.vocab_size - 1) as TokenId
    }

    pub fn validate(&self) -> Result<()> {
        let bad =
            |field: &str, reason: String| Err(Error::invalid(format!("model.{field}"), reason));
        if self.n_layers == 0 {
            return bad("n_layers", "must be at least 1".into());
        }
        if self.n_q_heads == 0 || self.n_kv_heads == 0 {
            return bad("n_q_heads", "head counts must be positive".into());
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(self.n_q_heads) {
            return bad(
                "d_model",
                format!(
                    "{} is not a positive multiple of n_q_heads={}",
                    self.d_model, self.n_q_heads
                ),
            );
        }
        if !self.d_head().is_multiple_of(2) {
            return bad(
                "d_model",
                format!(
                    "head dimension {} must be even for rotary positions",
                    self.d_head()
                ),
            );
        }
        if !self.n_q_heads.is_multiple_of(self.n_kv_heads) {
            return bad(
                "n_kv_heads",
                format!(
                    "n_q_heads={} is not divisible by n_kv_heads={}",
                    self.n_q_heads, self.n_kv_heads
                ),
            );
        }
        if self.vocab_size < 2 || self.vocab_size > u32::MAX as usize {
            return bad("vocab_size", format!("{} is out of range", self.vocab_size));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return bad("rope_base", format!("{} must be positive", self.rope_base));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Prefix,
    Suffix,
    Target,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
    pub role: Role,
}

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>, role: Role) -> Self {
        Self { ids, role }
    }

    /// Byte-level tokenization: one id per UTF-8 byte.
    pub fn from_bytes(text: &str, role: Role) -> Self {
        Self::new(text.bytes().map(TokenId::from).collect(), role)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// All ids are real vocabulary entries (never the pad id).
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for &id in &self.ids {
            if id as usize >= config.vocab_size {
                return Err(Error::Vocabulary {
                    id,
                    vocab_size: config.vocab_size,
                });
            }
            if id == config.pad_id() {
                return Err(Error::DegenerateInput(format!(
                    "pad id {id} inside a {:?} sequence",
                    self.role
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub attn_norm: Vec<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub mlp_norm: Vec<T>,
    pub w_up: Matrix<T>,
    pub w_down: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T> {
    config: ModelConfig,
    pub embedding: Matrix<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Vec<T>,
    pub w_out: Matrix<T>,
    rope_freqs: Vec<f64>,
}

/// One forward step over a batch of equally long token rows.
///
/// Tokens equal to the pad id are skipped entirely: they produce no queries,
/// their K/V slots stay zero and are masked.
#[derive(Debug, Clone, Copy)]
pub struct StepInput<'a> {
    pub tokens: &'a [Vec<TokenId>],
    pub positions: &'a [Vec<usize>],
    /// First new-token index whose logits are computed.
    pub logits_from: usize,
}

struct RowProjections<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
}

pub fn init_model<T: Element>(config: &ModelConfig) -> Result<ModelWeights<T>> {
    ModelWeights::init(config)
}

impl<T: Element> ModelWeights<T> {
    /// Draws every weight from one seeded stream, uniform in ±1/√d_model.
    /// Norm gains are 1 plus a draw from the same range.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut config = config.clone();
        config.precision = T::PRECISION;
        let d = config.d_model;
        let a = 1.0 / (d as f64).sqrt();
        let mut rng = DetRng::new(config.seed);
        let mut mat = |rows: usize, cols: usize| {
            let data = (0..rows * cols)
                .map(|_| T::from_f64(rng.symmetric(a)))
                .collect();
            Matrix::new(rows, cols, data).expect("shape")
        };
        let embedding = mat(config.vocab_size, d);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let attn_norm = mat(1, d)
                .into_data()
                .into_iter()
                .map(|x| T::one() + x)
                .collect();
            let wq = mat(d, d);
            let wk = mat(d, config.kv_dim());
            let wv = mat(d, config.kv_dim());
            let wo = mat(d, d);
            let mlp_norm = mat(1, d)
                .into_data()
                .into_iter()
                .map(|x| T::one() + x)
                .collect();
            let w_up = mat(d, MLP_EXPANSION * d);
            let w_down = mat(MLP_EXPANSION * d, d);
            layers.push(LayerWeights {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                mlp_norm,
                w_up,
                w_down,
            });
        }
        let final_norm = mat(1, d)
            .into_data()
            .into_iter()
            .map(|x| T::one() + x)
            .collect();
        let w_out = mat(d, config.vocab_size);
        let rope_freqs = rope_frequencies(config.d_head(), config.rope_base);
        Ok(Self {
            config,
            embedding,
            layers,
            final_norm,
            w_out,
            rope_freqs,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Order-sensitive 64-bit digest of every weight's bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |xs: &[T]| {
            for x in xs {
                h ^= x.bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3).rotate_left(5);
            }
        };
        eat(self.embedding.data());
        for l in &self.layers {
            eat(&l.attn_norm);
            eat(l.wq.data());
            eat(l.wk.data());
            eat(l.wv.data());
            eat(l.wo.data());
            eat(&l.mlp_norm);
            eat(l.w_up.data());
            eat(l.w_down.data());
        }
        eat(&self.final_norm);
        eat(self.w_out.data());
        h
    }

    /// Equivalent multi-head model: every query head gets its own copy of
    /// the KV head it shares under grouping.
    pub fn to_mha(&self) -> ModelWeights<T> {
        let dh = self.config.d_head();
        let group = self.config.group_size();
        let d = self.config.d_model;
        let widen = |w: &Matrix<T>| {
            let mut out = Matrix::zeros(d, d);
            for r in 0..d {
                for h in 0..self.config.n_q_heads {
                    let g = h / group;
                    for i in 0..dh {
                        out.set(r, h * dh + i, w.get(r, g * dh + i));
                    }
                }
            }
            out
        };
        let mut out = self.clone();
        out.config.n_kv_heads = self.config.n_q_heads;
        for l in &mut out.layers {
            l.wk = widen(&l.wk);
            l.wv = widen(&l.wv);
        }
        out
    }

    /// Little-endian dump: `u32` rank, `u64` dims, then raw elements, for
    /// each tensor in initialization order.
    pub fn write_dump<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut put = |dims: &[usize], xs: &[T]| -> std::io::Result<()> {
            w.write_all(&(dims.len() as u32).to_le_bytes())?;
            for &d in dims {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for x in xs {
                match T::BYTES {
                    4 => w.write_all(&(x.bits() as u32).to_le_bytes())?,
                    _ => w.write_all(&x.bits().to_le_bytes())?,
                }
            }
            Ok(())
        };
        let m = |x: &Matrix<T>| [x.rows(), x.cols()];
        put(&m(&self.embedding), self.embedding.data())?;
        for l in &self.layers {
            put(&[l.attn_norm.len()], &l.attn_norm)?;
            put(&m(&l.wq), l.wq.data())?;
            put(&m(&l.wk), l.wk.data())?;
            put(&m(&l.wv), l.wv.data())?;
            put(&m(&l.wo), l.wo.data())?;
            put(&[l.mlp_norm.len()], &l.mlp_norm)?;
            put(&m(&l.w_up), l.w_up.data())?;
            put(&m(&l.w_down), l.w_down.data())?;
        }
        put(&[self.final_norm.len()], &self.final_norm)?;
        put(&m(&self.w_out), self.w_out.data())
    }

    fn check_ids(&self, tokens: &[TokenId]) -> Result<()> {
        for &id in tokens {
            if id as usize >= self.config.vocab_size {
                return Err(Error::Vocabulary {
                    id,
                    vocab_size: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Logits for every position of one unpadded sequence under a causal mask.
    pub fn forward_full(&self, tokens: &[TokenId]) -> Result<Matrix<T>> {
        self.forward_full_counted(tokens, &CellCounter::new())
    }

    pub fn forward_full_counted(
        &self,
        tokens: &[TokenId],
        counter: &CellCounter,
    ) -> Result<Matrix<T>> {
        if tokens.is_empty() {
            return Err(Error::DegenerateInput("empty token sequence".into()));
        }
        self.check_ids(tokens)?;
        if tokens.contains(&self.config.pad_id()) {
            return Err(Error::DegenerateInput(
                "pad id inside a real sequence".into(),
            ));
        }
        let acct = Accountant::unlimited();
        let mut store = KvStore::new(&self.config, 1, tokens.len(), MemKind::FullSequence, &acct)?;
        let rows = [tokens.to_vec()];
        let positions = [(0..tokens.len()).collect::<Vec<_>>()];
        let input = StepInput {
            tokens: &rows,
            positions: &positions,
            logits_from: 0,
        };
        let mut out = self.forward_step(&input, &NoPrefix, &mut store, counter, false)?;
        Ok(out.pop().expect("one row"))
    }

    /// Processes `new_tokens` for a single sequence whose history lives in
    /// `prefix` (row 0) followed by `cache`. New K/V are appended to `cache`.
    pub fn forward_with_cache(
        &self,
        new_tokens: &[TokenId],
        prefix: &dyn PrefixView<T>,
        cache: &mut KvStore<T>,
        position_base: usize,
        counter: &CellCounter,
    ) -> Result<Matrix<T>> {
        if cache.rows() != 1 {
            return Err(Error::Shape(format!(
                "single-sequence cache has {} rows",
                cache.rows()
            )));
        }
        let expected = prefix.real_len(0) + cache.real_len(0);
        if position_base != expected {
            return Err(Error::Position {
                expected,
                got: position_base,
            });
        }
        let rows = [new_tokens.to_vec()];
        let positions = [(position_base..position_base + new_tokens.len()).collect::<Vec<_>>()];
        let input = StepInput {
            tokens: &rows,
            positions: &positions,
            logits_from: 0,
        };
        let mut out = self.forward_step(&input, prefix, cache, counter, false)?;
        Ok(out.pop().expect("one row"))
    }

    /// Batched forward of new tokens against optional prefix history and the
    /// rows' already filled `store` slots. Returns, per row, logits for
    /// new-token indices `logits_from..`; rows at pad positions stay zero.
    pub fn forward_step(
        &self,
        input: &StepInput<'_>,
        prefix: &dyn PrefixView<T>,
        store: &mut KvStore<T>,
        counter: &CellCounter,
        parallel: bool,
    ) -> Result<Vec<Matrix<T>>> {
        let cfg = &self.config;
        let n_rows = input.tokens.len();
        if input.positions.len() != n_rows || store.rows() != n_rows {
            return Err(Error::Shape(format!(
                "{} token rows, {} position rows, {} cache rows",
                n_rows,
                input.positions.len(),
                store.rows()
            )));
        }
        let n_new = input.tokens.first().map_or(0, Vec::len);
        let pad = cfg.pad_id();
        let d = cfg.d_model;
        let mut base_fill = Vec::with_capacity(n_rows);
        for (r, (toks, pos)) in input.tokens.iter().zip(input.positions).enumerate() {
            if toks.len() != n_new || pos.len() != n_new {
                return Err(Error::Shape(format!("row {r} is not {n_new} tokens wide")));
            }
            self.check_ids(toks)?;
            let fill = store.filled(0, r);
            if fill + n_new > store.capacity() {
                return Err(Error::Capacity {
                    what: "candidate cache",
                    requested: fill + n_new,
                    capacity: store.capacity(),
                });
            }
            base_fill.push(fill);
        }
        let real: Vec<Vec<bool>> = input
            .tokens
            .iter()
            .map(|row| row.iter().map(|&t| t != pad).collect())
            .collect();
        let real_idx: Vec<Vec<usize>> = real
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, &b)| b)
                    .map(|(t, _)| t)
                    .collect()
            })
            .collect();

        let mut hidden: Vec<Vec<T>> = input
            .tokens
            .iter()
            .map(|row| {
                let mut h = vec![T::zero(); n_new * d];
                for (t, &id) in row.iter().enumerate() {
                    if id != pad {
                        h[t * d..(t + 1) * d].copy_from_slice(self.embedding.row(id as usize));
                    }
                }
                h
            })
            .collect();

        let mut masks: Vec<BoolMatrix> = Vec::new();
        for layer in 0..cfg.n_layers {
            let lp = prefix.open_layer(layer, n_rows)?;
            let project =
                |r: usize| self.project_row(layer, &hidden[r], &input.positions[r], &real_idx[r]);
            let proj: Vec<RowProjections<T>> = if parallel {
                (0..n_rows).into_par_iter().map(project).collect()
            } else {
                (0..n_rows).map(project).collect()
            };
            for (r, p) in proj.iter().enumerate() {
                store.append_row(layer, r, &p.k, &p.v, &real[r])?;
            }
            if layer == 0 {
                masks = (0..n_rows)
                    .map(|r| row_mask(&lp, store, r, base_fill[r], n_new, &real_idx[r]))
                    .collect();
            }
            let store_ref: &KvStore<T> = store;
            let attend = |(r, h): (usize, &mut Vec<T>)| {
                self.attend_row(
                    layer,
                    r,
                    h,
                    &proj[r].q,
                    &lp,
                    store_ref,
                    &masks[r],
                    &real_idx[r],
                    base_fill[r] + n_new,
                    counter,
                )
            };
            if parallel {
                hidden.par_iter_mut().enumerate().try_for_each(attend)?;
            } else {
                hidden.iter_mut().enumerate().try_for_each(attend)?;
            }
        }

        let logits_from = input.logits_from.min(n_new);
        let head = |r: usize| -> Result<Matrix<T>> {
            let vocab = cfg.vocab_size;
            let mut out = Matrix::zeros(n_new - logits_from, vocab);
            let mut x = vec![T::zero(); d];
            for &t in real_idx[r].iter().filter(|&&t| t >= logits_from) {
                rms_norm_into(
                    &hidden[r][t * d..(t + 1) * d],
                    &self.final_norm,
                    T::from_f64(NORM_EPS),
                    &mut x,
                )?;
                vec_mat_into(&x, &self.w_out, out.row_mut(t - logits_from));
            }
            Ok(out)
        };
        if parallel {
            (0..n_rows).into_par_iter().map(head).collect()
        } else {
            (0..n_rows).map(head).collect()
        }
    }

    fn project_row(
        &self,
        layer: usize,
        h: &[T],
        positions: &[usize],
        real_idx: &[usize],
    ) -> RowProjections<T> {
        let cfg = &self.config;
        let lw = &self.layers[layer];
        let (d, dh, kvd) = (cfg.d_model, cfg.d_head(), cfg.kv_dim());
        let n = h.len() / d;
        let mut q = vec![T::zero(); n * d];
        let mut k = vec![T::zero(); n * kvd];
        let mut v = vec![T::zero(); n * kvd];
        let mut x = vec![T::zero(); d];
        for &t in real_idx {
            rms_norm_into(
                &h[t * d..(t + 1) * d],
                &lw.attn_norm,
                T::from_f64(NORM_EPS),
                &mut x,
            )
            .expect("attention norm");
            let qt = &mut q[t * d..(t + 1) * d];
            vec_mat_into(&x, &lw.wq, qt);
            for head in qt.chunks_exact_mut(dh) {
                rope_rotate(head, positions[t], &self.rope_freqs);
            }
            let kt = &mut k[t * kvd..(t + 1) * kvd];
            vec_mat_into(&x, &lw.wk, kt);
            for head in kt.chunks_exact_mut(dh) {
                rope_rotate(head, positions[t], &self.rope_freqs);
            }
            vec_mat_into(&x, &lw.wv, &mut v[t * kvd..(t + 1) * kvd]);
        }
        RowProjections { q, k, v }
    }

    #[allow(clippy::too_many_arguments)]
    fn attend_row(
        &self,
        layer: usize,
        row: usize,
        h: &mut [T],
        q: &[T],
        lp: &LayerPrefix<'_, T>,
        store: &KvStore<T>,
        mask: &BoolMatrix,
        real_idx: &[usize],
        cand_len: usize,
        counter: &CellCounter,
    ) -> Result<()> {
        if real_idx.is_empty() {
            return Ok(());
        }
        let cfg = &self.config;
        let lw = &self.layers[layer];
        let (d, dh) = (cfg.d_model, cfg.d_head());
        let group = cfg.group_size();
        let nq = real_idx.len();
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let block = store.layer(layer);
        let mut concat = vec![T::zero(); nq * d];
        let mut qh = Matrix::zeros(nq, dh);
        for head in 0..cfg.n_q_heads {
            let g = head / group;
            for (i, &t) in real_idx.iter().enumerate() {
                qh.row_mut(i)
                    .copy_from_slice(&q[t * d + head * dh..t * d + (head + 1) * dh]);
            }
            let keys =
                SegmentedRows::new(lp.keys(row, g), &block.keys(row, g)[..cand_len * dh], dh);
            let vals = SegmentedRows::new(
                lp.values(row, g),
                &block.values(row, g)[..cand_len * dh],
                dh,
            );
            let out = masked_attention(&qh, &keys, &vals, mask, scale, counter)?;
            for i in 0..nq {
                concat[i * d + head * dh..i * d + (head + 1) * dh].copy_from_slice(out.row(i));
            }
        }
        let hidden_mlp = MLP_EXPANSION * d;
        let mut o = vec![T::zero(); d];
        let mut x = vec![T::zero(); d];
        let mut up = vec![T::zero(); hidden_mlp];
        for (i, &t) in real_idx.iter().enumerate() {
            let ht = &mut h[t * d..(t + 1) * d];
            o.fill(T::zero());
            vec_mat_into(&concat[i * d..(i + 1) * d], &lw.wo, &mut o);
            for (a, &b) in ht.iter_mut().zip(&o) {
                *a = *a + b;
            }
            rms_norm_into(ht, &lw.mlp_norm, T::from_f64(NORM_EPS), &mut x)?;
            up.fill(T::zero());
            vec_mat_into(&x, &lw.w_up, &mut up);
            for u in up.iter_mut() {
                *u = *u / (T::one() + (-*u).exp());
            }
            o.fill(T::zero());
            vec_mat_into(&up, &lw.w_down, &mut o);
            for (a, &b) in ht.iter_mut().zip(&o) {
                *a = *a + b;
            }
        }
        Ok(())
    }
}

/// Visibility of `[prefix slots | candidate slots]` for the row's real new tokens.
fn row_mask<T: Element>(
    lp: &LayerPrefix<'_, T>,
    store: &KvStore<T>,
    row: usize,
    base_fill: usize,
    n_new: usize,
    real_idx: &[usize],
) -> BoolMatrix {
    let p = lp.slots();
    let valid = lp.valid(row);
    let cand_real = store.real(row);
    let cand_len = base_fill + n_new;
    BoolMatrix::from_fn(real_idx.len(), p + cand_len, |i, j| {
        if j < p {
            valid[j]
        } else {
            let s = j - p;
            cand_real[s] && s <= base_fill + real_idx[i]
        }
    })
}

/// Sum over masked rows of `-log softmax(logits)[target]`, accumulated in
/// f64 in row order.
pub fn target_nll<T: Element>(logits: &[&[T]], targets: &[TokenId], mask: &[bool]) -> Result<f64> {
    if logits.len() != targets.len() || mask.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} logit rows, {} targets, {} mask entries",
            logits.len(),
            targets.len(),
            mask.len()
        )));
    }
    let mut total = 0.0f64;
    let mut any = false;
    for ((row, &t), &m) in logits.iter().zip(targets).zip(mask) {
        if !m {
            continue;
        }
        any = true;
        if t as usize >= row.len() {
            return Err(Error::Vocabulary {
                id: t,
                vocab_size: row.len(),
            });
        }
        total += token_nll(row, t);
    }
    if !any {
        return Err(Error::EmptyTarget);
    }
    Ok(total)
}

/// `-log softmax(row)[target]` in f64.
pub fn token_nll<T: Element>(row: &[T], target: TokenId) -> f64 {
    let max = row
        .iter()
        .map(|x| x.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0f64;
    for x in row {
        sum += (x.as_f64() - max).exp();
    }
    max + sum.ln() - row[target as usize].as_f64()
}

/// Index of the largest logit, lowest index on ties, never the pad id.
pub fn argmax_token<T: Element>(row: &[T], pad: TokenId) -> TokenId {
    let mut best = 0usize;
    for (i, x) in row.iter().enumerate() {
        if i as TokenId != pad && (best as TokenId == pad || *x > row[best]) {
            best = i;
        }
    }
    best as TokenId
}

/// Convenience: a fresh single-row store for incremental decoding.
pub fn single_row_store<T: Element>(
    weights: &ModelWeights<T>,
    capacity: usize,
    accountant: &Arc<Accountant>,
) -> Result<KvStore<T>> {
    KvStore::new(
        weights.config(),
        1,
        capacity,
        MemKind::Candidate,
        accountant,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_q_heads: 4,
            n_kv_heads: 2,
            seed,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = ModelWeights::<f32>::init(&small(1)).unwrap();
        let b = ModelWeights::<f32>::init(&small(1)).unwrap();
        let c = ModelWeights::<f32>::init(&small(2)).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a, b);
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn gqa_projection_shapes() {
        let cfg = ModelConfig {
            d_model: 64,
            n_q_heads: 8,
            n_kv_heads: 2,
            ..small(0)
        };
        let w = ModelWeights::<f32>::init(&cfg).unwrap();
        assert_eq!(w.layers[0].wk.cols(), 2 * 8);
        assert_eq!(w.layers[0].wv.cols(), 2 * 8);
        assert_eq!(w.layers[0].wq.cols(), 64);
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = ModelConfig {
            n_q_heads: 4,
            n_kv_heads: 3,
            ..small(0)
        };
        match bad.validate() {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "model.n_kv_heads"),
            other => panic!("{other:?}"),
        }
        let odd = ModelConfig {
            d_model: 12,
            n_q_heads: 4,
            n_kv_heads: 1,
            ..small(0)
        };
        assert!(odd.validate().is_err());
    }

    #[test]
    fn forward_full_minimal_and_errors() {
        let w = ModelWeights::<f32>::init(&small(3)).unwrap();
        let l = w.forward_full(&[5]).unwrap();
        assert_eq!((l.rows(), l.cols()), (1, 257));
        assert!(matches!(
            w.forward_full(&[300]),
            Err(Error::Vocabulary { id: 300, .. })
        ));
        assert!(w.forward_full(&[]).is_err());
        assert!(w.forward_full(&[1, 256]).is_err());
    }

    #[test]
    fn target_nll_uniform_cases() {
        let zeros = vec![0.0f32; 16];
        let rows: Vec<&[f32]> = vec![&zeros; 3];
        let nll = target_nll(&rows, &[1, 7, 15], &[true; 3]).unwrap();
        assert!((nll - 3.0 * 16f64.ln()).abs() < 1e-4);
        let bin = [0.0f64, 0.0];
        let nll = target_nll(&[&bin[..]], &[1], &[true]).unwrap();
        assert!((nll - 2f64.ln()).abs() < 1e-6);
        assert_eq!(
            target_nll(&[&bin[..]], &[1], &[false]),
            Err(Error::EmptyTarget)
        );
    }

    #[test]
    fn forward_with_cache_rejects_wrong_position_base() {
        let w = ModelWeights::<f32>::init(&small(4)).unwrap();
        let acct = Accountant::unlimited();
        let mut store = single_row_store(&w, 8, &acct).unwrap();
        let c = CellCounter::new();
        w.forward_with_cache(&[1, 2, 3], &NoPrefix, &mut store, 0, &c)
            .unwrap();
        let err = w
            .forward_with_cache(&[4], &NoPrefix, &mut store, 2, &c)
            .unwrap_err();
        assert_eq!(
            err,
            Error::Position {
                expected: 3,
                got: 2
            }
        );
    }

    #[test]
    fn argmax_skips_pad_and_prefers_low_index() {
        assert_eq!(argmax_token(&[1.0f32, 3.0, 3.0, 9.0], 3), 1);
        assert_eq!(argmax_token(&[5.0f32, 1.0], 0), 1);
    }

    #[test]
    fn dump_has_expected_length() {
        let w = ModelWeights::<f32>::init(&small(5)).unwrap();
        let mut buf = Vec::new();
        w.write_dump(&mut buf).unwrap();
        // d_model 16, d_head 4, kv_dim 8: per layer two gains plus
        // wq 256, wk 128, wv 128, wo 256, up 1024, down 1024.
        let per_layer = 2 * 16 + 256 + 128 + 128 + 256 + 1024 + 1024;
        let elems = 257 * 16 + 2 * per_layer + 16 + 16 * 257;
        // 14 matrices with (rank, 2 dims), 5 gain vectors with (rank, 1 dim).
        let headers = 14 * (4 + 16) + 5 * (4 + 8);
        assert_eq!(buf.len(), elems * 4 + headers);
    }
}
