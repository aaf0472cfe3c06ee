//! Suffix-centric batch layout.
//!
//! Prompts are left-padded and targets right-padded so that every row's
//! suffix occupies the same column band `[N_p_max, N_p_max + N_s)`. The
//! suffixes of a whole batch then form one dense `(rows × N_s)` matrix.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::model::{Role, TokenId, TokenSeq};
use crate::rng::DetRng;

/// Byte value of `!`.
pub const DEFAULT_INIT_TOKEN: TokenId = 33;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignOptions {
    pub pad_id: TokenId,
    pub init_token: TokenId,
    /// Accept zero-length prompts. Only the complexity harness needs this.
    pub allow_empty_prompts: bool,
}

impl AlignOptions {
    pub fn new(pad_id: TokenId) -> Self {
        Self {
            pad_id,
            init_token: DEFAULT_INIT_TOKEN,
            allow_empty_prompts: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignedBatch {
    tokens: Vec<Vec<TokenId>>,
    attn_mask: Vec<Vec<bool>>,
    target_mask: Vec<Vec<bool>>,
    prompt_index: Vec<usize>,
    prefix_lens: Vec<usize>,
    target_lens: Vec<usize>,
    n_p_max: usize,
    n_s: usize,
    n_t_max: usize,
    pad_id: TokenId,
}

pub fn align_batch(
    prompts: &[TokenSeq],
    targets: &[TokenSeq],
    suffix_len: usize,
    pad_id: TokenId,
) -> Result<AlignedBatch> {
    align_batch_with(prompts, targets, suffix_len, &AlignOptions::new(pad_id))
}

pub fn align_batch_with(
    prompts: &[TokenSeq],
    targets: &[TokenSeq],
    suffix_len: usize,
    opts: &AlignOptions,
) -> Result<AlignedBatch> {
    if prompts.is_empty() {
        return Err(Error::DegenerateInput("no prompts".into()));
    }
    if prompts.len() != targets.len() {
        return Err(Error::DegenerateInput(format!(
            "{} prompts but {} targets",
            prompts.len(),
            targets.len()
        )));
    }
    if suffix_len == 0 {
        return Err(Error::DegenerateInput(
            "suffix length must be at least 1".into(),
        ));
    }
    if opts.init_token == opts.pad_id {
        return Err(Error::DegenerateInput(
            "suffix init token equals the pad id".into(),
        ));
    }
    for (i, (p, t)) in prompts.iter().zip(targets).enumerate() {
        if p.is_empty() && !opts.allow_empty_prompts {
            return Err(Error::DegenerateInput(format!("prompt {i} is empty")));
        }
        if t.is_empty() {
            return Err(Error::DegenerateInput(format!("target {i} is empty")));
        }
        if p.ids.contains(&opts.pad_id) || t.ids.contains(&opts.pad_id) {
            return Err(Error::DegenerateInput(format!(
                "pair {i} contains the pad id"
            )));
        }
    }
    let n_p_max = prompts.iter().map(TokenSeq::len).max().unwrap_or(0);
    let n_t_max = targets.iter().map(TokenSeq::len).max().unwrap_or(0);
    let width = n_p_max + suffix_len + n_t_max;
    let mut batch = AlignedBatch {
        tokens: Vec::with_capacity(prompts.len()),
        attn_mask: Vec::with_capacity(prompts.len()),
        target_mask: Vec::with_capacity(prompts.len()),
        prompt_index: (0..prompts.len()).collect(),
        prefix_lens: prompts.iter().map(TokenSeq::len).collect(),
        target_lens: targets.iter().map(TokenSeq::len).collect(),
        n_p_max,
        n_s: suffix_len,
        n_t_max,
        pad_id: opts.pad_id,
    };
    for (p, t) in prompts.iter().zip(targets) {
        let mut row = Vec::with_capacity(width);
        row.extend(std::iter::repeat_n(opts.pad_id, n_p_max - p.len()));
        row.extend_from_slice(&p.ids);
        row.extend(std::iter::repeat_n(opts.init_token, suffix_len));
        row.extend_from_slice(&t.ids);
        row.extend(std::iter::repeat_n(opts.pad_id, n_t_max - t.len()));
        let attn: Vec<bool> = row.iter().map(|&x| x != opts.pad_id).collect();
        let tstart = n_p_max + suffix_len;
        let tmask = (0..width)
            .map(|c| c >= tstart && c < tstart + t.len())
            .collect();
        batch.tokens.push(row);
        batch.attn_mask.push(attn);
        batch.target_mask.push(tmask);
    }
    Ok(batch)
}

/// Replicates each prompt's row `rows / B` times and writes one candidate
/// suffix per row. Candidate `i` belongs to prompt `i / (rows / B)`.
pub fn write_suffix_candidates(
    batch: &AlignedBatch,
    suffixes: &[Vec<TokenId>],
) -> Result<AlignedBatch> {
    let b = batch.n_prompts();
    if suffixes.is_empty() || !suffixes.len().is_multiple_of(b) {
        return Err(Error::Shape(format!(
            "{} suffix rows for {b} prompts",
            suffixes.len()
        )));
    }
    let per = suffixes.len() / b;
    let base_rows: Vec<usize> = (0..b)
        .map(|p| {
            batch
                .prompt_index
                .iter()
                .position(|&q| q == p)
                .expect("every prompt has a row")
        })
        .collect();
    let span = batch.suffix_span();
    let mut out = AlignedBatch {
        tokens: Vec::with_capacity(suffixes.len()),
        attn_mask: Vec::with_capacity(suffixes.len()),
        target_mask: Vec::with_capacity(suffixes.len()),
        prompt_index: Vec::with_capacity(suffixes.len()),
        ..batch.clone()
    };
    for (i, s) in suffixes.iter().enumerate() {
        if s.len() != batch.n_s {
            return Err(Error::Shape(format!(
                "suffix {i} has {} tokens, expected {}",
                s.len(),
                batch.n_s
            )));
        }
        if s.contains(&batch.pad_id) {
            return Err(Error::DegenerateInput(format!(
                "suffix {i} contains the pad id"
            )));
        }
        let p = i / per;
        let src = base_rows[p];
        let mut row = batch.tokens[src].clone();
        row[span.clone()].copy_from_slice(s);
        out.tokens.push(row);
        out.attn_mask.push(batch.attn_mask[src].clone());
        out.target_mask.push(batch.target_mask[src].clone());
        out.prompt_index.push(p);
    }
    Ok(out)
}

/// Seeded prompt/target pairs of fixed lengths over the non-pad vocabulary.
pub fn synthetic_pairs(
    seed: u64,
    n_prompts: usize,
    prefix_len: usize,
    target_len: usize,
    vocab_size: usize,
) -> (Vec<TokenSeq>, Vec<TokenSeq>) {
    let mut rng = DetRng::new(seed);
    let real = vocab_size.saturating_sub(1).max(1);
    let mut draw = |n: usize, role: Role| {
        TokenSeq::new((0..n).map(|_| rng.below(real) as TokenId).collect(), role)
    };
    let mut prompts = Vec::with_capacity(n_prompts);
    let mut targets = Vec::with_capacity(n_prompts);
    for _ in 0..n_prompts {
        prompts.push(draw(prefix_len, Role::Prefix));
        targets.push(draw(target_len, Role::Target));
    }
    (prompts, targets)
}

/// Position ids: the j-th real token of a row gets position j; pads get 0.
pub fn position_ids(batch: &AlignedBatch) -> Vec<Vec<usize>> {
    batch
        .attn_mask
        .iter()
        .map(|m| positions_for_mask(m))
        .collect()
}

pub(crate) fn positions_for_mask(mask: &[bool]) -> Vec<usize> {
    let mut next = 0;
    mask.iter()
        .map(|&real| {
            if real {
                next += 1;
                next - 1
            } else {
                0
            }
        })
        .collect()
}

impl AlignedBatch {
    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    pub fn width(&self) -> usize {
        self.n_p_max + self.n_s + self.n_t_max
    }

    pub fn n_prompts(&self) -> usize {
        self.prefix_lens.len()
    }

    pub fn n_p_max(&self) -> usize {
        self.n_p_max
    }

    pub fn suffix_len(&self) -> usize {
        self.n_s
    }

    pub fn n_t_max(&self) -> usize {
        self.n_t_max
    }

    /// Columns past the prefix band: suffix plus target (`L_dec`).
    pub fn decode_len(&self) -> usize {
        self.n_s + self.n_t_max
    }

    pub fn pad_id(&self) -> TokenId {
        self.pad_id
    }

    pub fn suffix_span(&self) -> Range<usize> {
        self.n_p_max..self.n_p_max + self.n_s
    }

    pub fn target_span(&self) -> Range<usize> {
        self.n_p_max + self.n_s..self.width()
    }

    pub fn tokens(&self) -> &[Vec<TokenId>] {
        &self.tokens
    }

    pub fn row(&self, r: usize) -> &[TokenId] {
        &self.tokens[r]
    }

    pub fn attn_mask(&self, r: usize) -> &[bool] {
        &self.attn_mask[r]
    }

    pub fn target_mask(&self, r: usize) -> &[bool] {
        &self.target_mask[r]
    }

    pub fn prompt_of(&self, r: usize) -> usize {
        self.prompt_index[r]
    }

    pub fn prompt_indices(&self) -> &[usize] {
        &self.prompt_index
    }

    /// True prefix length of the row; also the position of its first suffix token.
    pub fn position_base(&self, r: usize) -> usize {
        self.prefix_lens[self.prompt_index[r]]
    }

    pub fn prefix_lens(&self) -> &[usize] {
        &self.prefix_lens
    }

    pub fn target_lens(&self) -> &[usize] {
        &self.target_lens
    }

    pub fn target_len_of_row(&self, r: usize) -> usize {
        self.target_lens[self.prompt_index[r]]
    }

    pub fn suffix(&self, r: usize) -> &[TokenId] {
        &self.tokens[r][self.suffix_span()]
    }

    /// Dense `(rows × N_s)` suffix matrix.
    pub fn suffix_matrix(&self) -> Vec<Vec<TokenId>> {
        (0..self.rows()).map(|r| self.suffix(r).to_vec()).collect()
    }

    /// Unpadded prompt tokens of a prompt.
    pub fn prompt_tokens(&self, prompt: usize) -> Vec<TokenId> {
        let r = self
            .prompt_index
            .iter()
            .position(|&p| p == prompt)
            .expect("prompt has a row");
        self.tokens[r][self.n_p_max - self.prefix_lens[prompt]..self.n_p_max].to_vec()
    }

    /// Unpadded target tokens of a prompt.
    pub fn target_tokens(&self, prompt: usize) -> Vec<TokenId> {
        let r = self
            .prompt_index
            .iter()
            .position(|&p| p == prompt)
            .expect("prompt has a row");
        let start = self.n_p_max + self.n_s;
        self.tokens[r][start..start + self.target_lens[prompt]].to_vec()
    }

    /// All real tokens of a row, in order.
    pub fn unpadded_row(&self, r: usize) -> Vec<TokenId> {
        self.tokens[r]
            .iter()
            .zip(&self.attn_mask[r])
            .filter(|(_, &m)| m)
            .map(|(&t, _)| t)
            .collect()
    }

    pub fn pad_count(&self) -> usize {
        self.attn_mask.iter().flatten().filter(|&&m| !m).count()
    }
}
