//! Batched candidate evaluation under each cache strategy.

use std::sync::Arc;

use crate::align::{position_ids, AlignedBatch};
use crate::bench::accountant::{Accountant, MemKind};
use crate::bench::Counters;
use crate::error::{Error, Result};
use crate::kvcache::{
    build_prefix_cache, expand_standard, CacheStrategy, KvStore, NoPrefix, PrefixAccess,
    PrefixCache, PrefixView, PskvMode,
};
use crate::model::{target_nll, ModelWeights, StepInput};
use crate::numerics::{Element, Matrix};

/// Scores candidate batches for one run. Cached strategies build the prefix
/// cache once at construction; StandardKV then replicates it for
/// `rows_per_prompt` rows and keeps only the replicated copy.
pub struct Evaluator<'a, T: Element> {
    weights: &'a ModelWeights<T>,
    strategy: CacheStrategy,
    mode: PskvMode,
    accountant: Arc<Accountant>,
    counters: &'a Counters,
    prefix: Option<PrefixCache<T>>,
    observed_prefix_bytes: usize,
    parallel: bool,
}

impl<'a, T: Element> Evaluator<'a, T> {
    pub fn new(
        weights: &'a ModelWeights<T>,
        batch: &AlignedBatch,
        strategy: CacheStrategy,
        mode: PskvMode,
        rows_per_prompt: usize,
        accountant: &Arc<Accountant>,
        counters: &'a Counters,
    ) -> Result<Self> {
        let prefix = if strategy.is_cached() {
            let prompts: Vec<_> = (0..batch.n_prompts())
                .map(|p| batch.prompt_tokens(p))
                .collect();
            let compact =
                build_prefix_cache(weights, &prompts, batch.n_p_max(), accountant, counters)?;
            Some(match strategy {
                CacheStrategy::Standard => {
                    expand_standard(compact, rows_per_prompt.max(1), accountant)?
                }
                _ => compact,
            })
        } else {
            None
        };
        Ok(Self {
            weights,
            strategy,
            mode,
            accountant: Arc::clone(accountant),
            counters,
            prefix,
            observed_prefix_bytes: 0,
            parallel: false,
        })
    }

    pub fn parallel(mut self, on: bool) -> Self {
        self.parallel = on;
        self
    }

    pub fn strategy(&self) -> CacheStrategy {
        self.strategy
    }

    pub fn prefix(&self) -> Option<&PrefixCache<T>> {
        self.prefix.as_ref()
    }

    #[doc(hidden)]
    pub fn prefix_mut(&mut self) -> Option<&mut PrefixCache<T>> {
        self.prefix.as_mut()
    }

    /// Largest prefix-resident byte total seen while candidates were evaluated.
    pub fn observed_prefix_bytes(&self) -> usize {
        self.observed_prefix_bytes
    }

    /// Logits for decode-band indices `from..L_dec` of every row (suffix then
    /// target columns). Rows at pad positions are zero.
    pub fn forward(&mut self, batch: &AlignedBatch, from: usize) -> Result<Vec<Matrix<T>>> {
        let cfg = self.weights.config();
        let positions = position_ids(batch);
        let l_dec = batch.decode_len();
        let n_p = batch.n_p_max();
        let rows = batch.rows();
        match &self.prefix {
            None => {
                let mut store = KvStore::layer_scoped(
                    cfg,
                    rows,
                    batch.width(),
                    MemKind::FullSequence,
                    &self.accountant,
                )?;
                let input = StepInput {
                    tokens: batch.tokens(),
                    positions: &positions,
                    logits_from: n_p + from,
                };
                let out = self.step(&input, &NoPrefix, &mut store)?;
                self.counters
                    .add_candidate_tokens(real_tokens(batch.tokens(), cfg.pad_id()));
                Ok(out)
            }
            Some(prefix) => {
                let access = match self.strategy {
                    CacheStrategy::Standard => PrefixAccess::duplicated(prefix, &row_slots(batch))?,
                    _ => PrefixAccess::shared(prefix, batch.prompt_indices(), self.mode)?,
                };
                let tokens: Vec<Vec<_>> =
                    batch.tokens().iter().map(|r| r[n_p..].to_vec()).collect();
                let pos: Vec<Vec<usize>> = positions.iter().map(|r| r[n_p..].to_vec()).collect();
                let mut store =
                    KvStore::new(cfg, rows, l_dec, MemKind::Candidate, &self.accountant)?;
                let input = StepInput {
                    tokens: &tokens,
                    positions: &pos,
                    logits_from: from,
                };
                let out = self.step(&input, &access, &mut store)?;
                self.observed_prefix_bytes = self
                    .observed_prefix_bytes
                    .max(access.observed_prefix_bytes());
                self.counters
                    .add_candidate_tokens(real_tokens(&tokens, cfg.pad_id()));
                Ok(out)
            }
        }
    }

    fn step(
        &self,
        input: &StepInput<'_>,
        prefix: &dyn PrefixView<T>,
        store: &mut KvStore<T>,
    ) -> Result<Vec<Matrix<T>>> {
        self.weights.forward_step(
            input,
            prefix,
            store,
            &self.counters.attention_cells,
            self.parallel,
        )
    }

    /// Summed target NLL of every row, in row order.
    pub fn losses(&mut self, batch: &AlignedBatch) -> Result<Vec<f64>> {
        let n_s = batch.suffix_len();
        let logits = self.forward(batch, n_s - 1)?;
        let span = batch.target_span();
        (0..batch.rows())
            .map(|r| {
                let rows: Vec<&[T]> = (0..batch.n_t_max()).map(|i| logits[r].row(i)).collect();
                target_nll(
                    &rows,
                    &batch.row(r)[span.clone()],
                    &batch.target_mask(r)[span.clone()],
                )
            })
            .collect()
    }
}

/// One-shot evaluation: builds whatever prefix cache the strategy needs,
/// scores the batch, and releases everything.
pub fn evaluate_candidates<T: Element>(
    weights: &ModelWeights<T>,
    batch: &AlignedBatch,
    strategy: CacheStrategy,
    accountant: &Arc<Accountant>,
    counters: &Counters,
) -> Result<Vec<f64>> {
    let per = rows_per_prompt(batch)?;
    let mut ev = Evaluator::new(
        weights,
        batch,
        strategy,
        PskvMode::IndexMapped,
        per,
        accountant,
        counters,
    )?;
    ev.losses(batch)
}

/// Largest number of rows any prompt owns in the batch.
pub fn rows_per_prompt(batch: &AlignedBatch) -> Result<usize> {
    let mut count = vec![0usize; batch.n_prompts()];
    for &p in batch.prompt_indices() {
        count[p] += 1;
    }
    match count.iter().max() {
        Some(&m) if m > 0 => Ok(m),
        _ => Err(Error::DegenerateInput("batch has no rows".into())),
    }
}

/// (prompt, index within that prompt's rows) for every row.
pub(crate) fn row_slots(batch: &AlignedBatch) -> Vec<(usize, usize)> {
    slots_of(batch.prompt_indices(), batch.n_prompts())
}

pub(crate) fn slots_of(prompt_of: &[usize], n_prompts: usize) -> Vec<(usize, usize)> {
    let mut seen = vec![0usize; n_prompts];
    prompt_of
        .iter()
        .map(|&p| {
            seen[p] += 1;
            (p, seen[p] - 1)
        })
        .collect()
}

pub(crate) fn real_tokens(rows: &[Vec<u32>], pad: u32) -> u64 {
    rows.iter().flatten().filter(|&&t| t != pad).count() as u64
}
