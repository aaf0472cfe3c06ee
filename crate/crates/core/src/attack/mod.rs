//! Forward-only suffix search: propose → evaluate → select.
//!
//! Two proposal schemes share the evaluation machinery: random single-token
//! substitution (width `K·q`, teacher-forced scoring of the whole
//! suffix+target band) and beam extension (suffix grown one token at a time
//! with incremental decoding against the cached history).

mod beam;
mod eval;

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::align::{
    align_batch_with, write_suffix_candidates, AlignOptions, AlignedBatch, DEFAULT_INIT_TOKEN,
};
use crate::bench::accountant::{Accountant, AccountantSnapshot};
use crate::bench::{
    cells_per_pair, predicted_beam_cells, predicted_cells_ragged, CounterSnapshot, Counters,
};
use crate::error::{Error, Result};
use crate::kvcache::{cache_bytes, CacheStrategy, PskvMode};
use crate::model::{argmax_token, token_nll, ModelWeights, TokenId, TokenSeq};
use crate::numerics::{CellCounter, Element};
use crate::rng::DetRng;

pub use beam::{propose_beam_extensions, topk_tokens, BeamChild};
pub use eval::{evaluate_candidates, rows_per_prompt, Evaluator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackAlgo {
    #[default]
    RandomSubstitution,
    Beam,
}

impl AttackAlgo {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackAlgo::RandomSubstitution => "random_substitution",
            AttackAlgo::Beam => "beam",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// `E`.
    #[serde(alias = "E")]
    pub iterations: usize,
    /// `K`.
    #[serde(alias = "K")]
    pub survivors: usize,
    /// `q`.
    #[serde(alias = "q")]
    pub proposals_per_survivor: usize,
    pub suffix_len: usize,
    pub algo: AttackAlgo,
    pub beam_k1: usize,
    pub beam_k2: usize,
    /// Mean per-token target NLL (nats) at or below which an attack succeeds.
    pub success_threshold: f64,
    pub seed: u64,
    pub init_token: TokenId,
    /// Stop once every prompt succeeds. Off by default so runs have a fixed length.
    pub early_stop: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            iterations: 50,
            survivors: 4,
            proposals_per_survivor: 16,
            suffix_len: 20,
            algo: AttackAlgo::RandomSubstitution,
            beam_k1: 15,
            beam_k2: 15,
            success_threshold: std::f64::consts::LN_2,
            seed: 0,
            init_token: DEFAULT_INIT_TOKEN,
            early_stop: false,
        }
    }
}

impl AttackConfig {
    /// Candidates per prompt per iteration.
    pub fn width(&self) -> usize {
        match self.algo {
            AttackAlgo::RandomSubstitution => self.survivors * self.proposals_per_survivor,
            AttackAlgo::Beam => self.beam_k1 * self.beam_k2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.survivors == 0 || self.proposals_per_survivor == 0 {
            return Err(Error::invalid(
                "attack.survivors",
                "K and q must both be at least 1",
            ));
        }
        if self.beam_k1 == 0 || self.beam_k2 == 0 {
            return Err(Error::invalid(
                "attack.beam_k1",
                "beam widths must be at least 1",
            ));
        }
        if self.suffix_len == 0 {
            return Err(Error::invalid("attack.suffix_len", "must be at least 1"));
        }
        if self.success_threshold.is_nan() || self.success_threshold <= 0.0 {
            return Err(Error::invalid(
                "attack.success_threshold",
                "must be positive",
            ));
        }
        Ok(())
    }
}

/// A suffix with its summed target NLL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub suffix: Vec<TokenId>,
    pub loss: f64,
}

/// Search state of one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackState {
    pub iteration: usize,
    /// Ascending by loss.
    pub survivors: Vec<Scored>,
    pub best: Scored,
}

impl AttackState {
    pub fn new(initial: Scored) -> Self {
        Self {
            iteration: 0,
            survivors: vec![initial.clone()],
            best: initial,
        }
    }

    /// Replaces the survivors and folds them into best-ever. Returns whether
    /// best-ever improved.
    pub fn advance(&mut self, survivors: Vec<Scored>) -> bool {
        self.iteration += 1;
        let improved = match survivors.first() {
            Some(top) if top.loss < self.best.loss => {
                self.best = top.clone();
                true
            }
            _ => false,
        };
        self.survivors = survivors;
        improved
    }
}

/// `K·q` proposals. Proposal `j` copies survivor `(j / q) mod |survivors|`
/// (round-robin: each survivor spawns `q` children) and replaces one
/// uniformly drawn position with a uniformly drawn different non-pad token.
pub fn propose_random_substitution(
    state: &AttackState,
    k: usize,
    q: usize,
    vocab_size: usize,
    rng: &mut DetRng,
) -> Result<Vec<Vec<TokenId>>> {
    if vocab_size < 3 {
        return Err(Error::DegenerateVocabulary(vocab_size));
    }
    if state.survivors.is_empty() {
        return Err(Error::DegenerateInput("no survivors to mutate".into()));
    }
    let n = state.survivors.len();
    // Ids 0..vocab-1 are real; the last id is the pad.
    let choices = vocab_size - 2;
    (0..k * q)
        .map(|j| {
            let mut s = state.survivors[(j / q) % n].suffix.clone();
            if s.is_empty() {
                return Err(Error::DegenerateInput("empty suffix".into()));
            }
            let pos = rng.below(s.len());
            let cur = s[pos] as usize;
            let mut t = rng.below(choices);
            if t >= cur {
                t += 1;
            }
            s[pos] = t as TokenId;
            Ok(s)
        })
        .collect()
}

/// Indices of the `k` lowest losses; ties go to the lower index.
pub fn select_topk(losses: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..losses.len()).collect();
    idx.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessCheck {
    pub success: bool,
    pub exact_match: bool,
    pub mean_nll: f64,
    pub per_token_nll: Vec<f64>,
}

/// Success iff the mean per-token target NLL is at most `tau`, or greedy
/// decoding after prompt⊕suffix reproduces the whole target. Greedy decoding
/// reproduces the target exactly when the argmax after every target prefix
/// is the next target token, so one teacher-forced pass decides both.
pub fn check_success<T: Element>(
    weights: &ModelWeights<T>,
    prompt: &[TokenId],
    suffix: &[TokenId],
    target: &[TokenId],
    tau: f64,
) -> Result<SuccessCheck> {
    if target.is_empty() {
        return Err(Error::EmptyTarget);
    }
    let ctx = prompt.len() + suffix.len();
    if ctx == 0 {
        return Err(Error::DegenerateInput("empty context".into()));
    }
    let seq: Vec<TokenId> = prompt.iter().chain(suffix).chain(target).copied().collect();
    let logits = weights.forward_full_counted(&seq, &CellCounter::new())?;
    let pad = weights.config().pad_id();
    let mut per_token = Vec::with_capacity(target.len());
    let mut exact = true;
    for (j, &t) in target.iter().enumerate() {
        let row = logits.row(ctx + j - 1);
        per_token.push(token_nll(row, t));
        exact &= argmax_token(row, pad) == t;
    }
    let mut sum = 0.0;
    for x in &per_token {
        sum += x;
    }
    let mean = sum / per_token.len() as f64;
    Ok(SuccessCheck {
        success: exact || mean <= tau,
        exact_match: exact,
        mean_nll: mean,
        per_token_nll: per_token,
    })
}

/// Execution knobs that do not change what is computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    pub pskv_mode: PskvMode,
    /// Evaluate candidate rows on the rayon pool.
    pub parallel: bool,
    /// Byte budget for the accountant; exceeding it is a simulated OOM.
    pub budget: Option<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            pskv_mode: PskvMode::IndexMapped,
            parallel: false,
            budget: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptOutcome {
    pub best_suffix: Vec<TokenId>,
    pub best_loss: f64,
    pub success: bool,
    pub exact_match: bool,
    pub mean_nll: f64,
    /// First iteration whose best-ever suffix passed the success check.
    pub success_iteration: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Sum over prompts of best-ever loss.
    pub best_loss: f64,
    /// Survivors of each prompt after this iteration, ascending by loss.
    pub survivors: Vec<Vec<Scored>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub strategy: CacheStrategy,
    pub algo: AttackAlgo,
    pub width: usize,
    pub n_prompts: usize,
    pub n_p_max: usize,
    pub l_dec: usize,
    pub iterations_run: usize,
    /// Best-ever loss (summed over prompts), index 0 being the initial suffix.
    pub best_loss_curve: Vec<f64>,
    pub trajectory: Vec<IterationRecord>,
    pub prompts: Vec<PromptOutcome>,
    pub success: bool,
    pub counters: CounterSnapshot,
    /// Predicted attention cells (all layers and query heads).
    pub cells_predicted: u64,
    pub peak_bytes: usize,
    pub prefix_bytes: usize,
    pub predicted_bytes: usize,
    /// Transient bytes the strategy may hold beyond `predicted_bytes`.
    pub overhead_allowance: usize,
    pub memory: AccountantSnapshot,
    pub oom: bool,
    pub oom_detail: Option<String>,
    pub wall_ms: f64,
}

impl AttackReport {
    pub fn cells_match(&self) -> bool {
        self.oom || self.counters.attention_cells == self.cells_predicted
    }

    pub fn bytes_within_model(&self) -> bool {
        self.oom || self.peak_bytes <= self.predicted_bytes + self.overhead_allowance
    }
}

/// Mutable run record shared by both algorithms so an OOM mid-run still
/// yields a report.
pub(crate) struct Progress {
    pub curve: Vec<f64>,
    pub trajectory: Vec<IterationRecord>,
    pub states: Vec<AttackState>,
    pub success: Vec<Option<(usize, SuccessCheck)>>,
    pub rows_evaluated: Vec<(usize, usize)>,
    pub prefix_bytes: usize,
    pub iterations_run: usize,
}

impl Progress {
    fn new(n_prompts: usize) -> Self {
        Self {
            curve: Vec::new(),
            trajectory: Vec::new(),
            states: Vec::new(),
            success: vec![None; n_prompts],
            rows_evaluated: Vec::new(),
            prefix_bytes: 0,
            iterations_run: 0,
        }
    }

    pub fn record(&mut self, iteration: usize) {
        let best: f64 = self.states.iter().map(|s| s.best.loss).sum();
        self.curve.push(best);
        self.trajectory.push(IterationRecord {
            iteration,
            best_loss: best,
            survivors: self.states.iter().map(|s| s.survivors.clone()).collect(),
        });
    }

    /// Runs the success check for prompts whose best-ever just improved.
    pub fn check<T: Element>(
        &mut self,
        weights: &ModelWeights<T>,
        batch: &AlignedBatch,
        improved: &[bool],
        iteration: usize,
        tau: f64,
    ) -> Result<()> {
        for (p, &imp) in improved.iter().enumerate() {
            if !imp || self.success[p].as_ref().is_some_and(|(_, c)| c.success) {
                continue;
            }
            let c = check_success(
                weights,
                &batch.prompt_tokens(p),
                &self.states[p].best.suffix,
                &batch.target_tokens(p),
                tau,
            )?;
            self.success[p] = Some((iteration, c));
        }
        Ok(())
    }

    pub fn all_succeeded(&self) -> bool {
        self.success
            .iter()
            .all(|s| s.as_ref().is_some_and(|(_, c)| c.success))
    }
}

/// Runs `E` iterations of the configured search for every prompt in
/// lockstep. All prompts draw from one seeded stream, prompt by prompt.
/// A simulated OOM ends the run early with `oom = true`.
pub fn run_attack<T: Element>(
    weights: &ModelWeights<T>,
    prompts: &[TokenSeq],
    targets: &[TokenSeq],
    cfg: &AttackConfig,
    strategy: CacheStrategy,
    opts: &RunOptions,
) -> Result<AttackReport> {
    cfg.validate()?;
    let mcfg = weights.config();
    for s in prompts.iter().chain(targets) {
        s.validate(mcfg)?;
    }
    let align = AlignOptions {
        init_token: cfg.init_token,
        ..AlignOptions::new(mcfg.pad_id())
    };
    if cfg.init_token as usize >= mcfg.vocab_size {
        return Err(Error::invalid(
            "attack.init_token",
            "outside the vocabulary",
        ));
    }
    let base = align_batch_with(prompts, targets, cfg.suffix_len, &align)?;
    let accountant = Accountant::new(opts.budget);
    let counters = Counters::new();
    let mut progress = Progress::new(base.n_prompts());
    let start = Instant::now();
    let result = match cfg.algo {
        AttackAlgo::RandomSubstitution => run_substitution(
            weights,
            &base,
            cfg,
            strategy,
            opts,
            &accountant,
            &counters,
            &mut progress,
        ),
        AttackAlgo::Beam => beam::run_beam(
            weights,
            &base,
            cfg,
            strategy,
            opts,
            &accountant,
            &counters,
            &mut progress,
        ),
    };
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let (oom, oom_detail) = match result {
        Ok(()) => (false, None),
        Err(e) if e.is_oom() => (true, Some(e.to_string())),
        Err(e) => return Err(e),
    };

    let cells_predicted = match cfg.algo {
        AttackAlgo::RandomSubstitution => predicted_cells_ragged(
            strategy,
            base.prefix_lens(),
            progress.rows_evaluated.iter().copied(),
        ),
        AttackAlgo::Beam => predicted_beam_cells(
            strategy,
            base.prefix_lens(),
            base.target_lens(),
            cfg.beam_k1,
            cfg.beam_k2,
            progress.iterations_run,
        ),
    } * cells_per_pair(mcfg);
    let (predicted_bytes, overhead_allowance) = memory_model(mcfg, &base, cfg, strategy, opts);
    let memory = accountant.snapshot();
    let prompts_out = progress
        .states
        .iter()
        .zip(&progress.success)
        .map(|(s, c)| PromptOutcome {
            best_suffix: s.best.suffix.clone(),
            best_loss: s.best.loss,
            success: c.as_ref().is_some_and(|(_, c)| c.success),
            exact_match: c.as_ref().is_some_and(|(_, c)| c.exact_match),
            mean_nll: c.as_ref().map_or(f64::NAN, |(_, c)| c.mean_nll),
            success_iteration: c.as_ref().filter(|(_, c)| c.success).map(|(i, _)| *i),
        })
        .collect::<Vec<_>>();
    Ok(AttackReport {
        strategy,
        algo: cfg.algo,
        width: cfg.width(),
        n_prompts: base.n_prompts(),
        n_p_max: base.n_p_max(),
        l_dec: base.decode_len(),
        iterations_run: progress.iterations_run,
        best_loss_curve: progress.curve,
        trajectory: progress.trajectory,
        success: !oom && !prompts_out.is_empty() && prompts_out.iter().all(|p| p.success),
        prompts: prompts_out,
        counters: counters.snapshot(wall_ms),
        cells_predicted,
        peak_bytes: memory.peak_bytes,
        prefix_bytes: progress.prefix_bytes,
        predicted_bytes,
        overhead_allowance,
        memory,
        oom,
        oom_detail,
        wall_ms,
    })
}

/// Predicted peak cache bytes and the declared transient allowance.
fn memory_model(
    mcfg: &crate::model::ModelConfig,
    base: &AlignedBatch,
    cfg: &AttackConfig,
    strategy: CacheStrategy,
    opts: &RunOptions,
) -> (usize, usize) {
    let b = base.n_prompts();
    let n_cand = b * cfg.width();
    let n_p = base.n_p_max();
    let l_dec = base.decode_len();
    let predicted = crate::bench::predicted_cache_bytes(strategy, mcfg, b, n_cand, n_p, l_dec);
    let mut allowance = match strategy {
        // The compact prefix coexists with its replica while it is copied.
        CacheStrategy::Standard if cfg.width() > 1 => cache_bytes(mcfg, b, n_p),
        CacheStrategy::Pskv if opts.pskv_mode == PskvMode::LayerExpand => {
            crate::bench::layer_expansion_bytes(mcfg, n_cand, n_p)
        }
        _ => 0,
    };
    if cfg.algo == AttackAlgo::Beam {
        // Surviving beams' suffix caches, before and after a step.
        allowance += 2 * cache_bytes(mcfg, b * cfg.beam_k2, cfg.suffix_len);
    }
    (predicted, allowance)
}

#[allow(clippy::too_many_arguments)]
fn run_substitution<T: Element>(
    weights: &ModelWeights<T>,
    base: &AlignedBatch,
    cfg: &AttackConfig,
    strategy: CacheStrategy,
    opts: &RunOptions,
    accountant: &Arc<Accountant>,
    counters: &Counters,
    progress: &mut Progress,
) -> Result<()> {
    let b = base.n_prompts();
    let width = cfg.width();
    let vocab = weights.config().vocab_size;
    let row_shape = |batch: &AlignedBatch| -> Vec<(usize, usize)> {
        (0..batch.rows())
            .map(|r| {
                (
                    batch.position_base(r),
                    batch.suffix_len() + batch.target_len_of_row(r),
                )
            })
            .collect()
    };
    let mut ev = Evaluator::new(
        weights,
        base,
        strategy,
        opts.pskv_mode,
        width,
        accountant,
        counters,
    )?
    .parallel(opts.parallel);

    let initial = ev.losses(base)?;
    progress.rows_evaluated.extend(row_shape(base));
    progress.states = (0..b)
        .map(|p| {
            AttackState::new(Scored {
                suffix: base.suffix(p).to_vec(),
                loss: initial[p],
            })
        })
        .collect();
    progress.prefix_bytes = ev.observed_prefix_bytes();
    progress.record(0);
    progress.check(weights, base, &vec![true; b], 0, cfg.success_threshold)?;

    let mut rng = DetRng::new(cfg.seed);
    for it in 1..=cfg.iterations {
        if cfg.early_stop && progress.all_succeeded() {
            break;
        }
        let mut suffixes = Vec::with_capacity(b * width);
        for state in &progress.states {
            suffixes.extend(propose_random_substitution(
                state,
                cfg.survivors,
                cfg.proposals_per_survivor,
                vocab,
                &mut rng,
            )?);
        }
        let batch = write_suffix_candidates(base, &suffixes)?;
        let losses = ev.losses(&batch)?;
        progress.rows_evaluated.extend(row_shape(&batch));
        let mut improved = vec![false; b];
        for (p, state) in progress.states.iter_mut().enumerate() {
            let block = &losses[p * width..(p + 1) * width];
            let keep = select_topk(block, cfg.survivors);
            let survivors = keep
                .into_iter()
                .map(|i| Scored {
                    suffix: suffixes[p * width + i].clone(),
                    loss: block[i],
                })
                .collect();
            improved[p] = state.advance(survivors);
        }
        progress.prefix_bytes = progress.prefix_bytes.max(ev.observed_prefix_bytes());
        progress.iterations_run = it;
        progress.record(it);
        progress.check(weights, base, &improved, it, cfg.success_threshold)?;
    }
    Ok(())
}
