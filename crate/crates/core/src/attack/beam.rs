//! Beam extension: grow every prompt's suffix one token per step.
//!
//! Each kept beam proposes its `k1` most likely next tokens; every child is
//! scored by appending `[child, target…]` to the cached history of its
//! parent, and the `k2` lowest-loss children survive. Under the cached
//! strategies a child's history is prefix cache + parent suffix K/V, so
//! neither prefix nor suffix is ever recomputed.

use std::sync::Arc;

use crate::align::{positions_for_mask, AlignedBatch};
use crate::bench::accountant::{Accountant, MemKind};
use crate::bench::Counters;
use crate::error::{Error, Result};
use crate::kvcache::{
    build_prefix_cache, expand_standard, CacheStrategy, KvStore, NoPrefix, PrefixAccess,
    PrefixCache, PskvMode,
};
use crate::model::{target_nll, ModelWeights, StepInput, TokenId};
use crate::numerics::{Element, Matrix};

use super::eval::slots_of;
use super::{select_topk, AttackConfig, AttackState, Progress, RunOptions, Scored};

/// A proposed extension of beam `parent` by `token`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BeamChild {
    pub parent: usize,
    pub token: TokenId,
}

/// The `k` highest-scoring token ids of a logit row, best first. Ties go to
/// the lower id; the pad id is never returned.
pub fn topk_tokens<T: Element>(row: &[T], k: usize, pad: TokenId) -> Vec<TokenId> {
    let mut idx: Vec<usize> = (0..row.len()).filter(|&i| i as TokenId != pad).collect();
    idx.sort_by(|&a, &b| row[b].as_f64().total_cmp(&row[a].as_f64()).then(a.cmp(&b)));
    idx.truncate(k);
    idx.into_iter().map(|i| i as TokenId).collect()
}

/// Children of all beams in beam order, each beam's tokens best first.
pub fn propose_beam_extensions<T: Element>(
    frontiers: &[Vec<T>],
    k1: usize,
    pad: TokenId,
) -> Vec<BeamChild> {
    frontiers
        .iter()
        .enumerate()
        .flat_map(|(parent, row)| {
            topk_tokens(row, k1, pad)
                .into_iter()
                .map(move |token| BeamChild { parent, token })
        })
        .collect()
}

struct Beam<T> {
    suffix: Vec<TokenId>,
    loss: f64,
    /// Next-token logits after the suffix.
    frontier: Vec<T>,
}

fn score<T: Element>(logits: &[&[T]], target: &[TokenId]) -> Result<f64> {
    target_nll(logits, target, &vec![true; target.len()])
}

fn access<'c, T: Element>(
    prefix: &'c PrefixCache<T>,
    strategy: CacheStrategy,
    mode: PskvMode,
    prompt_of: &[usize],
) -> Result<PrefixAccess<'c, T>> {
    match strategy {
        CacheStrategy::Standard => {
            PrefixAccess::duplicated(prefix, &slots_of(prompt_of, prefix.n_prompts()))
        }
        _ => PrefixAccess::shared(prefix, prompt_of, mode),
    }
}

fn pad_to(mut v: Vec<TokenId>, width: usize, pad: TokenId) -> Vec<TokenId> {
    v.resize(width, pad);
    v
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn run_beam<T: Element>(
    weights: &ModelWeights<T>,
    base: &AlignedBatch,
    cfg: &AttackConfig,
    strategy: CacheStrategy,
    opts: &RunOptions,
    accountant: &Arc<Accountant>,
    counters: &Counters,
    progress: &mut Progress,
) -> Result<()> {
    let mcfg = weights.config();
    let pad = mcfg.pad_id();
    if cfg.beam_k1 >= mcfg.vocab_size {
        return Err(Error::invalid(
            "attack.beam_k1",
            "exceeds the number of real tokens",
        ));
    }
    let b = base.n_prompts();
    let (n_p, n_t) = (base.n_p_max(), base.n_t_max());
    let (k1, k2) = (cfg.beam_k1, cfg.beam_k2);
    let prompts: Vec<Vec<TokenId>> = (0..b).map(|p| base.prompt_tokens(p)).collect();
    let targets: Vec<Vec<TokenId>> = (0..b).map(|p| base.target_tokens(p)).collect();
    let p_lens = base.prefix_lens();
    let cells = &counters.attention_cells;

    let prefix = if strategy.is_cached() {
        let compact = build_prefix_cache(weights, &prompts, n_p, accountant, counters)?;
        Some(match strategy {
            CacheStrategy::Standard => expand_standard(compact, k1 * k2, accountant)?,
            _ => compact,
        })
    } else {
        None
    };

    // Empty suffix: one target pass per prompt.
    let prompt_rows: Vec<usize> = (0..b).collect();
    let mut beams: Vec<Vec<Beam<T>>> = Vec::with_capacity(b);
    match &prefix {
        Some(pc) => {
            let view = access(pc, strategy, opts.pskv_mode, &prompt_rows)?;
            let tokens: Vec<Vec<TokenId>> = targets
                .iter()
                .map(|t| pad_to(t.clone(), n_t, pad))
                .collect();
            let pos: Vec<Vec<usize>> = (0..b)
                .map(|p| {
                    (0..n_t)
                        .map(|j| {
                            if j < targets[p].len() {
                                p_lens[p] + j
                            } else {
                                0
                            }
                        })
                        .collect()
                })
                .collect();
            let mut store = KvStore::new(mcfg, b, n_t, MemKind::Candidate, accountant)?;
            let input = StepInput {
                tokens: &tokens,
                positions: &pos,
                logits_from: 0,
            };
            let logits = weights.forward_step(&input, &view, &mut store, cells, opts.parallel)?;
            progress.prefix_bytes = progress.prefix_bytes.max(view.observed_prefix_bytes());
            counters.add_candidate_tokens(targets.iter().map(|t| t.len() as u64).sum());
            for p in 0..b {
                let frontier = pc
                    .last_logits(p)
                    .ok_or_else(|| Error::DegenerateInput(format!("prompt {p} is empty")))?;
                let t = &targets[p];
                let mut rows: Vec<&[T]> = vec![frontier];
                rows.extend((0..t.len() - 1).map(|j| logits[p].row(j)));
                beams.push(vec![Beam {
                    suffix: Vec::new(),
                    loss: score(&rows, t)?,
                    frontier: frontier.to_vec(),
                }]);
            }
        }
        None => {
            let tokens: Vec<Vec<TokenId>> = (0..b)
                .map(|p| {
                    let mut row = vec![pad; n_p - prompts[p].len()];
                    row.extend(&prompts[p]);
                    pad_to(
                        row.into_iter().chain(targets[p].iter().copied()).collect(),
                        n_p + n_t,
                        pad,
                    )
                })
                .collect();
            let logits = full_forward(
                weights,
                &tokens,
                n_p - 1,
                opts.parallel,
                accountant,
                counters,
            )?;
            for p in 0..b {
                let t = &targets[p];
                let rows: Vec<&[T]> = (0..t.len()).map(|j| logits[p].row(j)).collect();
                beams.push(vec![Beam {
                    suffix: Vec::new(),
                    loss: score(&rows, t)?,
                    frontier: logits[p].row(0).to_vec(),
                }]);
            }
        }
    }
    progress.states = beams
        .iter()
        .map(|bs| {
            AttackState::new(Scored {
                suffix: Vec::new(),
                loss: bs[0].loss,
            })
        })
        .collect();
    progress.record(0);
    progress.check(weights, base, &vec![true; b], 0, cfg.success_threshold)?;

    // Suffix K/V of the kept beams: row `p * k2 + i`.
    let mut beam_store: Option<KvStore<T>> = None;
    for it in 1..=cfg.iterations {
        let s = it - 1;
        if s >= cfg.suffix_len || (cfg.early_stop && progress.all_succeeded()) {
            break;
        }
        let mut children: Vec<(usize, BeamChild)> = Vec::new();
        for (p, bs) in beams.iter().enumerate() {
            let frontiers: Vec<Vec<T>> = bs.iter().map(|x| x.frontier.clone()).collect();
            children.extend(
                propose_beam_extensions(&frontiers, k1, pad)
                    .into_iter()
                    .map(|c| (p, c)),
            );
        }
        let prompt_of: Vec<usize> = children.iter().map(|&(p, _)| p).collect();
        let n = children.len();

        let mut child_store = None;
        let logits = match &prefix {
            Some(pc) => {
                let mut store = KvStore::new(mcfg, n, s + 1 + n_t, MemKind::Candidate, accountant)?;
                if let Some(bst) = &beam_store {
                    for (c, &(p, ch)) in children.iter().enumerate() {
                        store.copy_prefix_of_row(c, bst, p * k2 + ch.parent, s)?;
                    }
                }
                let tokens: Vec<Vec<TokenId>> = children
                    .iter()
                    .map(|&(p, ch)| {
                        pad_to(
                            [ch.token]
                                .into_iter()
                                .chain(targets[p].iter().copied())
                                .collect(),
                            1 + n_t,
                            pad,
                        )
                    })
                    .collect();
                let pos: Vec<Vec<usize>> = children
                    .iter()
                    .map(|&(p, _)| {
                        let real = 1 + targets[p].len();
                        (0..1 + n_t)
                            .map(|j| if j < real { p_lens[p] + s + j } else { 0 })
                            .collect()
                    })
                    .collect();
                let view = access(pc, strategy, opts.pskv_mode, &prompt_of)?;
                let input = StepInput {
                    tokens: &tokens,
                    positions: &pos,
                    logits_from: 0,
                };
                let out = weights.forward_step(&input, &view, &mut store, cells, opts.parallel)?;
                progress.prefix_bytes = progress.prefix_bytes.max(view.observed_prefix_bytes());
                counters.add_candidate_tokens(
                    prompt_of.iter().map(|&p| 1 + targets[p].len() as u64).sum(),
                );
                child_store = Some(store);
                out
            }
            None => {
                let tokens: Vec<Vec<TokenId>> = children
                    .iter()
                    .map(|&(p, ch)| {
                        let mut row = vec![pad; n_p - prompts[p].len()];
                        row.extend(&prompts[p]);
                        row.extend(&beams[p][ch.parent].suffix);
                        row.push(ch.token);
                        row.extend(&targets[p]);
                        pad_to(row, n_p + s + 1 + n_t, pad)
                    })
                    .collect();
                full_forward(
                    weights,
                    &tokens,
                    n_p + s,
                    opts.parallel,
                    accountant,
                    counters,
                )?
            }
        };

        let losses = children
            .iter()
            .enumerate()
            .map(|(c, &(p, _))| {
                let t = &targets[p];
                let rows: Vec<&[T]> = (0..t.len()).map(|j| logits[c].row(j)).collect();
                score(&rows, t)
            })
            .collect::<Result<Vec<f64>>>()?;

        let mut next_store = match &child_store {
            Some(_) => Some(KvStore::new(
                mcfg,
                b * k2,
                cfg.suffix_len,
                MemKind::Candidate,
                accountant,
            )?),
            None => None,
        };
        let mut improved = vec![false; b];
        let mut start = 0;
        for p in 0..b {
            let end = start + prompt_of[start..].iter().take_while(|&&q| q == p).count();
            let keep = select_topk(&losses[start..end], k2);
            let mut kept = Vec::with_capacity(keep.len());
            for (rank, &i) in keep.iter().enumerate() {
                let c = start + i;
                let ch = children[c].1;
                let mut suffix = beams[p][ch.parent].suffix.clone();
                suffix.push(ch.token);
                if let (Some(dst), Some(src)) = (next_store.as_mut(), child_store.as_ref()) {
                    dst.copy_prefix_of_row(p * k2 + rank, src, c, s + 1)?;
                }
                kept.push(Beam {
                    suffix,
                    loss: losses[c],
                    frontier: logits[c].row(0).to_vec(),
                });
            }
            let survivors = kept
                .iter()
                .map(|x| Scored {
                    suffix: x.suffix.clone(),
                    loss: x.loss,
                })
                .collect();
            improved[p] = progress.states[p].advance(survivors);
            beams[p] = kept;
            start = end;
        }
        drop(child_store);
        beam_store = next_store;
        progress.iterations_run = it;
        progress.record(it);
        progress.check(weights, base, &improved, it, cfg.success_threshold)?;
    }
    Ok(())
}

/// NoCache scoring: every row recomputed from its first token.
fn full_forward<T: Element>(
    weights: &ModelWeights<T>,
    tokens: &[Vec<TokenId>],
    logits_from: usize,
    parallel: bool,
    accountant: &Arc<Accountant>,
    counters: &Counters,
) -> Result<Vec<Matrix<T>>> {
    let pad = weights.config().pad_id();
    let width = tokens.first().map_or(0, Vec::len);
    let positions: Vec<Vec<usize>> = tokens
        .iter()
        .map(|r| positions_for_mask(&r.iter().map(|&t| t != pad).collect::<Vec<_>>()))
        .collect();
    let mut store = KvStore::layer_scoped(
        weights.config(),
        tokens.len(),
        width,
        MemKind::FullSequence,
        accountant,
    )?;
    let input = StepInput {
        tokens,
        positions: &positions,
        logits_from,
    };
    let out = weights.forward_step(
        &input,
        &NoPrefix,
        &mut store,
        &counters.attention_cells,
        parallel,
    )?;
    counters.add_candidate_tokens(super::eval::real_tokens(tokens, pad));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_tokens_orders_and_skips_pad() {
        let row = [0.5f32, 2.0, 2.0, 9.0, 1.0];
        assert_eq!(topk_tokens(&row, 3, 3), vec![1, 2, 4]);
        assert_eq!(topk_tokens(&row, 1, 4), vec![3]);
    }

    #[test]
    fn children_follow_beam_then_rank_order() {
        let f = vec![vec![0.0f64, 1.0, 2.0, 0.0], vec![3.0, 0.0, 1.0, 0.0]];
        let c = propose_beam_extensions(&f, 2, 3);
        let got: Vec<(usize, TokenId)> = c.iter().map(|x| (x.parent, x.token)).collect();
        assert_eq!(got, vec![(0, 2), (0, 1), (1, 0), (1, 2)]);
    }
}
