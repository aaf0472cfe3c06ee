//! Closed-form compute and memory predictors.
//!
//! Cell counts are in (query, key) pairs of one attention head in one
//! layer; a model computes `n_layers * n_q_heads` cells per pair (see
//! [`cells_per_pair`]).

use crate::kvcache::{cache_bytes, CacheStrategy};
use crate::model::ModelConfig;

/// Causal pair count of a length-`n` self-attention: `n(n+1)/2`.
pub fn triangular(n: usize) -> u64 {
    let n = n as u64;
    n * (n + 1) / 2
}

/// Cells for appending `n` tokens after `history` visible keys; token `i`
/// sees `history + i + 1` keys.
pub fn appended_cells(history: usize, n: usize) -> u64 {
    (history as u64) * (n as u64) + triangular(n)
}

pub fn cells_per_pair(config: &ModelConfig) -> u64 {
    (config.n_layers * config.n_q_heads) as u64
}

/// Teacher-forced pair count for `E` iterations of `N_cand` candidates over
/// uniform prefix length `N_p` and decoding length `L_dec`, with `B` prompts.
pub fn predicted_cells(
    strategy: CacheStrategy,
    iterations: usize,
    n_cand: usize,
    n_p: usize,
    l_dec: usize,
    n_prompts: usize,
) -> u64 {
    let rows = (iterations * n_cand) as u64;
    match strategy {
        CacheStrategy::NoCache => rows * triangular(n_p + l_dec),
        CacheStrategy::Standard | CacheStrategy::Pskv => {
            n_prompts as u64 * triangular(n_p) + rows * appended_cells(n_p, l_dec)
        }
    }
}

/// Pair count for ragged inputs: `prompt_lens` are the true prefix lengths
/// (computed once under cached strategies), `rows` lists every evaluated
/// candidate row as (true prefix length, real decoded tokens).
pub fn predicted_cells_ragged(
    strategy: CacheStrategy,
    prompt_lens: &[usize],
    rows: impl IntoIterator<Item = (usize, usize)>,
) -> u64 {
    match strategy {
        CacheStrategy::NoCache => rows.into_iter().map(|(p, l)| triangular(p + l)).sum(),
        CacheStrategy::Standard | CacheStrategy::Pskv => {
            prompt_lens.iter().map(|&p| triangular(p)).sum::<u64>()
                + rows
                    .into_iter()
                    .map(|(p, l)| appended_cells(p, l))
                    .sum::<u64>()
        }
    }
}

/// Pair count of a beam search over `steps` extension steps. Each step
/// scores every child by appending its new token plus the teacher-forced
/// target; the search opens with one target evaluation of the empty suffix.
pub fn predicted_beam_cells(
    strategy: CacheStrategy,
    prompt_lens: &[usize],
    target_lens: &[usize],
    k1: usize,
    k2: usize,
    steps: usize,
) -> u64 {
    let mut total = 0u64;
    for (&p, &t) in prompt_lens.iter().zip(target_lens) {
        let mut beams = 1usize;
        match strategy {
            CacheStrategy::NoCache => {
                total += triangular(p + t);
                for s in 0..steps {
                    let children = beams * k1;
                    total += children as u64 * triangular(p + s + 1 + t);
                    beams = children.min(k2);
                }
            }
            CacheStrategy::Standard | CacheStrategy::Pskv => {
                total += triangular(p) + appended_cells(p, t);
                for s in 0..steps {
                    let children = beams * k1;
                    total += children as u64 * appended_cells(p + s, 1 + t);
                    beams = children.min(k2);
                }
            }
        }
    }
    total
}

/// Peak cache bytes implied by the memory model of each strategy.
pub fn predicted_cache_bytes(
    strategy: CacheStrategy,
    config: &ModelConfig,
    n_prompts: usize,
    n_cand: usize,
    n_p_max: usize,
    l_dec: usize,
) -> usize {
    match strategy {
        CacheStrategy::NoCache => cache_bytes(config, n_cand, n_p_max + l_dec),
        CacheStrategy::Standard => {
            cache_bytes(config, n_cand, n_p_max) + cache_bytes(config, n_cand, l_dec)
        }
        CacheStrategy::Pskv => {
            cache_bytes(config, n_prompts, n_p_max) + cache_bytes(config, n_cand, l_dec)
        }
    }
}

/// Prefix-resident bytes: the part of [`predicted_cache_bytes`] that holds prefix K/V.
pub fn predicted_prefix_bytes(
    strategy: CacheStrategy,
    config: &ModelConfig,
    n_prompts: usize,
    n_cand: usize,
    n_p_max: usize,
) -> usize {
    match strategy {
        CacheStrategy::NoCache => 0,
        CacheStrategy::Standard => cache_bytes(config, n_cand, n_p_max),
        CacheStrategy::Pskv => cache_bytes(config, n_prompts, n_p_max),
    }
}

/// Bytes of one layer's broadcast of the prefix to `n_cand` rows.
pub fn layer_expansion_bytes(config: &ModelConfig, n_cand: usize, n_p_max: usize) -> usize {
    cache_bytes(config, n_cand, n_p_max) / config.n_layers
}
