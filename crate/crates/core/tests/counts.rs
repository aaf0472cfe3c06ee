use pskv_core::align::{align_batch_with, write_suffix_candidates, AlignOptions};
use pskv_core::attack::{run_attack, AttackAlgo, AttackConfig, Evaluator, RunOptions};
use pskv_core::bench::{cells_per_pair, verify_complexity, ComplexityGrid};
use pskv_core::model::{ModelConfig, ModelWeights, Role, TokenId, TokenSeq};
use pskv_core::numerics::CellCounter;
use pskv_core::{Accountant, CacheStrategy, Counters, PskvMode};

fn toy() -> ModelWeights<f32> {
    ModelWeights::init(&ModelConfig::default()).unwrap()
}

fn seqs(v: &[&[TokenId]], role: Role) -> Vec<TokenSeq> {
    v.iter().map(|s| TokenSeq::new(s.to_vec(), role)).collect()
}

/// Visible (query, key) pairs of one evaluation, counted from the masks:
/// every real decode token attends to every real key at or before it.
/// Cached strategies add one causal pass per prompt over its real tokens.
fn mask_pairs(batch: &pskv_core::AlignedBatch, cached: bool) -> u64 {
    let mut pairs = 0u64;
    let band = batch.n_p_max();
    for r in 0..batch.rows() {
        let mask = batch.attn_mask(r);
        let first_query = if cached { band } else { 0 };
        for q in first_query..mask.len() {
            if mask[q] {
                pairs += mask[..=q].iter().filter(|&&m| m).count() as u64;
            }
        }
    }
    if cached {
        for &p in batch.prefix_lens() {
            pairs += (p * (p + 1) / 2) as u64;
        }
    }
    pairs
}

#[test]
fn default_grid_is_exact_with_matching_cached_rows() {
    let w = toy();
    let report = verify_complexity(&w, &ComplexityGrid::default()).unwrap();
    assert_eq!(report.points.len(), 27 * 3);
    assert!(report.all_exact && report.cached_parity && report.passed);
    assert!(report.nocache_r2.unwrap() >= 0.999);
    assert!(report.cached_r2.unwrap() >= 0.999);
}

#[test]
fn empty_prefix_makes_cached_and_uncached_counts_equal() {
    let w = toy();
    let grid = ComplexityGrid {
        prefix_lens: vec![0, 3, 9],
        ..ComplexityGrid::default()
    };
    let report = verify_complexity(&w, &grid).unwrap();
    for p in report.points.iter().filter(|p| p.n_p == 0) {
        let nocache = report
            .points
            .iter()
            .find(|q| {
                q.strategy == CacheStrategy::NoCache && (q.l_dec, q.n_cand) == (p.l_dec, p.n_cand)
            })
            .unwrap();
        assert_eq!(p.cells_measured, nocache.cells_measured);
    }
}

#[test]
fn multi_prompt_grid_uses_one_prefix_per_prompt() {
    let w = toy();
    let grid = ComplexityGrid {
        n_prompts: 2,
        candidates: vec![2, 4, 8],
        ..ComplexityGrid::default()
    };
    let report = verify_complexity(&w, &grid).unwrap();
    assert!(report.passed);
}

#[test]
fn ragged_batch_counts_match_mask_enumeration() {
    let w = toy();
    let cpp = cells_per_pair(w.config());
    let prompts = seqs(
        &[&[1, 2, 3, 4, 5, 6, 7], &[8, 9], &[10, 11, 12, 13]],
        Role::Prefix,
    );
    let targets = seqs(&[&[20, 21], &[22, 23, 24, 25, 26], &[27]], Role::Target);
    let opts = AlignOptions::new(w.config().pad_id());
    let base = align_batch_with(&prompts, &targets, 5, &opts).unwrap();
    let suffixes: Vec<Vec<TokenId>> = (0..6).map(|i| vec![40 + i; 5]).collect();
    let batch = write_suffix_candidates(&base, &suffixes).unwrap();
    let mut by_strategy = Vec::new();
    for strategy in CacheStrategy::ALL {
        let counters = Counters::new();
        let acct = Accountant::unlimited();
        let mut ev = Evaluator::new(
            &w,
            &batch,
            strategy,
            PskvMode::IndexMapped,
            2,
            &acct,
            &counters,
        )
        .unwrap();
        ev.losses(&batch).unwrap();
        let expect = mask_pairs(&batch, strategy.is_cached()) * cpp;
        assert_eq!(counters.attention_cells(), expect, "{strategy}");
        let expect_forwards = if strategy.is_cached() { 3 } else { 0 };
        assert_eq!(counters.prefix_forwards(), expect_forwards);
        by_strategy.push(counters.attention_cells());
    }
    assert_eq!(by_strategy[1], by_strategy[2]);
}

#[test]
fn per_row_oracle_agrees_with_uncached_batch() {
    // NoCache on an aligned batch costs the same as unpadded forwards per row.
    let w = toy();
    let prompts = seqs(&[&[1, 2, 3], &[4, 5, 6, 7, 8]], Role::Prefix);
    let targets = seqs(&[&[9, 10, 11], &[12]], Role::Target);
    let base = align_batch_with(
        &prompts,
        &targets,
        4,
        &AlignOptions::new(w.config().pad_id()),
    )
    .unwrap();
    let counters = Counters::new();
    let acct = Accountant::unlimited();
    let mut ev = Evaluator::new(
        &w,
        &base,
        CacheStrategy::NoCache,
        PskvMode::IndexMapped,
        1,
        &acct,
        &counters,
    )
    .unwrap();
    ev.losses(&base).unwrap();
    let oracle = CellCounter::new();
    for r in 0..base.rows() {
        w.forward_full_counted(&base.unpadded_row(r), &oracle)
            .unwrap();
    }
    assert_eq!(counters.attention_cells(), oracle.get());
}

fn beam_model() -> ModelWeights<f64> {
    ModelWeights::init(&ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_q_heads: 4,
        n_kv_heads: 2,
        vocab_size: 20,
        seed: 2,
        ..ModelConfig::default()
    })
    .unwrap()
}

/// Replays a beam search with full forwards, charging cached strategies only
/// for the tokens they append: cells(whole child) − cells(shared history).
fn beam_cells_oracle(
    w: &ModelWeights<f64>,
    prompts: &[Vec<TokenId>],
    targets: &[Vec<TokenId>],
    children: &[Vec<Vec<TokenId>>],
    cached: bool,
) -> u64 {
    let cost = |toks: &[TokenId]| {
        let c = CellCounter::new();
        if !toks.is_empty() {
            w.forward_full_counted(toks, &c).unwrap();
        }
        c.get()
    };
    let mut total = 0;
    for ((p, t), kids) in prompts.iter().zip(targets).zip(children) {
        let whole = |s: &[TokenId]| [p.as_slice(), s, t.as_slice()].concat();
        if cached {
            total += cost(&whole(&[]));
            for s in kids {
                total += cost(&whole(s)) - cost(&[p.as_slice(), &s[..s.len() - 1]].concat());
            }
        } else {
            total += cost(&whole(&[]));
            for s in kids {
                total += cost(&whole(s));
            }
        }
    }
    total
}

#[test]
fn beam_counts_match_incremental_oracle() {
    let w = beam_model();
    let prompts: Vec<Vec<TokenId>> = vec![vec![1, 2, 3, 4], vec![5, 6]];
    let targets: Vec<Vec<TokenId>> = vec![vec![7, 8, 9], vec![10, 11]];
    let cfg = AttackConfig {
        algo: AttackAlgo::Beam,
        beam_k1: 3,
        beam_k2: 2,
        iterations: 3,
        suffix_len: 3,
        init_token: 0,
        ..AttackConfig::default()
    };
    let ps: Vec<TokenSeq> = prompts
        .iter()
        .map(|p| TokenSeq::new(p.clone(), Role::Prefix))
        .collect();
    let ts: Vec<TokenSeq> = targets
        .iter()
        .map(|t| TokenSeq::new(t.clone(), Role::Target))
        .collect();

    // Every child scored is one of k1 extensions of a surviving beam; the
    // trajectory gives the survivors, so the children are reconstructible
    // from the beams of the previous step and the model's top-k1 tokens.
    let r = run_attack(
        &w,
        &ps,
        &ts,
        &cfg,
        CacheStrategy::Pskv,
        &RunOptions::default(),
    )
    .unwrap();
    let pad = w.config().pad_id();
    let mut children: Vec<Vec<Vec<TokenId>>> = vec![Vec::new(); prompts.len()];
    for step in 0..cfg.suffix_len {
        for (b, kids) in children.iter_mut().enumerate() {
            for beam in &r.trajectory[step].survivors[b] {
                let ctx = [prompts[b].as_slice(), &beam.suffix].concat();
                let l = w.forward_full(&ctx).unwrap();
                let last = l.row(l.rows() - 1);
                let mut ids: Vec<usize> =
                    (0..last.len()).filter(|&i| i as TokenId != pad).collect();
                ids.sort_by(|&a, &c| last[c].partial_cmp(&last[a]).unwrap().then(a.cmp(&c)));
                for &t in ids.iter().take(cfg.beam_k1) {
                    let mut s = beam.suffix.clone();
                    s.push(t as TokenId);
                    kids.push(s);
                }
            }
        }
    }
    for strategy in CacheStrategy::ALL {
        let r = run_attack(&w, &ps, &ts, &cfg, strategy, &RunOptions::default()).unwrap();
        let oracle = beam_cells_oracle(&w, &prompts, &targets, &children, strategy.is_cached());
        assert_eq!(r.counters.attention_cells, oracle, "{strategy}");
        assert_eq!(r.cells_predicted, oracle, "{strategy}");
    }
}

#[test]
fn substitution_run_counts_are_exact_and_cached_parity_holds() {
    let w = toy();
    let ps = seqs(
        &[&[72, 101, 108, 108, 111, 32, 119], &[65, 66]],
        Role::Prefix,
    );
    let ts = seqs(&[&[83, 117, 114, 101], &[79, 75, 33]], Role::Target);
    let cfg = AttackConfig {
        iterations: 3,
        survivors: 2,
        proposals_per_survivor: 3,
        suffix_len: 5,
        ..AttackConfig::default()
    };
    let mut got = Vec::new();
    for strategy in CacheStrategy::ALL {
        let r = run_attack(&w, &ps, &ts, &cfg, strategy, &RunOptions::default()).unwrap();
        assert!(
            r.cells_match(),
            "{strategy}: {} vs {}",
            r.counters.attention_cells,
            r.cells_predicted
        );
        got.push((r.counters.attention_cells, r.counters.prefix_forwards));
    }
    assert_eq!(got[1], got[2]);
    assert_eq!(got[2].1, 2);
    assert!(got[0].0 > got[2].0);
}
