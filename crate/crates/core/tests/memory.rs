use pskv_core::align::{align_batch, synthetic_pairs, write_suffix_candidates};
use pskv_core::attack::{run_attack, AttackConfig, Evaluator, RunOptions};
use pskv_core::bench::{run_benchmark, BenchScenario};
use pskv_core::model::{ModelConfig, ModelWeights, TokenId};
use pskv_core::{Accountant, CacheStrategy, Counters, MemKind, PskvMode};

/// K and V, every layer, every kv head, 4-byte elements.
fn kv_bytes(c: &ModelConfig, rows: usize, tokens: usize) -> usize {
    2 * c.n_layers * rows * tokens * c.n_kv_heads * (c.d_model / c.n_q_heads) * 4
}

struct Measured {
    prefix: usize,
    candidate: usize,
    expansion: usize,
    peak: usize,
}

#[allow(clippy::too_many_arguments)]
fn measure(
    w: &ModelWeights<f32>,
    b: usize,
    per: usize,
    n_p: usize,
    n_s: usize,
    n_t: usize,
    s: CacheStrategy,
    mode: PskvMode,
) -> Measured {
    let c = w.config();
    let (p, t) = synthetic_pairs(1, b, n_p, n_t, c.vocab_size);
    let base = align_batch(&p, &t, n_s, c.pad_id()).unwrap();
    let sufs: Vec<Vec<TokenId>> = (0..b * per)
        .map(|i| vec![(i % 200) as TokenId; n_s])
        .collect();
    let batch = write_suffix_candidates(&base, &sufs).unwrap();
    let acct = Accountant::unlimited();
    let counters = Counters::new();
    let mut ev = Evaluator::new(w, &batch, s, mode, per, &acct, &counters).unwrap();
    let prefix = acct.live_prefix();
    ev.losses(&batch).unwrap();
    Measured {
        prefix,
        candidate: acct.peak_of(MemKind::Candidate),
        expansion: acct.peak_of(MemKind::LayerExpansion),
        peak: acct.peak(),
    }
}

#[test]
fn prefix_bytes_follow_the_formulas_exactly() {
    let w = ModelWeights::<f32>::init(&ModelConfig::default()).unwrap();
    let c = w.config().clone();
    for (b, per, n_p) in [(1, 1, 5), (1, 8, 12), (3, 4, 9), (4, 16, 30)] {
        let n_cand = b * per;
        let std = measure(
            &w,
            b,
            per,
            n_p,
            6,
            7,
            CacheStrategy::Standard,
            PskvMode::IndexMapped,
        );
        let pskv = measure(
            &w,
            b,
            per,
            n_p,
            6,
            7,
            CacheStrategy::Pskv,
            PskvMode::IndexMapped,
        );
        let lazy = measure(
            &w,
            b,
            per,
            n_p,
            6,
            7,
            CacheStrategy::Pskv,
            PskvMode::LayerExpand,
        );
        assert_eq!(std.prefix, kv_bytes(&c, n_cand, n_p));
        assert_eq!(pskv.prefix, kv_bytes(&c, b, n_p));
        assert_eq!(lazy.prefix, kv_bytes(&c, b, n_p));
        assert_eq!(pskv.expansion, 0);
        assert_eq!(lazy.expansion, kv_bytes(&c, n_cand, n_p) / c.n_layers);
        for m in [&std, &pskv, &lazy] {
            assert_eq!(m.candidate, kv_bytes(&c, n_cand, 13));
        }
        assert!(pskv.peak <= std.peak);
    }
}

#[test]
fn standard_to_pskv_total_cache_ratio_at_the_reference_point() {
    let w = ModelWeights::<f32>::init(&ModelConfig::default()).unwrap();
    let c = w.config().clone();
    let std = measure(
        &w,
        1,
        64,
        78,
        20,
        20,
        CacheStrategy::Standard,
        PskvMode::IndexMapped,
    );
    let pskv = measure(
        &w,
        1,
        64,
        78,
        20,
        20,
        CacheStrategy::Pskv,
        PskvMode::IndexMapped,
    );
    let ratio = (std.prefix + std.candidate) as f64 / (pskv.prefix + pskv.candidate) as f64;
    let formula = (64.0 * 78.0 + 64.0 * 40.0) / (78.0 + 64.0 * 40.0);
    assert!((ratio - formula).abs() < 1e-12);
    assert!((ratio - 2.86).abs() <= 0.05, "{ratio}");
    assert_eq!(
        pskv.prefix + pskv.candidate,
        kv_bytes(&c, 1, 78) + kv_bytes(&c, 64, 40)
    );
}

#[test]
fn width_sweep_and_budget_oom() {
    let w = ModelWeights::<f32>::init(&ModelConfig::default()).unwrap();
    let c = w.config().clone();
    let (p, t) = synthetic_pairs(0, 1, 24, 6, c.vocab_size);
    let scenario = BenchScenario {
        iterations: 1,
        suffix_len: 6,
        ..BenchScenario::default()
    };
    let rows = run_benchmark(&w, &scenario, &p, &t).unwrap();
    assert_eq!(rows.len(), 9);
    let prefix = |s: CacheStrategy| -> Vec<usize> {
        rows.iter()
            .filter(|r| r.row.strategy == s)
            .map(|r| r.row.prefix_bytes)
            .collect()
    };
    let pskv = prefix(CacheStrategy::Pskv);
    let std = prefix(CacheStrategy::Standard);
    assert!(pskv.iter().all(|&b| b == kv_bytes(&c, 1, 24)));
    assert_eq!(
        std,
        vec![
            kv_bytes(&c, 16, 24),
            kv_bytes(&c, 32, 24),
            kv_bytes(&c, 64, 24)
        ]
    );
    assert!(prefix(CacheStrategy::NoCache).iter().all(|&b| b == 0));

    let peak = |s: CacheStrategy, width: usize| {
        rows.iter()
            .find(|r| r.row.strategy == s && r.row.width == width)
            .unwrap()
            .row
            .peak_bytes
    };
    let budget = (peak(CacheStrategy::Pskv, 64).max(peak(CacheStrategy::NoCache, 64))
        + peak(CacheStrategy::Standard, 64))
        / 2;
    assert!(budget < peak(CacheStrategy::Standard, 64));
    let limited = BenchScenario {
        widths: vec![64],
        budget: Some(budget),
        ..scenario
    };
    let rows = run_benchmark(&w, &limited, &p, &t).unwrap();
    for r in &rows {
        assert_eq!(
            r.row.oom,
            r.row.strategy == CacheStrategy::Standard,
            "{}",
            r.row.strategy
        );
        assert!(r.row.peak_bytes <= budget);
    }
}

#[test]
fn accounting_log_is_conserved() {
    let w = ModelWeights::<f32>::init(&ModelConfig::default()).unwrap();
    let (p, t) = synthetic_pairs(4, 2, 10, 4, 257);
    let cfg = AttackConfig {
        iterations: 2,
        survivors: 2,
        proposals_per_survivor: 2,
        suffix_len: 3,
        ..AttackConfig::default()
    };
    for s in CacheStrategy::ALL {
        let opts = RunOptions {
            pskv_mode: PskvMode::LayerExpand,
            ..RunOptions::default()
        };
        let r = run_attack(&w, &p, &t, &cfg, s, &opts).unwrap();
        assert!(r.bytes_within_model(), "{s}");
        assert_eq!(r.memory.live_bytes, 0);
    }
    let acct = Accountant::unlimited();
    let counters = Counters::new();
    let base = align_batch(&p, &t, 3, 256).unwrap();
    let mut ev = Evaluator::new(
        &w,
        &base,
        CacheStrategy::Pskv,
        PskvMode::LayerExpand,
        1,
        &acct,
        &counters,
    )
    .unwrap();
    ev.losses(&base).unwrap();
    let (mut live, mut peak) = (0i64, 0i64);
    for e in acct.log() {
        live += e.delta;
        peak = peak.max(live);
        assert_eq!(live as usize, e.live_after);
    }
    assert_eq!(live as usize, acct.live());
    assert_eq!(peak as usize, acct.peak());
}

#[test]
fn grouped_kv_heads_shrink_every_byte_figure_fourfold() {
    let mha = ModelConfig {
        n_q_heads: 4,
        n_kv_heads: 4,
        ..ModelConfig::default()
    };
    let gqa = ModelConfig {
        n_kv_heads: 1,
        ..mha.clone()
    };
    let (p, t) = synthetic_pairs(2, 2, 16, 5, 257);
    let cfg = AttackConfig {
        iterations: 2,
        survivors: 2,
        proposals_per_survivor: 4,
        suffix_len: 4,
        ..AttackConfig::default()
    };
    for s in CacheStrategy::ALL {
        let a = run_attack(
            &ModelWeights::<f32>::init(&mha).unwrap(),
            &p,
            &t,
            &cfg,
            s,
            &RunOptions::default(),
        )
        .unwrap();
        let g = run_attack(
            &ModelWeights::<f32>::init(&gqa).unwrap(),
            &p,
            &t,
            &cfg,
            s,
            &RunOptions::default(),
        )
        .unwrap();
        for (x, y) in [
            (a.peak_bytes, g.peak_bytes),
            (a.prefix_bytes, g.prefix_bytes),
            (a.predicted_bytes, g.predicted_bytes),
            (a.memory.peak_prefix_bytes, g.memory.peak_prefix_bytes),
        ] {
            assert_eq!(x, 4 * y, "{s}");
        }
        assert_eq!(a.counters.attention_cells, g.counters.attention_cells);
    }
}
