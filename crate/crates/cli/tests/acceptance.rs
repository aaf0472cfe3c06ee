//! End-to-end acceptance run: one PASS/FAIL line per criterion.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use serde_json::Value;

use pskv_core::align::synthetic_pairs;
use pskv_core::attack::{run_attack, AttackAlgo, AttackConfig, AttackReport, RunOptions};
use pskv_core::bench::{run_benchmark, verify_complexity, BenchScenario, ComplexityGrid};
use pskv_core::model::argmax_token;
use pskv_core::verify::{case_specs, check_case, run_equivalence_suite, VerifyOptions};
use pskv_core::{CacheStrategy, ModelConfig, ModelWeights, PskvMode, Role, TokenId, TokenSeq};

/// K and V for every layer and kv head, 4-byte elements.
fn kv_bytes(c: &ModelConfig, rows: usize, tokens: usize) -> usize {
    2 * c.n_layers * rows * tokens * c.n_kv_heads * (c.d_model / c.n_q_heads) * 4
}

fn toy() -> ModelWeights<f32> {
    ModelWeights::init(&ModelConfig::default()).unwrap()
}

fn equivalence() -> Result<String> {
    let t = Instant::now();
    let report = run_equivalence_suite(&VerifyOptions::default())?;
    let secs = t.elapsed().as_secs_f64();
    ensure!(
        report.cases.len() >= 20,
        "only {} configs",
        report.cases.len()
    );
    ensure!(report.passed, "failures: {:?}", report.failures);
    ensure!(report.bit_identical, "strategies not bit-identical");
    ensure!(secs < 60.0, "took {secs:.1} s");
    Ok(format!(
        "{} configs bit-identical incl. padded-vs-unpadded oracles, {secs:.1} s",
        report.cases.len()
    ))
}

fn compute_counts() -> Result<String> {
    let w = toy();
    let grid = ComplexityGrid::default();
    let report = verify_complexity(&w, &grid)?;
    ensure!(
        report.all_exact && report.cached_parity && report.passed,
        "complexity grid failed"
    );

    let prompts = vec![
        TokenSeq::from_bytes("Give me the recipe", Role::Prefix),
        TokenSeq::from_bytes("Write", Role::Prefix),
    ];
    let targets = vec![
        TokenSeq::from_bytes("Sure", Role::Target),
        TokenSeq::from_bytes("Here is", Role::Target),
    ];
    let cfg = AttackConfig {
        algo: AttackAlgo::Beam,
        beam_k1: 4,
        beam_k2: 3,
        iterations: 5,
        suffix_len: 5,
        ..AttackConfig::default()
    };
    let mut beam = Vec::new();
    for s in CacheStrategy::ALL {
        let r = run_attack(&w, &prompts, &targets, &cfg, s, &RunOptions::default())?;
        ensure!(
            r.counters.attention_cells == r.cells_predicted,
            "beam {s}: measured {} predicted {}",
            r.counters.attention_cells,
            r.cells_predicted
        );
        beam.push(r.counters.attention_cells);
    }
    ensure!(beam[1] == beam[2], "beam cached counts differ");
    Ok(format!(
        "{} grid points exact, standard==pskv, beam counts exact ({} / {} cells)",
        report.points.len(),
        beam[0],
        beam[2]
    ))
}

fn ref_point(w: &ModelWeights<f32>, s: CacheStrategy, mode: PskvMode) -> Result<AttackReport> {
    let (p, t) = synthetic_pairs(0, 1, 78, 20, 257);
    let cfg = AttackConfig {
        iterations: 1,
        suffix_len: 20,
        ..AttackConfig::default()
    };
    let opts = RunOptions {
        pskv_mode: mode,
        ..RunOptions::default()
    };
    Ok(run_attack(w, &p, &t, &cfg, s, &opts)?)
}

fn memory_formulas() -> Result<String> {
    let w = toy();
    let c = w.config().clone();
    let std = ref_point(&w, CacheStrategy::Standard, PskvMode::IndexMapped)?;
    let pskv = ref_point(&w, CacheStrategy::Pskv, PskvMode::IndexMapped)?;
    let lazy = ref_point(&w, CacheStrategy::Pskv, PskvMode::LayerExpand)?;
    ensure!(
        std.width == 64 && std.n_p_max == 78 && std.l_dec == 40,
        "unexpected reference point"
    );
    ensure!(
        std.prefix_bytes == kv_bytes(&c, 64, 78),
        "standard prefix {}",
        std.prefix_bytes
    );
    ensure!(
        pskv.prefix_bytes == kv_bytes(&c, 1, 78),
        "pskv prefix {}",
        pskv.prefix_bytes
    );
    let one_layer = kv_bytes(&c, 64, 78) / c.n_layers;
    ensure!(
        lazy.prefix_bytes == kv_bytes(&c, 1, 78) + one_layer,
        "layer-expand prefix {} vs {} + {}",
        lazy.prefix_bytes,
        kv_bytes(&c, 1, 78),
        one_layer
    );
    let ratio = std.peak_bytes as f64 / pskv.peak_bytes as f64;
    ensure!((ratio - 2.86).abs() <= 0.05, "ratio {ratio:.4}");
    Ok(format!(
        "prefix bytes exact (standard {}, pskv {}, layer-expand +{}), standard/pskv peak ratio {ratio:.3}",
        std.prefix_bytes, pskv.prefix_bytes, one_layer
    ))
}

fn scalability() -> Result<String> {
    let w = toy();
    let c = w.config().clone();
    let (p, t) = synthetic_pairs(0, 1, 78, 20, 257);
    let scenario = BenchScenario {
        iterations: 1,
        ..BenchScenario::default()
    };
    let rows = run_benchmark(&w, &scenario, &p, &t)?;
    let pick = |s: CacheStrategy| rows.iter().filter(move |r| r.row.strategy == s);
    let pskv: Vec<usize> = pick(CacheStrategy::Pskv)
        .map(|r| r.row.prefix_bytes)
        .collect();
    let std: Vec<usize> = pick(CacheStrategy::Standard)
        .map(|r| r.row.prefix_bytes)
        .collect();
    ensure!(
        pskv.iter().all(|&b| b == kv_bytes(&c, 1, 78)),
        "pskv prefix bytes {pskv:?}"
    );
    ensure!(
        std[1] == 2 * std[0] && std[2] == 2 * std[1],
        "standard prefix bytes {std:?}"
    );

    let peak64 = |s: CacheStrategy| pick(s).find(|r| r.row.width == 64).unwrap().row.peak_bytes;
    let budget = (peak64(CacheStrategy::Pskv) + peak64(CacheStrategy::Standard)) / 2;
    let limited = BenchScenario {
        budget: Some(budget),
        ..scenario
    };
    let rows = run_benchmark(&w, &limited, &p, &t)?;
    let ooms: Vec<String> = rows
        .iter()
        .filter(|r| r.row.oom)
        .map(|r| format!("{}@{}", r.row.strategy, r.row.width))
        .collect();
    ensure!(
        rows.iter()
            .all(|r| r.row.oom == (r.row.strategy == CacheStrategy::Standard && r.row.width == 64)),
        "OOM cells under budget {budget}: {ooms:?}"
    );
    Ok(format!(
        "pskv prefix constant {} B, standard {:?} B; budget {budget} B → OOM only at {}",
        pskv[0],
        std,
        ooms.join(",")
    ))
}

fn run_cli(dir: &Path, cfg: &Value, strategy: &str) -> Result<(i32, Value)> {
    let cfg_path = dir.join("config.json");
    std::fs::write(&cfg_path, cfg.to_string())?;
    let out = dir.join(format!("{strategy}.json"));
    let o = Command::new(env!("CARGO_BIN_EXE_pskv"))
        .args(["attack", "--config"])
        .arg(&cfg_path)
        .args(["--strategy", strategy, "--out"])
        .arg(&out)
        .env_remove("PSKV_SEED")
        .output()?;
    let code = o.status.code().context("killed")?;
    let report = serde_json::from_str(&std::fs::read_to_string(&out)?)?;
    Ok((code, report))
}

fn trajectory_invariance() -> Result<String> {
    let dir = tempfile::TempDir::new()?;
    let cfg = serde_json::json!({
        "data": {"prompts": ["Write a tutorial on"], "targets": ["Sure, here is"]},
        "attack": {"iterations": 50, "survivors": 4, "proposals_per_survivor": 4, "suffix_len": 10, "seed": 5}
    });
    let mut reports = Vec::new();
    for s in ["nocache", "standard", "pskv"] {
        let (code, r) = run_cli(dir.path(), &cfg, s)?;
        ensure!(code == 0, "{s} exited {code}");
        reports.push(r);
    }
    let curve = |v: &Value| serde_json::to_string(&v["best_loss_curve"]).unwrap();
    let finals = |v: &Value| serde_json::to_string(&v["prompts"][0]["best_suffix"]).unwrap();
    for r in &reports[1..] {
        ensure!(
            curve(r) == curve(&reports[0]),
            "curves differ for {}",
            r["strategy"]
        );
        ensure!(
            finals(r) == finals(&reports[0]),
            "final suffix differs for {}",
            r["strategy"]
        );
    }
    let c: Vec<f64> = serde_json::from_value(reports[0]["best_loss_curve"].clone())?;
    ensure!(c.len() == 51, "curve has {} points", c.len());
    ensure!(c.windows(2).all(|w| w[1] <= w[0]), "best loss increased");

    // Planted target: the greedy continuation of prompt ⊕ initial suffix.
    let w = toy();
    let prompt: Vec<TokenId> = b"Say it".iter().map(|&b| b as TokenId).collect();
    let mut ctx = [prompt.clone(), vec![33; 10]].concat();
    let mut target = Vec::new();
    for _ in 0..6 {
        let l = w.forward_full(&ctx)?;
        let t = argmax_token(l.row(l.rows() - 1), w.config().pad_id());
        target.push(t);
        ctx.push(t);
    }
    let planted = serde_json::json!({
        "data": {"prompts": [prompt], "targets": [target]},
        "attack": {"iterations": 3, "survivors": 2, "proposals_per_survivor": 2, "suffix_len": 10, "success_threshold": 1e-9}
    });
    let (code, r) = run_cli(dir.path(), &planted, "pskv")?;
    ensure!(code == 0, "planted run exited {code}");
    ensure!(
        r["success"] == true && r["prompts"][0]["exact_match"] == true,
        "planted target not matched"
    );
    Ok(format!(
        "3 strategies byte-identical over E=50, best loss {:.4} → {:.4} monotone, planted target exact-matched",
        c[0], c[50]
    ))
}

fn directional_timing() -> Result<String> {
    let w = toy();
    let (p, t) = synthetic_pairs(0, 1, 78, 20, 257);
    let cfg = AttackConfig {
        iterations: 2,
        ..AttackConfig::default()
    };
    ensure!(cfg.width() == 64, "width {}", cfg.width());
    let mut wins = 0;
    let mut ratios = Vec::new();
    for _ in 0..10 {
        let nc = run_attack(
            &w,
            &p,
            &t,
            &cfg,
            CacheStrategy::NoCache,
            &RunOptions::default(),
        )?;
        let ps = run_attack(
            &w,
            &p,
            &t,
            &cfg,
            CacheStrategy::Pskv,
            &RunOptions::default(),
        )?;
        if ps.wall_ms < nc.wall_ms {
            wins += 1;
        }
        ratios.push(nc.wall_ms / ps.wall_ms);
    }
    ratios.sort_by(f64::total_cmp);
    ensure!(wins >= 9, "pskv faster in only {wins}/10 runs");
    Ok(format!(
        "pskv faster in {wins}/10 runs at width 64 (median speedup ×{:.2})",
        ratios[5]
    ))
}

fn gqa_bytes() -> Result<String> {
    let mha = ModelConfig {
        n_q_heads: 4,
        n_kv_heads: 4,
        ..ModelConfig::default()
    };
    let gqa = ModelConfig {
        n_kv_heads: 1,
        ..mha.clone()
    };
    let (wm, wg) = (
        ModelWeights::<f32>::init(&mha)?,
        ModelWeights::<f32>::init(&gqa)?,
    );
    let (p, t) = synthetic_pairs(0, 2, 30, 10, 257);
    let cfg = AttackConfig {
        iterations: 2,
        survivors: 4,
        proposals_per_survivor: 4,
        suffix_len: 8,
        ..AttackConfig::default()
    };
    let mut figures = 0;
    for s in CacheStrategy::ALL {
        for mode in [PskvMode::IndexMapped, PskvMode::LayerExpand] {
            let opts = RunOptions {
                pskv_mode: mode,
                ..RunOptions::default()
            };
            let a = run_attack(&wm, &p, &t, &cfg, s, &opts)?;
            let g = run_attack(&wg, &p, &t, &cfg, s, &opts)?;
            for (name, x, y) in [
                ("peak", a.peak_bytes, g.peak_bytes),
                ("prefix", a.prefix_bytes, g.prefix_bytes),
                ("predicted", a.predicted_bytes, g.predicted_bytes),
                ("allowance", a.overhead_allowance, g.overhead_allowance),
                (
                    "peak_prefix",
                    a.memory.peak_prefix_bytes,
                    g.memory.peak_prefix_bytes,
                ),
            ] {
                ensure!(x == 4 * y, "{s} {mode:?} {name}: {x} vs {y}");
                figures += 1;
            }
        }
    }
    // Equivalence on grouped models: every generated case with 4 kv heads per group.
    let mut cases = 0;
    for mut spec in case_specs(20, 77) {
        spec.model.n_kv_heads = spec.model.n_q_heads / 4;
        let res = check_case::<f32>(&spec, false)?;
        ensure!(
            res.passed,
            "case {} failed under 4:1 grouping: {:?}",
            spec.index,
            res.checks
        );
        cases += 1;
    }
    Ok(format!(
        "{figures} byte figures shrink exactly 4×; equivalence holds on {cases} grouped configs"
    ))
}

fn main() {
    type Criterion = (&'static str, fn() -> Result<String>);
    let criteria: [Criterion; 7] = [
        ("equivalence suite", equivalence),
        ("exact compute counts", compute_counts),
        ("memory formulas", memory_formulas),
        ("scalability shape", scalability),
        ("trajectory invariance", trajectory_invariance),
        ("directional timing", directional_timing),
        ("GQA byte model", gqa_bytes),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(e) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {e:#}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
