use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use pskv_core::attack::{run_attack, AttackReport, RunOptions};
use pskv_core::bench::sweep::BenchRow;
use pskv_core::bench::{run_benchmark, verify_complexity, BenchReport, ComplexityReport};
use pskv_core::verify::{run_equivalence_suite, VerifyReport};
use pskv_core::{Element, ModelWeights, Precision};

use crate::config::{ReportFormat, RunConfig};

/// Process exit status of a command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    Failed,
    OutOfMemory,
}

impl Outcome {
    pub fn code(self) -> u8 {
        match self {
            Outcome::Ok => 0,
            Outcome::Failed => 1,
            Outcome::OutOfMemory => 2,
        }
    }
}

fn with_weights<R>(
    cfg: &RunConfig,
    f32_fn: impl FnOnce(&ModelWeights<f32>) -> pskv_core::Result<R>,
    f64_fn: impl FnOnce(&ModelWeights<f64>) -> pskv_core::Result<R>,
) -> Result<R> {
    Ok(match cfg.model.precision {
        Precision::F32 => f32_fn(&ModelWeights::init(&cfg.model)?)?,
        Precision::F64 => f64_fn(&ModelWeights::init(&cfg.model)?)?,
    })
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => {
            std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn emit_csv<T: Serialize>(rows: &[T], out: Option<&Path>) -> Result<()> {
    let sink: Box<dyn Write> = match out {
        Some(p) => {
            Box::new(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)
        }
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn verify(cfg: &RunConfig, inject_fault: bool) -> Result<(VerifyReport, Outcome)> {
    let mut opts = cfg.verify.clone();
    opts.inject_fault |= inject_fault;
    let report = run_equivalence_suite(&opts)?;
    for f in &report.failures {
        eprintln!("FAIL {f}");
    }
    eprintln!(
        "verify: {} configs, precision {:?}, seed {}: {}{}",
        report.cases.len(),
        report.precision,
        report.seed,
        if report.passed {
            "all checks passed"
        } else {
            "FAILED"
        },
        if report.bit_identical {
            ", bit-identical"
        } else {
            ""
        }
    );
    match cfg.format {
        ReportFormat::Json => emit_json(&report, cfg.out.as_deref())?,
        ReportFormat::Csv => {
            #[derive(Serialize)]
            struct Row<'a> {
                case: usize,
                check: &'a str,
                passed: bool,
                detail: &'a str,
            }
            let rows: Vec<Row> = report
                .cases
                .iter()
                .flat_map(|c| {
                    c.checks.iter().map(|k| Row {
                        case: c.spec.index,
                        check: &k.name,
                        passed: k.passed,
                        detail: k.detail.as_deref().unwrap_or(""),
                    })
                })
                .collect();
            emit_csv(&rows, cfg.out.as_deref())?
        }
    }
    let outcome = if report.passed {
        Outcome::Ok
    } else {
        Outcome::Failed
    };
    Ok((report, outcome))
}

fn attack_with<T: Element>(
    w: &ModelWeights<T>,
    cfg: &RunConfig,
) -> pskv_core::Result<AttackReport> {
    let (prompts, targets) = cfg.sequences();
    let opts = RunOptions {
        pskv_mode: cfg.pskv_mode,
        parallel: cfg.parallel,
        budget: cfg.budget,
    };
    run_attack(w, &prompts, &targets, &cfg.attack, cfg.strategy, &opts)
}

pub fn attack(cfg: &RunConfig) -> Result<(AttackReport, Outcome)> {
    let report = with_weights(cfg, |w| attack_with(w, cfg), |w| attack_with(w, cfg))?;
    eprintln!(
        "attack: strategy {}, {} iterations, best loss {:.6}, success {}, cells {} (predicted {}), peak {} bytes{}",
        report.strategy,
        report.iterations_run,
        report.best_loss_curve.last().copied().unwrap_or(f64::NAN),
        report.success,
        report.counters.attention_cells,
        report.cells_predicted,
        report.peak_bytes,
        if report.oom { ", OUT OF MEMORY" } else { "" }
    );
    match cfg.format {
        ReportFormat::Json => emit_json(&report, cfg.out.as_deref())?,
        ReportFormat::Csv => emit_csv(&[attack_row(&report, cfg)], cfg.out.as_deref())?,
    }
    let outcome = if report.oom {
        Outcome::OutOfMemory
    } else if !report.cells_match() || !report.bytes_within_model() {
        Outcome::Failed
    } else {
        Outcome::Ok
    };
    Ok((report, outcome))
}

fn attack_row(r: &AttackReport, cfg: &RunConfig) -> BenchRow {
    BenchRow {
        strategy: r.strategy,
        algo: r.algo,
        width: r.width,
        n_prompts: r.n_prompts,
        n_p: r.n_p_max,
        l_dec: r.l_dec,
        iterations: cfg.attack.iterations,
        cells_measured: r.counters.attention_cells,
        cells_predicted: r.cells_predicted,
        peak_bytes: r.peak_bytes,
        prefix_bytes: r.prefix_bytes,
        wall_ms: r.wall_ms,
        oom: r.oom,
    }
}

fn bench_with<T: Element>(
    w: &ModelWeights<T>,
    cfg: &RunConfig,
) -> pskv_core::Result<Vec<BenchReport>> {
    let (prompts, targets) = cfg.sequences();
    run_benchmark(w, &cfg.bench, &prompts, &targets)
}

pub fn bench(cfg: &RunConfig) -> Result<(Vec<BenchReport>, Outcome)> {
    let rows = with_weights(cfg, |w| bench_with(w, cfg), |w| bench_with(w, cfg))?;
    for r in &rows {
        eprintln!(
            "bench: {:>8} width {:>3}: cells {} peak {} prefix {} {:.1} ms{}",
            r.row.strategy,
            r.row.width,
            r.row.cells_measured,
            r.row.peak_bytes,
            r.row.prefix_bytes,
            r.row.wall_ms,
            if r.row.oom { " OOM" } else { "" }
        );
    }
    match cfg.format {
        ReportFormat::Json => emit_json(&rows, cfg.out.as_deref())?,
        ReportFormat::Csv => {
            let flat: Vec<&BenchRow> = rows.iter().map(|r| &r.row).collect();
            emit_csv(&flat, cfg.out.as_deref())?
        }
    }
    let outcome = if rows.iter().any(|r| r.row.oom) {
        Outcome::OutOfMemory
    } else {
        Outcome::Ok
    };
    Ok((rows, outcome))
}

pub fn complexity(cfg: &RunConfig) -> Result<(ComplexityReport, Outcome)> {
    let report = with_weights(
        cfg,
        |w| verify_complexity(w, &cfg.complexity),
        |w| verify_complexity(w, &cfg.complexity),
    )?;
    eprintln!(
        "complexity: {} points, all exact {}, cached parity {}, R² nocache {:?} cached {:?}",
        report.points.len(),
        report.all_exact,
        report.cached_parity,
        report.nocache_r2,
        report.cached_r2
    );
    match cfg.format {
        ReportFormat::Json => emit_json(&report, cfg.out.as_deref())?,
        ReportFormat::Csv => emit_csv(&report.points, cfg.out.as_deref())?,
    }
    let outcome = if report.passed {
        Outcome::Ok
    } else {
        Outcome::Failed
    };
    Ok((report, outcome))
}
