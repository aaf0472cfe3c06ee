//! Equivalence suite: the three cache strategies, the aligned batch layout
//! and incremental decoding must all reproduce a plain unpadded forward pass
//! bit for bit, with exact cell counts and exact cache byte figures.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{align_batch, position_ids, write_suffix_candidates, AlignedBatch};
use crate::attack::Evaluator;
use crate::bench::accountant::{Accountant, MemKind};
use crate::bench::{cells_per_pair, layer_expansion_bytes, predicted_cells_ragged, Counters};
use crate::error::Result;
use crate::kvcache::{cache_bytes, CacheStrategy, KvStore, NoPrefix, PskvMode};
use crate::model::{
    single_row_store, ModelConfig, ModelWeights, Role, StepInput, TokenId, TokenSeq,
};
use crate::numerics::{CellCounter, Element, Matrix, Precision};
use crate::rng::DetRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyOptions {
    pub n_configs: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Corrupt one shared-prefix value before evaluation; the suite must fail.
    #[serde(skip)]
    pub inject_fault: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            n_configs: 20,
            seed: 0,
            precision: Precision::F32,
            inject_fault: false,
        }
    }
}

/// One randomly drawn configuration of the family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSpec {
    pub index: usize,
    pub model: ModelConfig,
    pub prefix_lens: Vec<usize>,
    pub suffix_len: usize,
    pub target_lens: Vec<usize>,
    pub rows_per_prompt: usize,
    pub data_seed: u64,
}

impl CaseSpec {
    pub fn n_prompts(&self) -> usize {
        self.prefix_lens.len()
    }

    pub fn n_cand(&self) -> usize {
        self.n_prompts() * self.rows_per_prompt
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub spec: CaseSpec,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub precision: Precision,
    pub seed: u64,
    pub cases: Vec<CaseResult>,
    pub passed: bool,
    /// Every strategy produced bit-identical logits in every case.
    pub bit_identical: bool,
    pub failures: Vec<String>,
}

/// Draws the configuration family: layers cycle 1–4 and KV grouping cycles
/// 1×/2×/4× so every value appears; everything else is drawn.
pub fn case_specs(n: usize, seed: u64) -> Vec<CaseSpec> {
    let mut rng = DetRng::new(seed);
    (0..n)
        .map(|index| {
            let group = [1, 2, 4][index % 3];
            let n_q = [4, 8][rng.below(2)];
            let d_head = if n_q == 4 { [4, 8, 16] } else { [2, 4, 8] }[rng.below(3)];
            let model = ModelConfig {
                n_layers: 1 + index % 4,
                d_model: n_q * d_head,
                n_q_heads: n_q,
                n_kv_heads: n_q / group,
                seed: rng.next_u64(),
                ..ModelConfig::default()
            };
            let b = if index == 0 { 1 } else { 1 + rng.below(4) };
            let rows_per_prompt = if index == 0 { 1 } else { 1 + rng.below(64 / b) };
            CaseSpec {
                index,
                model,
                prefix_lens: (0..b).map(|_| 4 + rng.below(61)).collect(),
                suffix_len: 4 + rng.below(17),
                target_lens: (0..b).map(|_| 4 + rng.below(29)).collect(),
                rows_per_prompt,
                data_seed: rng.next_u64(),
            }
        })
        .collect()
}

pub fn run_equivalence_suite(opts: &VerifyOptions) -> Result<VerifyReport> {
    match opts.precision {
        Precision::F32 => run_suite::<f32>(opts),
        Precision::F64 => run_suite::<f64>(opts),
    }
}

fn run_suite<T: Element>(opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut cases = Vec::with_capacity(opts.n_configs);
    for spec in case_specs(opts.n_configs, opts.seed) {
        cases.push(check_case::<T>(&spec, opts.inject_fault)?);
    }
    let failures: Vec<String> = cases
        .iter()
        .flat_map(|c| {
            c.checks.iter().filter(|k| !k.passed).map(move |k| {
                format!(
                    "case {} (model seed {}, {:?}): {} failed: {}",
                    c.spec.index,
                    c.spec.model.seed,
                    c.spec.model,
                    k.name,
                    k.detail.as_deref().unwrap_or("")
                )
            })
        })
        .collect();
    let bit_identical = cases.iter().all(|c| {
        c.checks
            .iter()
            .filter(|k| k.name == "strategy_bit_identity")
            .all(|k| k.passed)
    });
    Ok(VerifyReport {
        precision: opts.precision,
        seed: opts.seed,
        passed: failures.is_empty(),
        bit_identical,
        cases,
        failures,
    })
}

/// Aligned candidate batch of a case: seeded prompts, targets and suffixes.
pub fn case_batch(spec: &CaseSpec) -> Result<AlignedBatch> {
    let vocab = spec.model.vocab_size;
    let mut rng = DetRng::new(spec.data_seed);
    let mut draw =
        |n: usize| -> Vec<TokenId> { (0..n).map(|_| rng.below(vocab - 1) as TokenId).collect() };
    let prompts: Vec<TokenSeq> = spec
        .prefix_lens
        .iter()
        .map(|&n| TokenSeq::new(draw(n), Role::Prefix))
        .collect();
    let targets: Vec<TokenSeq> = spec
        .target_lens
        .iter()
        .map(|&n| TokenSeq::new(draw(n), Role::Target))
        .collect();
    let base = align_batch(&prompts, &targets, spec.suffix_len, spec.model.pad_id())?;
    let suffixes: Vec<Vec<TokenId>> = (0..spec.n_cand()).map(|_| draw(spec.suffix_len)).collect();
    write_suffix_candidates(&base, &suffixes)
}

fn first_bit_mismatch<T: Element>(a: &[T], b: &[T]) -> Option<usize> {
    if a.len() != b.len() {
        return Some(a.len().min(b.len()));
    }
    a.iter().zip(b).position(|(x, y)| x.bits() != y.bits())
}

fn check(name: &str, failure: Option<String>) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed: failure.is_none(),
        detail: failure,
    }
}

struct StrategyRun<T> {
    label: &'static str,
    logits: Vec<Matrix<T>>,
    cells: u64,
    predicted_cells: u64,
    prefix_bytes: usize,
    expected_prefix_bytes: usize,
}

pub fn check_case<T: Element>(spec: &CaseSpec, inject_fault: bool) -> Result<CaseResult> {
    let weights = ModelWeights::<T>::init(&spec.model)?;
    let cfg = weights.config().clone();
    let batch = case_batch(spec)?;
    let (b, n_cand, n_p) = (spec.n_prompts(), spec.n_cand(), batch.n_p_max());
    let rows: Vec<(usize, usize)> = (0..batch.rows())
        .map(|r| {
            (
                batch.position_base(r),
                batch.suffix_len() + batch.target_len_of_row(r),
            )
        })
        .collect();

    let variants = [
        ("nocache", CacheStrategy::NoCache, PskvMode::IndexMapped),
        ("standard", CacheStrategy::Standard, PskvMode::IndexMapped),
        ("pskv", CacheStrategy::Pskv, PskvMode::IndexMapped),
        (
            "pskv_layer_expand",
            CacheStrategy::Pskv,
            PskvMode::LayerExpand,
        ),
    ];
    let mut runs = Vec::with_capacity(variants.len());
    for (label, strategy, mode) in variants {
        let acct = Accountant::unlimited();
        let counters = Counters::new();
        let mut ev = Evaluator::new(
            &weights,
            &batch,
            strategy,
            mode,
            spec.rows_per_prompt,
            &acct,
            &counters,
        )?
        .parallel(true);
        if inject_fault && strategy == CacheStrategy::Pskv {
            if let Some(p) = ev.prefix_mut() {
                p.inject_fault(0);
            }
        }
        let logits = ev.forward(&batch, 0)?;
        let expected_prefix_bytes = match (strategy, mode) {
            (CacheStrategy::NoCache, _) => 0,
            (CacheStrategy::Standard, _) => cache_bytes(&cfg, n_cand, n_p),
            (_, PskvMode::IndexMapped) => cache_bytes(&cfg, b, n_p),
            (_, PskvMode::LayerExpand) => {
                cache_bytes(&cfg, b, n_p) + layer_expansion_bytes(&cfg, n_cand, n_p)
            }
        };
        runs.push(StrategyRun {
            label,
            logits,
            cells: counters.attention_cells(),
            predicted_cells: predicted_cells_ragged(
                strategy,
                batch.prefix_lens(),
                rows.iter().copied(),
            ) * cells_per_pair(&cfg),
            prefix_bytes: ev.observed_prefix_bytes(),
            expected_prefix_bytes,
        });
    }

    let mut checks = Vec::new();

    let reference = &runs[0];
    let mut identity = None;
    'outer: for run in &runs[1..] {
        for (r, (a, b)) in reference.logits.iter().zip(&run.logits).enumerate() {
            if let Some(i) = first_bit_mismatch(a.data(), b.data()) {
                identity = Some(format!(
                    "{} differs from nocache at row {r}, element {i}",
                    run.label
                ));
                break 'outer;
            }
        }
    }
    checks.push(check("strategy_bit_identity", identity));

    checks.push(check(
        "padding_neutrality",
        padding_check(&weights, &batch, &runs[2].logits)?,
    ));

    let cells = runs.iter().find(|r| r.cells != r.predicted_cells).map(|r| {
        format!(
            "{}: measured {} cells, predicted {}",
            r.label, r.cells, r.predicted_cells
        )
    });
    checks.push(check("exact_cells", cells));

    let bytes = runs
        .iter()
        .find(|r| r.prefix_bytes != r.expected_prefix_bytes)
        .map(|r| {
            format!(
                "{}: prefix bytes {}, expected {}",
                r.label, r.prefix_bytes, r.expected_prefix_bytes
            )
        });
    checks.push(check("prefix_bytes", bytes));

    checks.push(check(
        "cache_split_invariance",
        split_check(&weights, &batch, spec.data_seed)?,
    ));

    if cfg.group_size() > 1 {
        let seq = batch.unpadded_row(0);
        let gqa = weights.forward_full(&seq)?;
        let mha = weights.to_mha().forward_full(&seq)?;
        let ratio_ok = cache_bytes(&cfg, n_cand, n_p) * cfg.group_size()
            == cache_bytes(weights.to_mha().config(), n_cand, n_p);
        let failure = match first_bit_mismatch(gqa.data(), mha.data()) {
            Some(i) => Some(format!("grouped and widened logits differ at element {i}")),
            None if !ratio_ok => Some("cache bytes do not shrink by the grouping factor".into()),
            None => None,
        };
        checks.push(check("gqa_mha_equivalence", failure));
    }

    Ok(CaseResult {
        spec: spec.clone(),
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

/// Aligned-batch logits (a full padded pass over every real position, and
/// the shared-prefix decode band) against per-row unpadded oracles.
fn padding_check<T: Element>(
    weights: &ModelWeights<T>,
    batch: &AlignedBatch,
    pskv_logits: &[Matrix<T>],
) -> Result<Option<String>> {
    let acct = Accountant::unlimited();
    let mut store = KvStore::new(
        weights.config(),
        batch.rows(),
        batch.width(),
        MemKind::FullSequence,
        &acct,
    )?;
    let positions = position_ids(batch);
    let input = StepInput {
        tokens: batch.tokens(),
        positions: &positions,
        logits_from: 0,
    };
    let full = weights.forward_step(&input, &NoPrefix, &mut store, &CellCounter::new(), true)?;
    let oracles = (0..batch.rows())
        .into_par_iter()
        .map(|r| weights.forward_full(&batch.unpadded_row(r)))
        .collect::<Result<Vec<_>>>()?;
    let n_p = batch.n_p_max();
    for r in 0..batch.rows() {
        let mask = batch.attn_mask(r);
        for (c, &real) in mask.iter().enumerate() {
            if !real {
                continue;
            }
            let o = oracles[r].row(positions[r][c]);
            if let Some(i) = first_bit_mismatch(full[r].row(c), o) {
                return Ok(Some(format!("padded row {r} column {c} element {i}")));
            }
            if c >= n_p {
                if let Some(i) = first_bit_mismatch(pskv_logits[r].row(c - n_p), o) {
                    return Ok(Some(format!(
                        "shared-prefix row {r} column {c} element {i}"
                    )));
                }
            }
        }
    }
    Ok(None)
}

/// Two incremental chunks through a KV cache equal one full pass.
fn split_check<T: Element>(
    weights: &ModelWeights<T>,
    batch: &AlignedBatch,
    seed: u64,
) -> Result<Option<String>> {
    let mut rng = DetRng::new(seed ^ 0x5117);
    let r = rng.below(batch.rows());
    let seq = batch.unpadded_row(r);
    let oracle = weights.forward_full(&seq)?;
    let k = 1 + rng.below(seq.len() - 1);
    let acct = Accountant::unlimited();
    let mut store = single_row_store(weights, seq.len(), &acct)?;
    let counter = CellCounter::new();
    let a = weights.forward_with_cache(&seq[..k], &NoPrefix, &mut store, 0, &counter)?;
    let b = weights.forward_with_cache(&seq[k..], &NoPrefix, &mut store, k, &counter)?;
    for (t, row) in (0..a.rows())
        .map(|i| a.row(i))
        .chain((0..b.rows()).map(|i| b.row(i)))
        .enumerate()
    {
        if let Some(i) = first_bit_mismatch(row, oracle.row(t)) {
            return Ok(Some(format!("row {r} split at {k}: token {t} element {i}")));
        }
    }
    Ok(None)
}
