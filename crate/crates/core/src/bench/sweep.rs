//! Width × strategy sweeps over the attack loop.

use serde::{Deserialize, Serialize};

use crate::align::synthetic_pairs;
use crate::attack::{run_attack, AttackAlgo, AttackConfig, RunOptions};
use crate::bench::accountant::AccountantSnapshot;
use crate::bench::CounterSnapshot;
use crate::error::{Error, Result};
use crate::kvcache::{CacheStrategy, PskvMode};
use crate::model::{ModelWeights, TokenSeq};
use crate::numerics::Element;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchScenario {
    pub widths: Vec<usize>,
    pub strategies: Vec<CacheStrategy>,
    pub algo: AttackAlgo,
    /// `E` per cell.
    pub iterations: usize,
    /// `K` (random substitution) or `k2` (beam); the width fixes the other factor.
    pub survivors: usize,
    pub suffix_len: usize,
    pub seed: u64,
    pub budget: Option<usize>,
    pub pskv_mode: PskvMode,
    pub parallel: bool,
}

impl Default for BenchScenario {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64],
            strategies: CacheStrategy::ALL.to_vec(),
            algo: AttackAlgo::RandomSubstitution,
            iterations: 2,
            survivors: 4,
            suffix_len: 20,
            seed: 0,
            budget: None,
            pskv_mode: PskvMode::IndexMapped,
            parallel: false,
        }
    }
}

impl BenchScenario {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.strategies.is_empty() {
            return Err(Error::invalid("bench.widths", "grid must be nonempty"));
        }
        if self.survivors == 0 {
            return Err(Error::invalid("bench.survivors", "must be at least 1"));
        }
        for &w in &self.widths {
            if w == 0 || w % self.survivors != 0 {
                return Err(Error::invalid(
                    "bench.widths",
                    format!(
                        "width {w} is not a positive multiple of survivors={}",
                        self.survivors
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Attack configuration of one grid cell.
    pub fn attack_config(&self, width: usize) -> AttackConfig {
        let other = width / self.survivors;
        let mut cfg = AttackConfig {
            iterations: self.iterations,
            suffix_len: self.suffix_len,
            algo: self.algo,
            seed: self.seed,
            ..AttackConfig::default()
        };
        match self.algo {
            AttackAlgo::RandomSubstitution => {
                cfg.survivors = self.survivors;
                cfg.proposals_per_survivor = other;
            }
            AttackAlgo::Beam => {
                cfg.beam_k2 = self.survivors;
                cfg.beam_k1 = other;
            }
        }
        cfg
    }
}

/// The flat per-run record written to CSV; JSON reports carry the same fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub strategy: CacheStrategy,
    pub algo: AttackAlgo,
    pub width: usize,
    #[serde(rename = "B")]
    pub n_prompts: usize,
    #[serde(rename = "N_p")]
    pub n_p: usize,
    #[serde(rename = "L_dec")]
    pub l_dec: usize,
    #[serde(rename = "E")]
    pub iterations: usize,
    pub cells_measured: u64,
    pub cells_predicted: u64,
    pub peak_bytes: usize,
    pub prefix_bytes: usize,
    pub wall_ms: f64,
    pub oom: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    #[serde(flatten)]
    pub row: BenchRow,
    pub predicted_bytes: usize,
    pub overhead_allowance: usize,
    pub counters: CounterSnapshot,
    pub memory: AccountantSnapshot,
    pub attack: AttackConfig,
    pub oom_detail: Option<String>,
}

/// Synthetic uniform-length data for a sweep.
pub fn scenario_data(
    seed: u64,
    n_prompts: usize,
    prefix_len: usize,
    target_len: usize,
    vocab_size: usize,
) -> (Vec<TokenSeq>, Vec<TokenSeq>) {
    synthetic_pairs(seed, n_prompts, prefix_len, target_len, vocab_size)
}

/// Runs every (strategy, width) cell with identical seeds, strategy-major.
/// A simulated OOM becomes a row; a cell-count or memory-model violation in
/// a completed run is an error naming the cell.
pub fn run_benchmark<T: Element>(
    weights: &ModelWeights<T>,
    scenario: &BenchScenario,
    prompts: &[TokenSeq],
    targets: &[TokenSeq],
) -> Result<Vec<BenchReport>> {
    scenario.validate()?;
    let opts = RunOptions {
        pskv_mode: scenario.pskv_mode,
        parallel: scenario.parallel,
        budget: scenario.budget,
    };
    let mut out = Vec::with_capacity(scenario.widths.len() * scenario.strategies.len());
    for &strategy in &scenario.strategies {
        for &width in &scenario.widths {
            let cfg = scenario.attack_config(width);
            let r = run_attack(weights, prompts, targets, &cfg, strategy, &opts)?;
            let point = format!("strategy={strategy} width={width}");
            if !r.cells_match() {
                return Err(Error::ComplexityMismatch {
                    point,
                    measured: r.counters.attention_cells,
                    predicted: r.cells_predicted,
                });
            }
            if !r.bytes_within_model() {
                return Err(Error::MemoryModel {
                    point,
                    peak: r.peak_bytes,
                    bound: r.predicted_bytes + r.overhead_allowance,
                });
            }
            out.push(BenchReport {
                row: BenchRow {
                    strategy,
                    algo: cfg.algo,
                    width,
                    n_prompts: r.n_prompts,
                    n_p: r.n_p_max,
                    l_dec: r.l_dec,
                    iterations: cfg.iterations,
                    cells_measured: r.counters.attention_cells,
                    cells_predicted: r.cells_predicted,
                    peak_bytes: r.peak_bytes,
                    prefix_bytes: r.prefix_bytes,
                    wall_ms: r.wall_ms,
                    oom: r.oom,
                },
                predicted_bytes: r.predicted_bytes,
                overhead_allowance: r.overhead_allowance,
                counters: r.counters,
                memory: r.memory,
                attack: cfg,
                oom_detail: r.oom_detail,
            });
        }
    }
    Ok(out)
}
