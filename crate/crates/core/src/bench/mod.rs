//! Instrumentation and validation: counters, byte accounting, closed-form
//! predictors, and the sweep and complexity drivers built on them.

pub mod accountant;
pub mod complexity;
pub mod predict;
pub mod sweep;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::numerics::CellCounter;

pub use complexity::{verify_complexity, ComplexityGrid, ComplexityPoint, ComplexityReport};
pub use predict::{
    appended_cells, cells_per_pair, layer_expansion_bytes, predicted_beam_cells,
    predicted_cache_bytes, predicted_cells, predicted_cells_ragged, predicted_prefix_bytes,
    triangular,
};
pub use sweep::{run_benchmark, BenchReport, BenchScenario};

/// Run-level operation counters. All fields only grow.
#[derive(Debug, Default)]
pub struct Counters {
    pub attention_cells: CellCounter,
    prefix_forwards: AtomicU64,
    candidate_token_passes: AtomicU64,
}

impl Counters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_prefix_forwards(&self, n: u64) {
        self.prefix_forwards.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_candidate_tokens(&self, n: u64) {
        self.candidate_token_passes.fetch_add(n, Ordering::Relaxed);
    }

    pub fn attention_cells(&self) -> u64 {
        self.attention_cells.get()
    }

    pub fn prefix_forwards(&self) -> u64 {
        self.prefix_forwards.load(Ordering::Relaxed)
    }

    pub fn candidate_token_passes(&self) -> u64 {
        self.candidate_token_passes.load(Ordering::Relaxed)
    }

    pub fn snapshot(&self, wall_ms: f64) -> CounterSnapshot {
        CounterSnapshot {
            attention_cells: self.attention_cells(),
            prefix_forwards: self.prefix_forwards(),
            candidate_token_passes: self.candidate_token_passes(),
            wall_ms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CounterSnapshot {
    pub attention_cells: u64,
    pub prefix_forwards: u64,
    pub candidate_token_passes: u64,
    pub wall_ms: f64,
}
