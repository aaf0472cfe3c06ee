//! Shared workloads for the criterion benchmarks.

use pskv_core::align::synthetic_pairs;
use pskv_core::attack::AttackConfig;
use pskv_core::{ModelConfig, ModelWeights, TokenSeq};

/// The default toy model with one synthetic prompt of `prefix_len` tokens.
pub struct Workload {
    pub weights: ModelWeights<f32>,
    pub prompts: Vec<TokenSeq>,
    pub targets: Vec<TokenSeq>,
}

impl Workload {
    pub fn new(prefix_len: usize, target_len: usize) -> Self {
        let config = ModelConfig::default();
        let (prompts, targets) = synthetic_pairs(0, 1, prefix_len, target_len, config.vocab_size);
        Self {
            weights: ModelWeights::init(&config).expect("default config is valid"),
            prompts,
            targets,
        }
    }
}

/// One iteration at `width` candidates (4 survivors), suffix length 20.
pub fn one_iteration(width: usize) -> AttackConfig {
    AttackConfig {
        iterations: 1,
        survivors: 4,
        proposals_per_survivor: width / 4,
        ..AttackConfig::default()
    }
}
