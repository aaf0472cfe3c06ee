//! Prefix-shared KV caching for suffix-search workloads.
//!
//! A toy decoder-only transformer with three interchangeable cache
//! strategies (no cache, physically duplicated prefix cache, and a single
//! shared prefix cache read layer by layer), suffix-centric batch alignment,
//! forward-only suffix search, and exact compute/memory instrumentation.

pub mod align;
pub mod attack;
pub mod bench;
pub mod error;
pub mod kvcache;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod verify;

pub use align::{align_batch, position_ids, write_suffix_candidates, AlignedBatch};
pub use attack::{run_attack, AttackAlgo, AttackConfig, AttackReport, AttackState, RunOptions};
pub use bench::accountant::{Accountant, AccountantSnapshot, MemKind};
pub use bench::{predicted_cache_bytes, predicted_cells, BenchReport, CounterSnapshot, Counters};
pub use error::{Error, Result};
pub use kvcache::{cache_bytes, CacheStrategy, CandidateCache, PrefixCache, PskvMode};
pub use model::{init_model, ModelConfig, ModelWeights, Role, TokenId, TokenSeq};
pub use numerics::{Element, Matrix, Precision};
