//! Exact-count validation of the compute predictors over a grid of
//! (N_p, L_dec, N_cand), plus least-squares checks of the asymptotic forms.

use serde::{Deserialize, Serialize};

use crate::align::{align_batch_with, synthetic_pairs, write_suffix_candidates, AlignOptions};
use crate::attack::Evaluator;
use crate::bench::accountant::Accountant;
use crate::bench::{cells_per_pair, predicted_cells, triangular, Counters};
use crate::error::{Error, Result};
use crate::kvcache::{CacheStrategy, PskvMode};
use crate::model::{ModelWeights, TokenId};
use crate::numerics::Element;
use crate::rng::DetRng;

/// Minimum coefficient of determination for the asymptotic fits.
pub const MIN_R2: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComplexityGrid {
    pub prefix_lens: Vec<usize>,
    /// Suffix + target length; split as `ceil(L/2)` suffix tokens and the rest target.
    pub decode_lens: Vec<usize>,
    /// Total candidate rows, spread evenly over the prompts.
    pub candidates: Vec<usize>,
    pub n_prompts: usize,
    pub strategies: Vec<CacheStrategy>,
    pub seed: u64,
}

impl Default for ComplexityGrid {
    fn default() -> Self {
        Self {
            prefix_lens: vec![4, 16, 64],
            decode_lens: vec![4, 16, 32],
            candidates: vec![1, 4, 8],
            n_prompts: 1,
            strategies: CacheStrategy::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl ComplexityGrid {
    pub fn validate(&self) -> Result<()> {
        let distinct = |v: &[usize]| {
            let mut v = v.to_vec();
            v.sort_unstable();
            v.dedup();
            v.len()
        };
        for (field, v) in [
            ("complexity.prefix_lens", &self.prefix_lens),
            ("complexity.decode_lens", &self.decode_lens),
            ("complexity.candidates", &self.candidates),
        ] {
            if distinct(v) < 3 {
                return Err(Error::invalid(field, "needs at least 3 distinct values"));
            }
        }
        if self.n_prompts == 0 {
            return Err(Error::invalid("complexity.n_prompts", "must be at least 1"));
        }
        if let Some(&l) = self.decode_lens.iter().find(|&&l| l < 2) {
            return Err(Error::invalid(
                "complexity.decode_lens",
                format!("{l} leaves no room for both a suffix and a target token"),
            ));
        }
        if let Some(&n) = self
            .candidates
            .iter()
            .find(|&&n| n == 0 || n % self.n_prompts != 0)
        {
            return Err(Error::invalid(
                "complexity.candidates",
                format!(
                    "{n} is not a positive multiple of n_prompts={}",
                    self.n_prompts
                ),
            ));
        }
        if self.strategies.is_empty() {
            return Err(Error::invalid("complexity.strategies", "must be nonempty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityPoint {
    pub strategy: CacheStrategy,
    pub n_p: usize,
    pub l_dec: usize,
    pub n_cand: usize,
    pub n_prompts: usize,
    pub cells_measured: u64,
    pub cells_predicted: u64,
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub points: Vec<ComplexityPoint>,
    pub all_exact: bool,
    /// StandardKV and PSKV measured identical cells at every point.
    pub cached_parity: bool,
    pub nocache_r2: Option<f64>,
    pub cached_r2: Option<f64>,
    pub passed: bool,
}

/// Ordinary least squares `y ≈ a·x + b`; returns R².
pub fn linear_fit_r2(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    if x.len() < 2 || x.len() != y.len() {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - slope * a - icpt).powi(2))
        .sum();
    Some(1.0 - sse / syy)
}

/// Measures one teacher-forced evaluation of `n_cand` rows at every grid
/// point and strategy. Any exact-count mismatch is an error naming the point.
pub fn verify_complexity<T: Element>(
    weights: &ModelWeights<T>,
    grid: &ComplexityGrid,
) -> Result<ComplexityReport> {
    grid.validate()?;
    let cfg = weights.config();
    let vocab = cfg.vocab_size;
    let cpp = cells_per_pair(cfg);
    let opts = AlignOptions {
        allow_empty_prompts: true,
        ..AlignOptions::new(cfg.pad_id())
    };
    let b = grid.n_prompts;
    let mut points = Vec::new();
    for &n_p in &grid.prefix_lens {
        for &l_dec in &grid.decode_lens {
            let n_s = l_dec.div_ceil(2);
            let n_t = l_dec - n_s;
            let (prompts, targets) = synthetic_pairs(grid.seed, b, n_p, n_t, vocab);
            let base = align_batch_with(&prompts, &targets, n_s, &opts)?;
            for &n_cand in &grid.candidates {
                let mut rng = DetRng::new(grid.seed ^ 0x5eed);
                let suffixes: Vec<Vec<TokenId>> = (0..n_cand)
                    .map(|_| (0..n_s).map(|_| rng.below(vocab - 1) as TokenId).collect())
                    .collect();
                let batch = write_suffix_candidates(&base, &suffixes)?;
                for &strategy in &grid.strategies {
                    let counters = Counters::new();
                    let acct = Accountant::unlimited();
                    let mut ev = Evaluator::new(
                        weights,
                        &batch,
                        strategy,
                        PskvMode::IndexMapped,
                        n_cand / b,
                        &acct,
                        &counters,
                    )?;
                    ev.losses(&batch)?;
                    let measured = counters.attention_cells();
                    let predicted = predicted_cells(strategy, 1, n_cand, n_p, l_dec, b) * cpp;
                    if measured != predicted {
                        return Err(Error::ComplexityMismatch {
                            point: format!(
                                "strategy={strategy} N_p={n_p} L_dec={l_dec} N_cand={n_cand} B={b}"
                            ),
                            measured,
                            predicted,
                        });
                    }
                    points.push(ComplexityPoint {
                        strategy,
                        n_p,
                        l_dec,
                        n_cand,
                        n_prompts: b,
                        cells_measured: measured,
                        cells_predicted: predicted,
                        exact: true,
                    });
                }
            }
        }
    }

    let cached_parity = points
        .iter()
        .filter(|p| p.strategy == CacheStrategy::Standard)
        .all(|s| {
            points
                .iter()
                .filter(|p| {
                    p.strategy == CacheStrategy::Pskv
                        && (p.n_p, p.l_dec, p.n_cand) == (s.n_p, s.l_dec, s.n_cand)
                })
                .all(|p| p.cells_measured == s.cells_measured)
        });

    // Per-row pair counts against the leading-order forms.
    let fit = |cached: bool| {
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for p in points.iter().filter(|p| p.strategy.is_cached() == cached) {
            let pairs = p.cells_measured / cpp;
            let (x, y) = if cached {
                let per_row = (pairs - b as u64 * triangular(p.n_p)) as f64 / p.n_cand as f64;
                ((p.l_dec * (2 * p.n_p + p.l_dec)) as f64, per_row)
            } else {
                (
                    ((p.n_p + p.l_dec) * (p.n_p + p.l_dec)) as f64,
                    pairs as f64 / p.n_cand as f64,
                )
            };
            xs.push(x);
            ys.push(y);
        }
        linear_fit_r2(&xs, &ys)
    };
    let nocache_r2 = fit(false);
    let cached_r2 = fit(true);
    let fits_ok = [nocache_r2, cached_r2]
        .iter()
        .all(|r| r.is_none_or(|r| r >= MIN_R2));
    Ok(ComplexityReport {
        all_exact: true,
        cached_parity,
        passed: cached_parity && fits_ok,
        points,
        nocache_r2,
        cached_r2,
    })
}
