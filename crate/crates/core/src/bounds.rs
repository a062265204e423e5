//! Log-sum-exp sandwich bounds and the upper bound on average positive-pair
//! similarity implied by them, plus a seeded Monte Carlo verifier.
//!
//! For a batch of `N` pairs at temperature `τ` with PaperN loss `ℒ`:
//!
//! ```text
//! paper bound:  τ·log(2N)   − τ·ℒ + (τ/N)·Σ_anchors max_k       x[i][k]
//! strict bound: τ·log(2N−1) − τ·ℒ + (τ/N)·Σ_anchors max_{k≠i}   x[i][k]
//! ```
//!
//! The paper bound includes the self-similarity `x[i][i] = 1/τ` in the max and
//! counts `2N` LSE arguments; the strict bound uses exactly the `2N − 1`
//! arguments of the loss's LSE and is never larger.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{anchors, logsumexp, nt_xent_from_matrix, AnchorMode, LossBreakdown, LossConfig};
use crate::random::{rng_for, EmbeddingDistribution};
use crate::similarity::{cosine_sim, similarity_matrix, EmbeddingBatch};

/// Absolute slack tolerated before a bound counts as violated.
pub const VIOLATION_SLACK: f64 = 1e-9;

/// `max(xs) ≤ LSE(xs) ≤ max(xs) + log n`, with the two gaps computed
/// directly rather than by subtraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LseBounds {
    pub lower: f64,
    pub value: f64,
    pub upper: f64,
    pub n: usize,
    /// `value - lower`, i.e. `log(1 + Σ_{others} exp(x - max))`.
    pub excess: f64,
    /// `log(value - lower)`. Stays finite when `excess` underflows to zero
    /// because every other argument is hundreds of units below the max;
    /// `-inf` exactly when `n = 1`.
    pub log_excess: f64,
    /// `upper - value`, i.e. `-log(mean exp(x - max))`.
    pub slack: f64,
}

pub fn lse_bounds(xs: &[f64]) -> Result<LseBounds> {
    let value = logsumexp(xs)?;
    let (arg_max, lower) = xs
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, x)| if x > best.1 { (i, x) } else { best });
    let n = xs.len();
    let upper = lower + (n as f64).ln();

    let shifted: Vec<f64> = xs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg_max)
        .map(|(_, x)| x - lower)
        .collect();
    let (excess, log_excess) = if shifted.is_empty() {
        (0.0, f64::NEG_INFINITY)
    } else {
        // others = log Σ exp(x - max) over the non-max arguments, ≤ log(n - 1).
        let others = logsumexp(&shifted)?;
        let excess = others.exp().ln_1p();
        // log(log1p(e^y)) = y + log1p(-e^y/2 + ...) for very negative y.
        let log_excess = if others < -30.0 {
            others - 0.5 * others.exp()
        } else {
            excess.ln()
        };
        (excess, log_excess)
    };
    let mean_shifted = (shifted.iter().map(|x| x.exp()).sum::<f64>() + 1.0) / n as f64;
    let slack = -mean_shifted.ln();

    Ok(LseBounds {
        lower,
        value,
        upper,
        n,
        excess,
        log_excess,
        slack,
    })
}

/// Mean cosine similarity over the `N` positive pairs.
pub fn avg_positive_similarity(batch: &EmbeddingBatch) -> Result<f64> {
    let pairs = batch.pairs();
    let mut sum = 0.0;
    for t in 0..pairs {
        sum += cosine_sim(batch.row(2 * t), batch.row(2 * t + 1))?;
    }
    Ok(sum / pairs as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub loss: LossBreakdown,
    pub avg_pos_sim: f64,
    pub paper_bound: f64,
    pub strict_bound: f64,
    pub paper_gap: f64,
    pub strict_gap: f64,
}

impl BoundReport {
    pub fn paper_violated(&self) -> bool {
        self.paper_gap < -VIOLATION_SLACK
    }

    pub fn strict_violated(&self) -> bool {
        self.strict_gap < -VIOLATION_SLACK
    }

    /// The strict bound exceeds the paper bound beyond the slack.
    pub fn ordering_violated(&self) -> bool {
        self.strict_bound > self.paper_bound + VIOLATION_SLACK
    }
}

pub fn similarity_bound(batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<BoundReport> {
    if cfg.anchor_mode() != AnchorMode::PaperN {
        return Err(Error::UnsupportedMode);
    }
    let tau = cfg.tau();
    let sims = similarity_matrix(batch, tau)?;
    let loss = nt_xent_from_matrix(&sims, AnchorMode::PaperN)?;
    let pairs = batch.pairs() as f64;
    let rows = batch.len();

    let mut max_all = 0.0;
    let mut max_others = 0.0;
    for (a, _) in anchors(rows, AnchorMode::PaperN) {
        let row = sims.scaled_row(a);
        max_all += row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max_others += row
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != a)
            .map(|(_, &x)| x)
            .fold(f64::NEG_INFINITY, f64::max);
    }

    let paper_bound = tau * (rows as f64).ln() - tau * loss.total + tau / pairs * max_all;
    let strict_bound =
        tau * ((rows - 1) as f64).ln() - tau * loss.total + tau / pairs * max_others;
    let avg_pos_sim = avg_positive_similarity(batch)?;
    Ok(BoundReport {
        loss,
        avg_pos_sim,
        paper_bound,
        strict_bound,
        paper_gap: paper_bound - avg_pos_sim,
        strict_gap: strict_bound - avg_pos_sim,
    })
}

/// Cartesian grid of Monte Carlo cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyGrid {
    pub pairs: Vec<usize>,
    pub dims: Vec<usize>,
    pub taus: Vec<f64>,
    pub distributions: Vec<EmbeddingDistribution>,
    pub trials_per_cell: usize,
}

impl Default for VerifyGrid {
    fn default() -> Self {
        Self {
            pairs: vec![2, 4, 8, 16, 32],
            dims: vec![3, 16],
            taus: vec![0.05, 0.1, 0.5, 1.0],
            distributions: vec![
                EmbeddingDistribution::UniformSphere,
                EmbeddingDistribution::Gaussian,
                EmbeddingDistribution::Clustered { noise: 0.05 },
            ],
            trials_per_cell: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub pairs: usize,
    pub dim: usize,
    pub tau: f64,
    pub distribution: EmbeddingDistribution,
}

impl VerifyGrid {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidGrid(msg.into()));
        if self.trials_per_cell == 0 {
            return bad("trials_per_cell must be at least 1");
        }
        if self.pairs.is_empty()
            || self.dims.is_empty()
            || self.taus.is_empty()
            || self.distributions.is_empty()
        {
            return bad("every grid axis needs at least one value");
        }
        if self.pairs.contains(&0) {
            return bad("pair counts must be at least 1");
        }
        if self.dims.contains(&0) {
            return bad("dimensions must be at least 1");
        }
        if self.taus.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return bad("temperatures must be finite and positive");
        }
        for d in &self.distributions {
            if let EmbeddingDistribution::Clustered { noise } = d {
                if !(noise.is_finite() && *noise >= 0.0) {
                    return bad("clustered noise must be finite and non-negative");
                }
            }
        }
        Ok(())
    }

    /// Cells in a fixed order: pairs, then dims, then taus, then
    /// distributions, with the last axis varying fastest.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &pairs in &self.pairs {
            for &dim in &self.dims {
                for &tau in &self.taus {
                    for &distribution in &self.distributions {
                        out.push(Cell {
                            pairs,
                            dim,
                            tau,
                            distribution,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: Cell,
    pub trials: usize,
    pub violations_paper: usize,
    pub violations_strict: usize,
    pub violations_ordering: usize,
    pub min_paper_gap: f64,
    pub min_strict_gap: f64,
    pub max_avg_pos_sim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifySummary {
    pub seed: u64,
    pub grid: VerifyGrid,
    pub trials: usize,
    pub violations_paper: usize,
    pub violations_strict: usize,
    pub violations_ordering: usize,
    pub min_paper_gap: f64,
    pub min_strict_gap: f64,
    pub cells: Vec<CellSummary>,
}

impl VerifySummary {
    pub fn passed(&self) -> bool {
        self.violations_paper == 0 && self.violations_strict == 0 && self.violations_ordering == 0
    }
}

fn run_cell(cell: &Cell, trials: usize, seed: u64, index: usize) -> Result<CellSummary> {
    let mut rng = rng_for(seed, index as u64);
    let cfg = LossConfig::paper(cell.tau)?;
    let mut summary = CellSummary {
        cell: *cell,
        trials,
        violations_paper: 0,
        violations_strict: 0,
        violations_ordering: 0,
        min_paper_gap: f64::INFINITY,
        min_strict_gap: f64::INFINITY,
        max_avg_pos_sim: f64::NEG_INFINITY,
    };
    for _ in 0..trials {
        let batch = cell.distribution.sample(&mut rng, cell.pairs, cell.dim);
        let report = similarity_bound(&batch, &cfg)?;
        summary.violations_paper += usize::from(report.paper_violated());
        summary.violations_strict += usize::from(report.strict_violated());
        summary.violations_ordering += usize::from(report.ordering_violated());
        summary.min_paper_gap = summary.min_paper_gap.min(report.paper_gap);
        summary.min_strict_gap = summary.min_strict_gap.min(report.strict_gap);
        summary.max_avg_pos_sim = summary.max_avg_pos_sim.max(report.avg_pos_sim);
    }
    Ok(summary)
}

/// Samples `trials_per_cell` batches in every grid cell and checks both bound
/// variants. Cell `i` draws from random stream `i` of `seed`, so the summary
/// is identical for any `threads` value. `threads = None` uses rayon's
/// global pool.
pub fn monte_carlo_verify(grid: &VerifyGrid, seed: u64, threads: Option<usize>) -> Result<VerifySummary> {
    grid.validate()?;
    let cells = grid.cells();
    let trials = grid.trials_per_cell;
    let work = || -> Result<Vec<CellSummary>> {
        cells
            .par_iter()
            .enumerate()
            .map(|(i, cell)| run_cell(cell, trials, seed, i))
            .collect()
    };
    let cells = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?
            .install(work)?,
        None => work()?,
    };

    Ok(VerifySummary {
        seed,
        grid: grid.clone(),
        trials: cells.iter().map(|c| c.trials).sum(),
        violations_paper: cells.iter().map(|c| c.violations_paper).sum(),
        violations_strict: cells.iter().map(|c| c.violations_strict).sum(),
        violations_ordering: cells.iter().map(|c| c.violations_ordering).sum(),
        min_paper_gap: cells.iter().map(|c| c.min_paper_gap).fold(f64::INFINITY, f64::min),
        min_strict_gap: cells.iter().map(|c| c.min_strict_gap).fold(f64::INFINITY, f64::min),
        cells,
    })
}
