//! NT-Xent loss, its alignment/distribution split and the analytic gradient
//! with respect to the raw (unnormalized) latent rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::similarity::{check_tau, dot, norm, normalized_rows, similarity_matrix};
use crate::similarity::{EmbeddingBatch, SimilarityMatrix};

/// Which rows act as anchors in the loss sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    /// One anchor per pair (row `2t`, positive `2t + 1`), normalized by `N`.
    #[default]
    PaperN,
    /// Both orderings of every pair (`2N` anchors), still normalized by `N`.
    Symmetric2N,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    tau: f64,
    anchor_mode: AnchorMode,
}

impl LossConfig {
    pub fn new(tau: f64, anchor_mode: AnchorMode) -> Result<Self> {
        check_tau(tau)?;
        Ok(Self { tau, anchor_mode })
    }

    pub fn paper(tau: f64) -> Result<Self> {
        Self::new(tau, AnchorMode::PaperN)
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn anchor_mode(&self) -> AnchorMode {
        self.anchor_mode
    }
}

/// Total loss together with its two additive parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub alignment: f64,
    pub distribution: f64,
}

/// `∂ℒ/∂z_i` for every raw latent row, row-major with the batch's shape.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMatrix {
    data: Vec<f64>,
    dim: usize,
}

impl GradientMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// `log Σ exp(x_i)` with a max shift, so inputs up to ~1e300 in magnitude
/// never overflow an intermediate.
pub fn logsumexp(xs: &[f64]) -> Result<f64> {
    let max = xs
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or(Error::EmptyInput)?;
    if !xs.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite);
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

/// `(anchor, positive)` index pairs for a batch with `rows` rows.
pub fn anchors(rows: usize, mode: AnchorMode) -> Vec<(usize, usize)> {
    match mode {
        AnchorMode::PaperN => (0..rows / 2).map(|t| (2 * t, 2 * t + 1)).collect(),
        AnchorMode::Symmetric2N => (0..rows).map(|i| (i, EmbeddingBatch::partner(i))).collect(),
    }
}

pub fn nt_xent(batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<LossBreakdown> {
    let sims = similarity_matrix(batch, cfg.tau)?;
    nt_xent_from_matrix(&sims, cfg.anchor_mode)
}

/// Loss from a precomputed similarity matrix.
///
/// `total` is evaluated as the mean negative log of the per-anchor softmax
/// probability; `alignment` and `distribution` are accumulated separately
/// from the scaled positive similarity and the off-diagonal LSE.
pub fn nt_xent_from_matrix(sims: &SimilarityMatrix, mode: AnchorMode) -> Result<LossBreakdown> {
    let size = sims.size();
    let normalizer = (size / 2) as f64;
    let mut total = 0.0;
    let mut alignment = 0.0;
    let mut distribution = 0.0;
    let mut others = Vec::with_capacity(size.saturating_sub(1));
    for (a, p) in anchors(size, mode) {
        let row = sims.scaled_row(a);
        others.clear();
        others.extend(row.iter().enumerate().filter(|&(k, _)| k != a).map(|(_, &x)| x));
        let shift = others.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = others.iter().map(|x| (x - shift).exp()).sum();
        let prob = (row[p] - shift).exp() / denom;
        total -= prob.ln();
        alignment -= row[p];
        distribution += logsumexp(&others)?;
    }
    let out = LossBreakdown {
        total: total / normalizer,
        alignment: alignment / normalizer,
        distribution: distribution / normalizer,
    };
    if [out.total, out.alignment, out.distribution]
        .iter()
        .all(|v| v.is_finite())
    {
        Ok(out)
    } else {
        Err(Error::NonFinite)
    }
}

/// Analytic `∂ℒ/∂z` through the normalization inside the cosine similarity.
pub fn nt_xent_grad(batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<GradientMatrix> {
    let sims = similarity_matrix(batch, cfg.tau)?;
    let size = batch.len();
    let dim = batch.dim();
    let scale = 1.0 / ((size / 2) as f64 * cfg.tau);

    // weights[a][k] = ∂ℒ/∂sim(a, k), taken as if every entry were independent.
    let mut weights = vec![0.0; size * size];
    for (a, p) in anchors(size, cfg.anchor_mode) {
        let row = sims.scaled_row(a);
        let shift = row
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != a)
            .map(|(_, &x)| x)
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != a)
            .map(|(_, x)| (x - shift).exp())
            .sum();
        for k in (0..size).filter(|&k| k != a) {
            let softmax = (row[k] - shift).exp() / denom;
            let indicator = if k == p { 1.0 } else { 0.0 };
            weights[a * size + k] += scale * (softmax - indicator);
        }
    }

    let units = normalized_rows(batch);
    let mut data = vec![0.0; size * dim];
    for i in 0..size {
        let mut du = vec![0.0; dim];
        for k in 0..size {
            let w = weights[i * size + k] + weights[k * size + i];
            if w != 0.0 {
                let uk = &units[k * dim..(k + 1) * dim];
                du.iter_mut().zip(uk).for_each(|(d, u)| *d += w * u);
            }
        }
        let ui = &units[i * dim..(i + 1) * dim];
        let radial = dot(&du, ui);
        let inv_norm = 1.0 / norm(batch.row(i));
        let out = &mut data[i * dim..(i + 1) * dim];
        for c in 0..dim {
            out[c] = (du[c] - radial * ui[c]) * inv_norm;
        }
    }
    if data.iter().all(|v| v.is_finite()) {
        Ok(GradientMatrix { data, dim })
    } else {
        Err(Error::NonFinite)
    }
}
