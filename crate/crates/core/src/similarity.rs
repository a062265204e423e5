//! Dense-vector kernels: normalization, cosine similarity and the full
//! pairwise similarity matrix of an embedding batch.

use std::ops::Deref;

use crate::error::{Error, Result};

/// A single latent vector `z ∈ ℝ^m`, `m ≥ 1`, with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector(Vec<f64>);

impl LatentVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for LatentVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// `2N` latent rows of a common dimension. Rows `2t` and `2t + 1` form
/// positive pair `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    data: Vec<f64>,
    dim: usize,
}

impl EmbeddingBatch {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map(Vec::len).ok_or(Error::EmptyInput)?;
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in &rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::from_flat(data, dim)
    }

    /// Builds a batch from row-major storage.
    pub fn from_flat(data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidBatch("row dimension must be at least 1".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::InvalidBatch(format!(
                "{} values do not split into rows of length {dim}",
                data.len()
            )));
        }
        let rows = data.len() / dim;
        if rows < 2 || !rows.is_multiple_of(2) {
            return Err(Error::InvalidBatch(format!(
                "row count must be even and at least 2, got {rows}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let batch = Self { data, dim };
        if (0..rows).any(|i| norm(batch.row(i)) == 0.0) {
            return Err(Error::ZeroVector);
        }
        Ok(batch)
    }

    /// Number of rows, `2N`.
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of positive pairs, `N`.
    pub fn pairs(&self) -> usize {
        self.len() / 2
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Index of the positive partner of row `i`.
    pub fn partner(i: usize) -> usize {
        i ^ 1
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn l2_normalize(v: &[f64]) -> Result<LatentVector> {
    let n = norm(v);
    if n == 0.0 {
        return Err(Error::ZeroVector);
    }
    LatentVector::new(v.iter().map(|x| x / n).collect())
}

/// `(a·b) / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Full `2N × 2N` cosine similarity matrix, diagonal included, together with
/// its temperature-scaled view `x[i][k] = sims[i][k] / tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    size: usize,
    tau: f64,
    sims: Vec<f64>,
    scaled: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn sim(&self, i: usize, k: usize) -> f64 {
        self.sims[i * self.size + k]
    }

    pub fn scaled(&self, i: usize, k: usize) -> f64 {
        self.scaled[i * self.size + k]
    }

    pub fn sim_row(&self, i: usize) -> &[f64] {
        &self.sims[i * self.size..(i + 1) * self.size]
    }

    pub fn scaled_row(&self, i: usize) -> &[f64] {
        &self.scaled[i * self.size..(i + 1) * self.size]
    }
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidTemperature(tau))
    }
}

/// Normalized copies of every row, row-major.
pub(crate) fn normalized_rows(batch: &EmbeddingBatch) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch.as_flat().len());
    for row in batch.rows() {
        let n = norm(row);
        out.extend(row.iter().map(|x| x / n));
    }
    out
}

pub fn similarity_matrix(batch: &EmbeddingBatch, tau: f64) -> Result<SimilarityMatrix> {
    check_tau(tau)?;
    let size = batch.len();
    let dim = batch.dim();
    let units = normalized_rows(batch);
    let mut sims = vec![0.0; size * size];
    for i in 0..size {
        let ui = &units[i * dim..(i + 1) * dim];
        for k in i..size {
            let uk = &units[k * dim..(k + 1) * dim];
            let s = dot(ui, uk).clamp(-1.0, 1.0);
            sims[i * size + k] = s;
            sims[k * size + i] = s;
        }
    }
    let scaled = sims.iter().map(|s| s / tau).collect();
    Ok(SimilarityMatrix {
        size,
        tau,
        sims,
        scaled,
    })
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn normalize_examples() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!(close(v[0], 0.6, 1e-15) && close(v[1], 0.8, 1e-15));
        assert_eq!(&*l2_normalize(&[1.0, 0.0, 0.0]).unwrap(), &[1.0, 0.0, 0.0]);
        assert_eq!(l2_normalize(&[0.0, 0.0]), Err(Error::ZeroVector));
    }

    #[test]
    fn cosine_examples() {
        assert!(close(cosine_sim(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0, 1e-15));
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(close(cosine_sim(&[1.0, 1.0], &[-1.0, -1.0]).unwrap(), -1.0, 1e-15));
        assert_eq!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroVector));
        assert_eq!(
            cosine_sim(&[1.0, 0.0], &[1.0, 0.0, 0.0]),
            Err(Error::DimensionMismatch {
                expected: 2,
                found: 3
            })
        );
    }

    #[test]
    fn latent_vector_rejects_bad_values() {
        assert_eq!(LatentVector::new(vec![]), Err(Error::EmptyInput));
        assert_eq!(LatentVector::new(vec![f64::NAN]), Err(Error::NonFinite));
    }

    #[test]
    fn batch_validation() {
        assert!(matches!(
            EmbeddingBatch::new(vec![vec![1.0]; 3]),
            Err(Error::InvalidBatch(_))
        ));
        assert!(matches!(
            EmbeddingBatch::new(vec![vec![1.0, 0.0], vec![1.0]]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert_eq!(
            EmbeddingBatch::new(vec![vec![1.0, 0.0], vec![0.0, 0.0]]),
            Err(Error::ZeroVector)
        );
        assert_eq!(
            EmbeddingBatch::new(vec![vec![1.0, f64::INFINITY], vec![1.0, 0.0]]),
            Err(Error::NonFinite)
        );
        let b = EmbeddingBatch::new(vec![vec![1.0, 2.0]; 4]).unwrap();
        assert_eq!((b.len(), b.pairs(), b.dim()), (4, 2, 2));
        assert_eq!(EmbeddingBatch::partner(2), 3);
        assert_eq!(EmbeddingBatch::partner(3), 2);
    }

    #[test]
    fn matrix_examples() {
        let same = EmbeddingBatch::new(vec![vec![0.3, -1.2]; 2]).unwrap();
        let m = similarity_matrix(&same, 1.0).unwrap();
        for i in 0..2 {
            for k in 0..2 {
                assert!(close(m.sim(i, k), 1.0, 1e-15));
            }
        }

        let ortho = EmbeddingBatch::new(vec![vec![2.0, 0.0], vec![0.0, 5.0]]).unwrap();
        let m = similarity_matrix(&ortho, 0.5).unwrap();
        assert_eq!(m.sim_row(0), &[1.0, 0.0]);
        assert_eq!(m.sim_row(1), &[0.0, 1.0]);
        assert_eq!(m.scaled_row(0), &[2.0, 0.0]);
        assert_eq!(m.scaled_row(1), &[0.0, 2.0]);

        assert_eq!(
            similarity_matrix(&ortho, 0.0),
            Err(Error::InvalidTemperature(0.0))
        );
        assert!(similarity_matrix(&ortho, -1.0).is_err());
        assert!(similarity_matrix(&ortho, f64::NAN).is_err());
    }

    #[test]
    fn matrix_matches_scalar_loop() {
        // Fixed 4×3 batch; expected entries come from a plain loop over (i, k).
        let rows = vec![
            vec![0.5, -1.25, 2.0],
            vec![-0.75, 0.1, 1.5],
            vec![3.0, 0.2, -0.4],
            vec![-1.0, -2.0, -0.5],
        ];
        let batch = EmbeddingBatch::new(rows.clone()).unwrap();
        let m = similarity_matrix(&batch, 0.3).unwrap();
        for i in 0..4 {
            for k in 0..4 {
                let mut num = 0.0;
                let mut na = 0.0;
                let mut nb = 0.0;
                for c in 0..3 {
                    num += rows[i][c] * rows[k][c];
                    na += rows[i][c] * rows[i][c];
                    nb += rows[k][c] * rows[k][c];
                }
                let expected = num / (na.sqrt() * nb.sqrt());
                assert!(close(m.sim(i, k), expected, 1e-14), "({i},{k})");
                assert!(close(m.scaled(i, k), expected / 0.3, 1e-13));
            }
        }
    }

    fn vec_strategy(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, dim)
            .prop_filter("nonzero", |v| norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn cosine_is_scale_invariant_and_symmetric(
            (a, b) in (1usize..16).prop_flat_map(|d| (vec_strategy(d), vec_strategy(d))),
            alpha in 1e-3f64..1e3,
            beta in 1e-3f64..1e3,
        ) {
            let base = cosine_sim(&a, &b).unwrap();
            let sa: Vec<f64> = a.iter().map(|x| x * alpha).collect();
            let sb: Vec<f64> = b.iter().map(|x| x * beta).collect();
            prop_assert!((cosine_sim(&sa, &sb).unwrap() - base).abs() <= 1e-10);
            prop_assert_eq!(cosine_sim(&b, &a).unwrap(), base);
            prop_assert!((-1.0..=1.0).contains(&base));
        }

        #[test]
        fn matrix_invariants(
            rows in (1usize..6, 1usize..10).prop_flat_map(|(pairs, d)| {
                prop::collection::vec(vec_strategy(d), 2 * pairs)
            }),
            tau in 0.01f64..2.0,
        ) {
            let batch = EmbeddingBatch::new(rows).unwrap();
            let m = similarity_matrix(&batch, tau).unwrap();
            for i in 0..m.size() {
                prop_assert!((m.sim(i, i) - 1.0).abs() <= 1e-12);
                for k in 0..m.size() {
                    prop_assert_eq!(m.sim(i, k), m.sim(k, i));
                    prop_assert!(m.sim(i, k).abs() <= 1.0 + 1e-12);
                    prop_assert!((m.scaled(i, k) * tau - m.sim(i, k)).abs() <= 1e-12);
                }
            }
        }
    }
}
