//! Seeded random sources.
//!
//! Every random stream is a ChaCha8 generator seeded with
//! `ChaCha8Rng::seed_from_u64(seed)` and then moved to a numbered stream with
//! `set_stream(stream)`. Independent consumers (grid cells, dataset, weight
//! init, minibatch sampling) use distinct stream numbers, so results do not
//! depend on scheduling order.

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::similarity::{norm, EmbeddingBatch};

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| standard_normal(rng)).collect()
}

/// Draws a Gaussian vector and redraws in the (measure-zero) event it is
/// exactly zero.
fn nonzero_gaussian<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, dim);
        if norm(&v) > 0.0 {
            return v;
        }
    }
}

/// How random embedding batches are generated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingDistribution {
    /// Rows uniform on the unit sphere.
    UniformSphere,
    /// Isotropic standard Gaussian rows, left unnormalized.
    Gaussian,
    /// Each pair is a shared Gaussian base vector plus independent
    /// Gaussian noise of the given scale on each member.
    Clustered { noise: f64 },
}

impl EmbeddingDistribution {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, pairs: usize, dim: usize) -> EmbeddingBatch {
        match *self {
            Self::UniformSphere => {
                let rows = (0..2 * pairs)
                    .map(|_| {
                        let v = nonzero_gaussian(rng, dim);
                        let n = norm(&v);
                        v.into_iter().map(|x| x / n).collect()
                    })
                    .collect();
                EmbeddingBatch::new(rows).expect("unit rows form a valid batch")
            }
            Self::Gaussian => gaussian_batch(rng, pairs, dim),
            Self::Clustered { noise } => {
                let mut rows = Vec::with_capacity(2 * pairs);
                while rows.len() < 2 * pairs {
                    let base = gaussian_vec(rng, dim);
                    let pair: Vec<Vec<f64>> = (0..2)
                        .map(|_| base.iter().map(|b| b + noise * standard_normal(rng)).collect())
                        .collect();
                    if pair.iter().all(|r| norm(r) > 0.0) {
                        rows.extend(pair);
                    }
                }
                EmbeddingBatch::new(rows).expect("nonzero rows form a valid batch")
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::UniformSphere => "uniform_sphere".into(),
            Self::Gaussian => "gaussian".into(),
            Self::Clustered { noise } => format!("clustered(noise={noise})"),
        }
    }
}

pub fn gaussian_batch<R: Rng + ?Sized>(rng: &mut R, pairs: usize, dim: usize) -> EmbeddingBatch {
    let rows = (0..2 * pairs).map(|_| nonzero_gaussian(rng, dim)).collect();
    EmbeddingBatch::new(rows).expect("nonzero rows form a valid batch")
}
