//! NT-Xent contrastive loss, its alignment/distribution decomposition, and
//! an upper bound on the average positive-pair cosine similarity, with tools
//! to check that bound on random embeddings and during a small SimCLR-style
//! training run.

pub mod bounds;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod random;
pub mod simclr;
pub mod similarity;
pub mod trace;

pub use bounds::{
    avg_positive_similarity, lse_bounds, monte_carlo_verify, similarity_bound, BoundReport,
    LseBounds, VerifyGrid, VerifySummary,
};
pub use error::{Error, Result};
pub use loss::{logsumexp, nt_xent, nt_xent_grad, AnchorMode, GradientMatrix, LossBreakdown, LossConfig};
pub use similarity::{
    cosine_sim, l2_normalize, similarity_matrix, EmbeddingBatch, LatentVector, SimilarityMatrix,
};
