//! Central finite differences, the error measure used to compare them with
//! analytic gradients, and the two seeded checks run by `ntxb gradcheck`:
//! loss-level (`∂ℒ/∂z`) and end-to-end (all encoder and projector
//! parameters of a tiny model).

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::loss::{nt_xent, nt_xent_grad, LossConfig};
use crate::random::{gaussian_batch, gaussian_vec, rng_for};
use crate::simclr::{Model, TrainConfig};
use crate::similarity::EmbeddingBatch;

/// Finite-difference step for both checks.
pub const FD_STEP: f64 = 1e-5;
/// Pass threshold for the loss-level check.
pub const LOSS_LEVEL_TOLERANCE: f64 = 1e-5;
/// Pass threshold for the end-to-end check.
pub const END_TO_END_TOLERANCE: f64 = 1e-4;
/// Smallest gradient max-norm accepted as an end-to-end start point.
pub const MIN_SIGNAL: f64 = 1e-6;
/// Smallest ReLU pre-activation magnitude accepted at an end-to-end start point.
pub const KINK_MARGIN: f64 = 1e-3;

/// Central-difference gradient of `f` at `point`.
pub fn central_difference<F>(point: &[f64], step: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + step;
            let plus = f(&x);
            x[i] = point[i] - step;
            let minus = f(&x);
            x[i] = point[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Gradients whose largest entry is below this are compared absolutely.
pub const ABSOLUTE_FLOOR: f64 = 1e-8;

/// `|a - b| / max(|a|, |b|)`, or `|a - b|` when both are below
/// [`ABSOLUTE_FLOOR`].
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < ABSOLUTE_FLOOR {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// Entry with the largest absolute deviation, and that deviation relative to
/// the gradient's scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorstEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|analytic - numeric|` at `index`, divided by the larger of the two
    /// gradients' max-norms (undivided when that is below
    /// [`ABSOLUTE_FLOOR`]). NaN if any entry is NaN.
    pub error: f64,
}

/// Compares two gradients entry by entry. The deviation is measured against
/// the gradient's overall scale, not each entry's own magnitude: central
/// differences carry absolute rounding noise of order `ε·|f|/h`, which would
/// swamp a per-entry ratio on entries near zero.
pub fn worst_entry(analytic: &[f64], numeric: &[f64]) -> WorstEntry {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| if v.is_nan() { f64::NAN } else { m.max(v.abs()) });
    let (index, deviation) = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .enumerate()
        .fold((0, 0.0f64), |best, (i, d)| {
            if d > best.1 || d.is_nan() && !best.1.is_nan() {
                (i, d)
            } else {
                best
            }
        });
    let error = if scale.is_nan() {
        f64::NAN
    } else if scale < ABSOLUTE_FLOOR {
        deviation
    } else {
        deviation / scale
    };
    WorstEntry {
        index,
        analytic: analytic.get(index).copied().unwrap_or(0.0),
        numeric: numeric.get(index).copied().unwrap_or(0.0),
        error,
    }
}

/// Outcome of one seeded gradient check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub description: String,
    pub worst: WorstEntry,
    pub tolerance: f64,
    pub passed: bool,
}

/// Loss-level check on a random Gaussian batch (`N ∈ 2..=8`, `m ∈ 2..=16`,
/// `τ ∈ [0.1, 1)`) rescaled to unit RMS. `corrupt` may tamper with the
/// analytic gradient before comparison.
pub fn loss_level_trial<F>(seed: u64, trial: usize, corrupt: F) -> Result<TrialResult>
where
    F: FnOnce(&mut [f64]),
{
    let mut rng = rng_for(seed, trial as u64);
    let pairs = rng.random_range(2..=8);
    let dim = rng.random_range(2..=16);
    let tau = rng.random_range(0.1..1.0);
    let raw = gaussian_batch(&mut rng, pairs, dim);
    let rms = (raw.as_flat().iter().map(|x| x * x).sum::<f64>() / raw.as_flat().len() as f64).sqrt();
    let batch = EmbeddingBatch::from_flat(raw.as_flat().iter().map(|x| x / rms).collect(), dim)?;
    let cfg = LossConfig::paper(tau)?;

    let mut analytic = nt_xent_grad(&batch, &cfg)?.as_flat().to_vec();
    corrupt(&mut analytic);
    let numeric = central_difference(batch.as_flat(), FD_STEP, |x| {
        EmbeddingBatch::from_flat(x.to_vec(), dim)
            .and_then(|b| nt_xent(&b, &cfg))
            .map_or(f64::NAN, |l| l.total)
    });
    let worst = worst_entry(&analytic, &numeric);
    Ok(TrialResult {
        trial,
        description: format!("loss-level N={pairs} m={dim} tau={tau:.4}"),
        worst,
        tolerance: LOSS_LEVEL_TOLERANCE,
        passed: worst.error <= LOSS_LEVEL_TOLERANCE, // false for NaN
    })
}

/// Configuration of the tiny model used by [`end_to_end_trial`]:
/// `d0 = d = m = 2`, `N = 2`, one hidden ReLU layer in each network.
pub fn tiny_model_config() -> TrainConfig {
    TrainConfig {
        pairs: 2,
        input_dim: 2,
        encoder_dims: vec![2, 2],
        projector_dims: vec![2, 2],
        tau: 0.5,
        ..TrainConfig::default()
    }
}

/// End-to-end check over every parameter of a tiny randomly initialized
/// model with random biases, on random Gaussian views.
pub fn end_to_end_trial<F>(seed: u64, trial: usize, corrupt: F) -> Result<TrialResult>
where
    F: FnOnce(&mut [f64]),
{
    let cfg = tiny_model_config();
    let loss_cfg = cfg.loss_config()?;
    let mut rng = rng_for(seed, (1 << 32) + trial as u64);
    // Start points where dead ReLUs leave the loss numerically flat carry no
    // gradient signal above finite-difference noise, and points near a ReLU
    // kink are not differentiable at the scale of the step; draw again.
    let (model, views, mut analytic) = loop {
        let mut model = Model::init(&cfg, rng.random())?;
        let params: Vec<f64> = model
            .params()
            .into_iter()
            .map(|p| if p == 0.0 { rng.random_range(-0.7..0.7) } else { p })
            .collect();
        model.set_params(&params);
        let views: Vec<Vec<f64>> = (0..2 * cfg.pairs).map(|_| gaussian_vec(&mut rng, 2)).collect();
        if model.relu_margin(&views)? < KINK_MARGIN {
            continue;
        }
        if let Ok((_, grad)) = model.loss_and_grad(&views, &loss_cfg) {
            if grad.iter().fold(0.0f64, |m, g| m.max(g.abs())) >= MIN_SIGNAL {
                break (model, views, grad);
            }
        }
    };

    corrupt(&mut analytic);
    let mut probe = model.clone();
    let numeric = central_difference(&model.params(), FD_STEP, |p| {
        probe.set_params(p);
        probe.loss(&views, &loss_cfg).map_or(f64::NAN, |l| l.total)
    });
    let worst = worst_entry(&analytic, &numeric);
    Ok(TrialResult {
        trial,
        description: format!("end-to-end {} params", analytic.len()),
        worst,
        tolerance: END_TO_END_TOLERANCE,
        passed: worst.error <= END_TO_END_TOLERANCE,
    })
}
