//! A desk-scale SimCLR pipeline on synthetic Gaussian-mixture data: a noise
//! and coordinate-dropout augmentation, an MLP encoder, an MLP projection
//! head, and plain gradient descent on the NT-Xent loss. Every step records
//! the loss breakdown and both similarity bounds.

use rand::{Rng, RngExt};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{similarity_bound, BoundReport};
use crate::error::{Error, Result};
use crate::loss::{nt_xent_grad, LossBreakdown, LossConfig};
use crate::random::{gaussian_vec, rng_for, standard_normal};
use crate::similarity::{similarity_matrix, EmbeddingBatch};

const DATASET_STREAM: u64 = 0;
const INIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;

/// Off-diagonal similarity above which the batch counts as collapsed.
pub const COLLAPSE_THRESHOLD: f64 = 1.0 - 1e-9;

/// Affine layer, weights stored row-major as `out_dim × in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn apply(&self, input: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(input).map(|(w, x)| w * x).sum::<f64>())
            .collect()
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Multi-layer perceptron with ReLU between layers and identity output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Per-layer inputs and pre-activations of one forward pass.
struct MlpCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("an MLP needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(Error::InvalidConfig("layer dimensions must be at least 1".into()));
            }
            if l.weights.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(Error::InvalidConfig(format!("layer {i} has inconsistent shapes")));
            }
            if i > 0 && layers[i - 1].out_dim != l.in_dim {
                return Err(Error::DimensionMismatch {
                    expected: layers[i - 1].out_dim,
                    found: l.in_dim,
                });
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite);
            }
        }
        Ok(Self { layers })
    }

    /// Weights uniform in `[-1/√fan_in, 1/√fan_in]`, biases zero.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, dims: &[usize], rng: &mut R) -> Result<Self> {
        let mut layers = Vec::with_capacity(dims.len());
        let mut fan_in = input_dim;
        for &out in dims {
            if fan_in == 0 || out == 0 {
                return Err(Error::InvalidConfig("layer dimensions must be at least 1".into()));
            }
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut draw = || rng.random_range(-bound..=bound);
            let weights = (0..fan_in * out).map(|_| draw()).collect();
            let bias = vec![0.0; out];
            layers.push(Layer {
                in_dim: fan_in,
                out_dim: out,
                weights,
                bias,
            });
            fan_in = out;
        }
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    /// `[input, hidden..., output]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.out_dim))
            .collect()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(input)?.0)
    }

    /// Outputs of every hidden layer, after ReLU.
    pub fn hidden_activations(&self, input: &[f64]) -> Result<Vec<Vec<f64>>> {
        let (_, cache) = self.forward_cached(input)?;
        Ok(cache.inputs[1..].to_vec())
    }

    /// Smallest `|pre-activation|` over the ReLU units for `input`, i.e. how
    /// far the input is from a kink; infinite for a single-layer MLP.
    pub fn relu_margin(&self, input: &[f64]) -> Result<f64> {
        let (_, cache) = self.forward_cached(input)?;
        let hidden = &cache.pre[..cache.pre.len() - 1];
        Ok(hidden.iter().flatten().fold(f64::INFINITY, |m, p| m.min(p.abs())))
    }

    fn forward_cached(&self, input: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: input.len(),
            });
        }
        let last = self.layers.len() - 1;
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut x = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = layer.apply(&x);
            cache.inputs.push(x);
            x = if i < last {
                pre.iter().copied().map(relu).collect()
            } else {
                pre.clone()
            };
            cache.pre.push(pre);
        }
        Ok((x, cache))
    }

    /// Accumulates parameter gradients into `grads` (same layout as
    /// [`Mlp::params`]) and returns the gradient with respect to the input.
    fn backward(&self, cache: &MlpCache, grad_out: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let offsets = self.param_offsets();
        let mut g = grad_out.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if i < last {
                // ReLU subgradient at 0 is 0.
                for (gj, &p) in g.iter_mut().zip(&cache.pre[i]) {
                    if p <= 0.0 {
                        *gj = 0.0;
                    }
                }
            }
            let input = &cache.inputs[i];
            let (w_grad, rest) = grads[offsets[i]..].split_at_mut(layer.weights.len());
            let b_grad = &mut rest[..layer.out_dim];
            for (o, &go) in g.iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                b_grad[o] += go;
                let row = &mut w_grad[o * layer.in_dim..(o + 1) * layer.in_dim];
                row.iter_mut().zip(input).for_each(|(w, x)| *w += go * x);
            }
            let mut g_in = vec![0.0; layer.in_dim];
            for (o, &go) in g.iter().enumerate() {
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                g_in.iter_mut().zip(row).for_each(|(gi, w)| *gi += go * w);
            }
            g = g_in;
        }
        g
    }

    fn param_offsets(&self) -> Vec<usize> {
        self.layers
            .iter()
            .scan(0, |acc, l| {
                let start = *acc;
                *acc += l.param_count();
                Some(start)
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Flattened parameters: per layer, weights then bias.
    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.param_count());
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|p| {
                *p = it.next().expect("length checked above");
            });
        }
    }
}

/// Encoder `f` followed by projection head `g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub encoder: Mlp,
    pub projector: Mlp,
}

/// Result of pushing `2N` views through the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Latent rows `z`, in the same pairing order as the views.
    pub batch: EmbeddingBatch,
    /// Encoder outputs `h`.
    pub hidden: Vec<Vec<f64>>,
}

pub fn forward(encoder: &Mlp, projector: &Mlp, views: &[Vec<f64>]) -> Result<ForwardOutput> {
    check_chain(encoder, projector)?;
    let mut hidden = Vec::with_capacity(views.len());
    let mut rows = Vec::with_capacity(views.len());
    for v in views {
        let h = encoder.forward(v)?;
        rows.push(projector.forward(&h)?);
        hidden.push(h);
    }
    Ok(ForwardOutput {
        batch: EmbeddingBatch::new(rows)?,
        hidden,
    })
}

fn check_chain(encoder: &Mlp, projector: &Mlp) -> Result<()> {
    if encoder.output_dim() != projector.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: encoder.output_dim(),
            found: projector.input_dim(),
        });
    }
    Ok(())
}

impl Model {
    pub fn new(encoder: Mlp, projector: Mlp) -> Result<Self> {
        check_chain(&encoder, &projector)?;
        Ok(Self { encoder, projector })
    }

    pub fn init(cfg: &TrainConfig, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, INIT_STREAM);
        let encoder = Mlp::init(cfg.input_dim, &cfg.encoder_dims, &mut rng)?;
        let projector = Mlp::init(encoder.output_dim(), &cfg.projector_dims, &mut rng)?;
        Self::new(encoder, projector)
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.projector.param_count()
    }

    /// Encoder parameters followed by projector parameters.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.encoder.params();
        p.extend(self.projector.params());
        p
    }

    pub fn set_params(&mut self, params: &[f64]) {
        let (e, p) = params.split_at(self.encoder.param_count());
        self.encoder.set_params(e);
        self.projector.set_params(p);
    }

    pub fn forward(&self, views: &[Vec<f64>]) -> Result<ForwardOutput> {
        forward(&self.encoder, &self.projector, views)
    }

    /// Loss, bound report and the gradient of the loss with respect to
    /// [`Model::params`] for a fixed set of views.
    pub fn loss_and_grad(&self, views: &[Vec<f64>], cfg: &LossConfig) -> Result<(BoundReport, Vec<f64>)> {
        let mut caches = Vec::with_capacity(views.len());
        let mut rows = Vec::with_capacity(views.len());
        for v in views {
            let (h, enc) = self.encoder.forward_cached(v)?;
            let (z, proj) = self.projector.forward_cached(&h)?;
            rows.push(z);
            caches.push((enc, proj));
        }
        let batch = EmbeddingBatch::new(rows)?;
        let report = similarity_bound(&batch, cfg)?;
        let dz = nt_xent_grad(&batch, cfg)?;

        let split = self.encoder.param_count();
        let mut grads = vec![0.0; self.param_count()];
        let (enc_grad, proj_grad) = grads.split_at_mut(split);
        for ((enc, proj), g) in caches.iter().zip(dz.rows()) {
            let dh = self.projector.backward(proj, g, proj_grad);
            self.encoder.backward(enc, &dh, enc_grad);
        }
        Ok((report, grads))
    }

    /// Smallest distance of any ReLU pre-activation from zero over all views.
    pub fn relu_margin(&self, views: &[Vec<f64>]) -> Result<f64> {
        let mut margin = f64::INFINITY;
        for v in views {
            margin = margin.min(self.encoder.relu_margin(v)?);
            margin = margin.min(self.projector.relu_margin(&self.encoder.forward(v)?)?);
        }
        Ok(margin)
    }

    /// Total loss for fixed views; the function the finite-difference check
    /// differentiates.
    pub fn loss(&self, views: &[Vec<f64>], cfg: &LossConfig) -> Result<LossBreakdown> {
        crate::loss::nt_xent(&self.forward(views)?.batch, cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub noise_sigma: f64,
    pub dropout_prob: f64,
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig("noise_sigma must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::InvalidConfig("dropout_prob must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

fn augment_once<R: Rng + ?Sized>(x: &[f64], cfg: &AugmentConfig, rng: &mut R) -> Vec<f64> {
    let mut v = x.to_vec();
    if cfg.noise_sigma > 0.0 {
        v.iter_mut()
            .for_each(|c| *c += cfg.noise_sigma * standard_normal(rng));
    }
    if cfg.dropout_prob > 0.0 {
        v.iter_mut().for_each(|c| {
            if rng.random::<f64>() < cfg.dropout_prob {
                *c = 0.0;
            }
        });
    }
    v
}

/// Two independent stochastic views of `x`: additive Gaussian noise, then
/// independent per-coordinate zeroing.
pub fn augment<R: Rng + ?Sized>(x: &[f64], cfg: &AugmentConfig, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let a = augment_once(x, cfg, rng);
    let b = augment_once(x, cfg, rng);
    (a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub clusters: usize,
    pub spread: f64,
    pub points: usize,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 {
            return Err(Error::InvalidDatasetParams("clusters must be at least 1".into()));
        }
        if !(self.spread.is_finite() && self.spread > 0.0) {
            return Err(Error::InvalidDatasetParams("spread must be finite and positive".into()));
        }
        if self.points < 2 {
            return Err(Error::InvalidDatasetParams("need at least 2 points".into()));
        }
        Ok(())
    }
}

/// Gaussian-mixture sample. Point `p` belongs to cluster `p % clusters`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub means: Vec<Vec<f64>>,
}

/// Cluster means are standard Gaussian; points are their cluster mean plus
/// isotropic Gaussian noise with standard deviation `spread`.
pub fn gen_synthetic(params: &DatasetConfig, dim: usize, seed: u64) -> Result<Dataset> {
    params.validate()?;
    if dim == 0 {
        return Err(Error::InvalidDatasetParams("dimension must be at least 1".into()));
    }
    let mut rng = rng_for(seed, DATASET_STREAM);
    let means: Vec<Vec<f64>> = (0..params.clusters).map(|_| gaussian_vec(&mut rng, dim)).collect();
    let labels: Vec<usize> = (0..params.points).map(|p| p % params.clusters).collect();
    let points = labels
        .iter()
        .map(|&c| {
            means[c]
                .iter()
                .map(|m| m + params.spread * standard_normal(&mut rng))
                .collect()
        })
        .collect();
    Ok(Dataset {
        points,
        labels,
        means,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Positive pairs per minibatch, `N`.
    pub pairs: usize,
    pub input_dim: usize,
    /// Encoder layer widths; the last is the representation size `d`.
    pub encoder_dims: Vec<usize>,
    /// Projector layer widths; the last is the latent size `m`.
    pub projector_dims: Vec<usize>,
    pub tau: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub dataset: DatasetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pairs: 16,
            input_dim: 8,
            encoder_dims: vec![16, 16],
            projector_dims: vec![16, 8],
            tau: 0.5,
            learning_rate: 0.3,
            steps: 500,
            seed: 0,
            augment: AugmentConfig {
                noise_sigma: 0.5,
                dropout_prob: 0.0,
            },
            dataset: DatasetConfig {
                clusters: 8,
                spread: 0.1,
                points: 512,
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.pairs < 2 {
            return bad("pairs must be at least 2");
        }
        if self.input_dim == 0 {
            return bad("input_dim must be at least 1");
        }
        if self.encoder_dims.is_empty() || self.projector_dims.is_empty() {
            return bad("encoder_dims and projector_dims need at least one layer");
        }
        if self.encoder_dims.contains(&0) || self.projector_dims.contains(&0) {
            return bad("layer widths must be at least 1");
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::InvalidTemperature(self.tau));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be finite and positive");
        }
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        self.augment.validate()?;
        self.dataset.validate()?;
        if self.dataset.points < 2 * self.pairs {
            return Err(Error::InvalidDatasetParams(format!(
                "need at least 2N = {} points, got {}",
                2 * self.pairs,
                self.dataset.points
            )));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        LossConfig::paper(self.tau)
    }
}

/// One training step's instrumentation, taken before the parameter update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    pub avg_pos_sim: f64,
    pub paper_bound: f64,
    pub strict_bound: f64,
    pub paper_gap: f64,
    pub strict_gap: f64,
    pub grad_norm: f64,
    /// Every pair of latent rows had cosine similarity ≥ [`COLLAPSE_THRESHOLD`].
    pub collapsed: bool,
}

impl TraceRecord {
    pub fn from_report(step: usize, report: &BoundReport, grad_norm: f64, collapsed: bool) -> Self {
        Self {
            step,
            loss: report.loss,
            avg_pos_sim: report.avg_pos_sim,
            paper_bound: report.paper_bound,
            strict_bound: report.strict_bound,
            paper_gap: report.paper_gap,
            strict_gap: report.strict_gap,
            grad_norm,
            collapsed,
        }
    }

    fn is_finite(&self) -> bool {
        [
            self.loss.total,
            self.loss.alignment,
            self.loss.distribution,
            self.avg_pos_sim,
            self.paper_bound,
            self.strict_bound,
            self.paper_gap,
            self.strict_gap,
            self.grad_norm,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

pub type TrainTrace = Vec<TraceRecord>;

fn is_collapsed(batch: &EmbeddingBatch) -> Result<bool> {
    let sims = similarity_matrix(batch, 1.0)?;
    Ok((0..sims.size()).all(|i| sims.sim_row(i).iter().all(|&s| s >= COLLAPSE_THRESHOLD)))
}

/// Builds the `2N` augmented views of a minibatch in pairing order.
pub fn make_views<R: Rng + ?Sized>(points: &[&[f64]], cfg: &AugmentConfig, rng: &mut R) -> Vec<Vec<f64>> {
    points
        .iter()
        .flat_map(|x| {
            let (a, b) = augment(x, cfg, rng);
            [a, b]
        })
        .collect()
}

/// Augments the minibatch, evaluates loss and bounds, and takes one
/// gradient-descent step. Any numerical failure is reported as
/// [`Error::NonFiniteLoss`] for `step`.
pub fn train_step(
    model: &Model,
    points: &[&[f64]],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    step: usize,
) -> Result<(Model, TraceRecord)> {
    let views = make_views(points, &cfg.augment, rng);
    let diverged = |_| Error::NonFiniteLoss { step };
    let (report, grads) = model
        .loss_and_grad(&views, &cfg.loss_config()?)
        .map_err(diverged)?;
    let collapsed = is_collapsed(&model.forward(&views).map_err(diverged)?.batch).map_err(diverged)?;
    let grad_norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    let record = TraceRecord::from_report(step, &report, grad_norm, collapsed);
    if !record.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }

    let params: Vec<f64> = model
        .params()
        .iter()
        .zip(&grads)
        .map(|(p, g)| p - cfg.learning_rate * g)
        .collect();
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFiniteLoss { step });
    }
    let mut next = model.clone();
    next.set_params(&params);
    Ok((next, record))
}

/// Training stopped early; carries the records completed so far.
#[derive(Debug, Clone, Error)]
#[error("{error} (after {} completed steps)", trace.len())]
pub struct TrainAbort {
    pub error: Error,
    pub trace: TrainTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    pub trace: TrainTrace,
}

pub fn train(cfg: &TrainConfig) -> std::result::Result<TrainOutcome, TrainAbort> {
    train_with(cfg, |_| {})
}

/// Runs training, handing each record to `on_record` as soon as it exists.
pub fn train_with<F>(cfg: &TrainConfig, mut on_record: F) -> std::result::Result<TrainOutcome, TrainAbort>
where
    F: FnMut(&TraceRecord),
{
    let mut trace = Vec::with_capacity(cfg.steps);
    let abort = |error, trace: &TrainTrace| TrainAbort {
        error,
        trace: trace.clone(),
    };
    cfg.validate().map_err(|e| abort(e, &trace))?;
    let data = gen_synthetic(&cfg.dataset, cfg.input_dim, cfg.seed).map_err(|e| abort(e, &trace))?;
    let mut model = Model::init(cfg, cfg.seed).map_err(|e| abort(e, &trace))?;
    let mut rng = rng_for(cfg.seed, TRAIN_STREAM);

    for step in 0..cfg.steps {
        let points: Vec<&[f64]> = (0..cfg.pairs)
            .map(|_| data.points[rng.random_range(0..data.points.len())].as_slice())
            .collect();
        let (next, record) =
            train_step(&model, &points, cfg, &mut rng, step).map_err(|e| abort(e, &trace))?;
        on_record(&record);
        trace.push(record);
        model = next;
    }
    Ok(TrainOutcome { model, trace })
}
