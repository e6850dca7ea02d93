//! Satellite-wise MLP that predicts per-satellite pseudorange bias.
//!
//! Every visible satellite of an epoch goes through the same network. The
//! training loss compares `μ̂ₙ - hᵀM̂` with the label, so predictions are
//! only defined up to an epoch-wide constant (`hᵀ1 = 1`).

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{EpochFeatures, FeatureSample, FEATURE_DIM, SLOTS};
use crate::ingest::MeasurementSet;
use crate::num::Real;

pub const DEFAULT_HIDDEN_WIDTH: usize = 40;
pub const DEFAULT_HIDDEN_LAYERS: usize = 20;
pub const SCHEMA_VERSION: u32 = 1;
pub const LOSS_CURVE_HEADER: [&str; 3] = ["iter", "loss", "lr"];

#[derive(Debug, Error)]
pub enum PrnetError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("epoch {0}: sample has no labels or h-row")]
    MissingTarget(i64),
    #[error("no training samples with visible satellites")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("unsupported model schema version {0}")]
    Schema(u32),
    #[error("invalid model file: {0}")]
    Invalid(String),
    #[error("epoch {time_ms}: features do not match the epoch's satellites")]
    Mismatch { time_ms: i64 },
    #[error("model json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T: Real> {
    /// `out x in`.
    pub weight: DMatrix<T>,
    pub bias: DVector<T>,
}

impl<T: Real> Layer<T> {
    fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: DMatrix::zeros(out, inp),
            bias: DVector::zeros(out),
        }
    }

    fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrnetModel<T: Real> {
    pub input_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    /// `hidden_layers` rectified layers followed by the linear output layer.
    pub layers: Vec<Layer<T>>,
}

/// Gradient of the batch loss, shaped like the model's layers.
pub type Gradients<T> = Vec<Layer<T>>;

fn layer_shapes(input: usize, width: usize, hidden: usize) -> Vec<(usize, usize)> {
    let mut shapes = Vec::with_capacity(hidden + 1);
    let mut inp = input;
    for _ in 0..hidden {
        shapes.push((width, inp));
        inp = width;
    }
    shapes.push((1, inp));
    shapes
}

impl<T: Real> PrnetModel<T> {
    pub fn zeros(hidden_width: usize, hidden_layers: usize) -> Self {
        let layers = layer_shapes(FEATURE_DIM, hidden_width, hidden_layers)
            .into_iter()
            .map(|(o, i)| Layer::zeros(o, i))
            .collect();
        Self {
            input_dim: FEATURE_DIM,
            hidden_width,
            hidden_layers,
            layers,
        }
    }

    /// Uniform weights in `±sqrt(6 / fan_in)`, zero biases.
    pub fn new(hidden_width: usize, hidden_layers: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Self::zeros(hidden_width, hidden_layers);
        for layer in &mut model.layers {
            let bound = (6.0 / layer.weight.ncols() as f64).sqrt();
            for w in layer.weight.iter_mut() {
                *w = T::lit(rng.random_range(-bound..bound));
            }
        }
        model
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::len).sum()
    }

    /// All parameters, layer by layer, weights (column-major) then biases.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn set_flat(&mut self, params: &[T]) -> Result<(), PrnetError> {
        if params.len() != self.param_count() {
            return Err(PrnetError::Dimension {
                expected: self.param_count(),
                found: params.len(),
            });
        }
        let mut it = params.iter();
        for l in &mut self.layers {
            for w in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *w = *it.next().unwrap();
            }
        }
        Ok(())
    }

    /// Network output for each column of a `16 x N` input.
    pub fn predict_columns(&self, x: &DMatrix<T>) -> Result<DVector<T>, PrnetError> {
        if x.nrows() != self.input_dim {
            return Err(PrnetError::Dimension {
                expected: self.input_dim,
                found: x.nrows(),
            });
        }
        let (acts, _) = self.forward_cached(x);
        Ok(acts.last().unwrap().row(0).transpose())
    }

    /// Returns every layer's output (inputs first) and pre-activations.
    fn forward_cached(&self, x: &DMatrix<T>) -> (Vec<DMatrix<T>>, Vec<DMatrix<T>>) {
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        acts.push(x.clone());
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = &l.weight * acts.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += &l.bias;
            }
            let a = if i < last {
                z.map(|v| if v > T::zero() { v } else { T::zero() })
            } else {
                z.clone()
            };
            pre.push(z);
            acts.push(a);
        }
        (acts, pre)
    }

    /// Masked prediction over the 32 slots; non-visible slots are zero.
    pub fn forward(&self, sample: &FeatureSample<T>) -> Result<[T; SLOTS], PrnetError> {
        let vis = sample.visible();
        let mut out = [T::zero(); SLOTS];
        if vis.is_empty() {
            return Ok(out);
        }
        let y = self.predict_columns(&gather(&[sample], self.input_dim).0)?;
        for (k, &slot) in vis.iter().enumerate() {
            out[slot] = y[k];
        }
        Ok(out)
    }

    /// Rectifier on/off pattern of every hidden unit over a batch.
    pub fn activation_pattern(&self, samples: &[&FeatureSample<T>]) -> Vec<bool> {
        let (x, _) = gather(samples, self.input_dim);
        if x.ncols() == 0 {
            return Vec::new();
        }
        let (_, pre) = self.forward_cached(&x);
        pre[..pre.len() - 1]
            .iter()
            .flat_map(|z| z.iter().map(|v| *v > T::zero()).collect::<Vec<_>>())
            .collect()
    }

    pub fn batch_loss(&self, samples: &[&FeatureSample<T>]) -> Result<T, PrnetError> {
        let mut total = T::zero();
        for s in samples {
            total += loss(&self.forward(s)?, s)?;
        }
        Ok(total / <T as Real>::from_usize(samples.len().max(1)))
    }

    /// Batch loss (mean over samples) and its exact gradient.
    pub fn gradients(
        &self,
        samples: &[&FeatureSample<T>],
    ) -> Result<(T, Gradients<T>), PrnetError> {
        let mut grads: Gradients<T> = self
            .layers
            .iter()
            .map(|l| Layer::zeros(l.weight.nrows(), l.weight.ncols()))
            .collect();
        if samples.is_empty() {
            return Ok((T::zero(), grads));
        }
        let (x, offsets) = gather(samples, self.input_dim);
        let n = x.ncols();
        let scale = T::one() / <T as Real>::from_usize(samples.len());
        let mut dout = DMatrix::<T>::zeros(1, n);
        let mut total = T::zero();
        let (acts, pre) = if n > 0 {
            self.forward_cached(&x)
        } else {
            (Vec::new(), Vec::new())
        };
        for (s, w) in samples.iter().zip(offsets.windows(2)) {
            let target = s
                .target
                .as_ref()
                .ok_or(PrnetError::MissingTarget(s.time_ms))?;
            let vis = s.visible();
            if vis.is_empty() {
                continue;
            }
            let y = acts.last().unwrap();
            let mu: Vec<T> = (w[0]..w[1]).map(|c| y[(0, c)]).collect();
            let h: Vec<T> = vis.iter().map(|&i| target.h_row[i]).collect();
            let shared = dot(&h, &mu);
            let r: Vec<T> = vis
                .iter()
                .zip(&mu)
                .map(|(&i, &m)| m - shared - target.labels[i])
                .collect();
            let sum_r = r.iter().fold(T::zero(), |a, &b| a + b);
            total += r.iter().fold(T::zero(), |a, &b| a + b * b);
            let two = T::lit(2.0);
            for (k, c) in (w[0]..w[1]).enumerate() {
                dout[(0, c)] = scale * two * (r[k] - h[k] * sum_r);
            }
        }
        if n == 0 {
            return Ok((T::zero(), grads));
        }
        let mut delta = dout;
        for i in (0..self.layers.len()).rev() {
            grads[i].weight = &delta * acts[i].transpose();
            grads[i].bias = delta.column_sum();
            if i > 0 {
                let mut back = self.layers[i].weight.transpose() * &delta;
                back.zip_apply(&pre[i - 1], |d, z| {
                    if z <= T::zero() {
                        *d = T::zero();
                    }
                });
                delta = back;
            }
        }
        Ok((total * scale, grads))
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Stacks the visible slots of each sample as columns; `offsets[k]..offsets[k+1]`
/// are the columns of sample `k`.
fn gather<T: Real>(samples: &[&FeatureSample<T>], dim: usize) -> (DMatrix<T>, Vec<usize>) {
    let mut offsets = Vec::with_capacity(samples.len() + 1);
    offsets.push(0);
    let mut n = 0;
    for s in samples {
        n += s.n_visible();
        offsets.push(n);
    }
    let mut x = DMatrix::zeros(dim, n);
    let mut c = 0;
    for s in samples {
        for i in s.visible() {
            for (r, v) in s.features[i].iter().enumerate().take(dim) {
                x[(r, c)] = *v;
            }
            c += 1;
        }
    }
    (x, offsets)
}

/// `Σ (μ̂ₙ - hᵀM̂ - ε̄ₙ)²` over the visible satellites of one sample.
pub fn loss<T: Real>(predictions: &[T; SLOTS], sample: &FeatureSample<T>) -> Result<T, PrnetError> {
    let target = sample
        .target
        .as_ref()
        .ok_or(PrnetError::MissingTarget(sample.time_ms))?;
    let vis = sample.visible();
    let shared = vis
        .iter()
        .fold(T::zero(), |a, &i| a + target.h_row[i] * predictions[i]);
    Ok(vis.iter().fold(T::zero(), |a, &i| {
        let r = predictions[i] - shared - target.labels[i];
        a + r * r
    }))
}

fn default_lr_start() -> f64 {
    1e-2
}
fn default_lr_end() -> f64 {
    1e-7
}
fn default_max_iters() -> usize {
    5000
}
fn default_batch() -> usize {
    128
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_width() -> usize {
    DEFAULT_HIDDEN_WIDTH
}
fn default_layers() -> usize {
    DEFAULT_HIDDEN_LAYERS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr_start")]
    pub lr_start: f64,
    #[serde(default = "default_lr_end")]
    pub lr_end: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Epochs per mini-batch.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
    #[serde(default = "default_width")]
    pub hidden_width: usize,
    #[serde(default = "default_layers")]
    pub hidden_layers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PrnetError> {
        let bad = |m: &str| Err(PrnetError::Config(m.into()));
        if !(self.lr_start > 0.0 && self.lr_end > 0.0 && self.lr_end < self.lr_start) {
            return bad("need 0 < lr_end < lr_start");
        }
        if self.max_iters == 0 || self.batch_size == 0 {
            return bad("max_iters and batch_size must be positive");
        }
        if self.hidden_width == 0 {
            return bad("hidden_width must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        Ok(())
    }

    /// Exponential interpolation from `lr_start` at iteration 0 to `lr_end`
    /// at the final iteration.
    pub fn learning_rate(&self, iter: usize) -> f64 {
        if self.max_iters <= 1 {
            return self.lr_start;
        }
        let t = iter as f64 / (self.max_iters - 1) as f64;
        self.lr_start * (self.lr_end / self.lr_start).powf(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
        }
    }

    /// One Adam step on flattened parameters.
    pub fn update(&mut self, params: &mut [T], grads: &[T], lr: f64, config: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (T::lit(config.beta1), T::lit(config.beta2));
        let c1 = T::lit(1.0 - config.beta1.powi(self.step as i32));
        let c2 = T::lit(1.0 - config.beta2.powi(self.step as i32));
        let lr = T::lit(lr);
        let eps = T::lit(config.epsilon);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPoint {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Real> {
    pub model: PrnetModel<T>,
    pub curve: Vec<LossPoint>,
}

fn flatten_grads<T: Real>(g: &Gradients<T>) -> Vec<T> {
    let mut out = Vec::new();
    for l in g {
        out.extend(l.weight.iter().copied());
        out.extend(l.bias.iter().copied());
    }
    out
}

/// Mini-batch Adam. Samples without visible satellites are skipped.
pub fn train<T: Real>(
    dataset: &[FeatureSample<T>],
    config: &TrainConfig,
) -> Result<TrainOutcome<T>, PrnetError> {
    config.validate()?;
    let usable: Vec<&FeatureSample<T>> = dataset.iter().filter(|s| s.n_visible() > 0).collect();
    if usable.is_empty() {
        return Err(PrnetError::EmptyDataset);
    }
    if let Some(s) = usable.iter().find(|s| s.target.is_none()) {
        return Err(PrnetError::MissingTarget(s.time_ms));
    }
    let mut model = PrnetModel::new(config.hidden_width, config.hidden_layers, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut opt = OptimizerState::new(model.param_count());
    let mut params = model.flatten();
    let mut curve = Vec::with_capacity(config.max_iters);
    let batch = config.batch_size.min(usable.len());
    for iter in 0..config.max_iters {
        let picks = sample_indices(&mut rng, usable.len(), batch);
        let chosen: Vec<&FeatureSample<T>> = picks.iter().map(|i| usable[i]).collect();
        let (l, g) = model.gradients(&chosen)?;
        let lr = config.learning_rate(iter);
        opt.update(&mut params, &flatten_grads(&g), lr, config);
        model.set_flat(&params)?;
        curve.push(LossPoint {
            iter,
            loss: l.as_f64(),
            lr,
        });
    }
    Ok(TrainOutcome { model, curve })
}

pub fn write_loss_curve<W: Write>(w: W, curve: &[LossPoint]) -> std::io::Result<()> {
    crate::ingest::write_table(
        w,
        &LOSS_CURVE_HEADER,
        curve.iter().map(|p| {
            vec![
                p.iter.to_string(),
                crate::ingest::fmt_f64(p.loss),
                crate::ingest::fmt_f64(p.lr),
            ]
        }),
    )
}

/// Subtracts the predicted bias from each pseudorange of the epoch.
pub fn correct_pseudoranges<T: Real>(
    epoch: &MeasurementSet<T>,
    model: &PrnetModel<T>,
    features: &EpochFeatures<T>,
) -> Result<MeasurementSet<T>, PrnetError> {
    if features.time_ms != epoch.time_ms || features.svids != epoch.svids() {
        return Err(PrnetError::Mismatch {
            time_ms: epoch.time_ms,
        });
    }
    let mut out = epoch.clone();
    if epoch.obs.is_empty() {
        return Ok(out);
    }
    let mut x = DMatrix::zeros(model.input_dim, features.vectors.len());
    for (c, v) in features.vectors.iter().enumerate() {
        for (r, val) in v.iter().enumerate() {
            x[(r, c)] = *val;
        }
    }
    let mu = model.predict_columns(&x)?;
    for (o, m) in out.obs.iter_mut().zip(mu.iter()) {
        o.pr_m -= *m;
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    rows: usize,
    cols: usize,
    /// Row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    schema_version: u32,
    input_dim: usize,
    hidden_width: usize,
    hidden_layers: usize,
    activation: String,
    layers: Vec<LayerFile>,
}

pub fn save_model<T: Real, W: Write>(w: W, model: &PrnetModel<T>) -> Result<(), PrnetError> {
    let file = ModelFile {
        schema_version: SCHEMA_VERSION,
        input_dim: model.input_dim,
        hidden_width: model.hidden_width,
        hidden_layers: model.hidden_layers,
        activation: "relu".into(),
        layers: model
            .layers
            .iter()
            .map(|l| LayerFile {
                rows: l.weight.nrows(),
                cols: l.weight.ncols(),
                weights: l.weight.transpose().iter().map(|v| v.as_f64()).collect(),
                bias: l.bias.iter().map(|v| v.as_f64()).collect(),
            })
            .collect(),
    };
    serde_json::to_writer(w, &file)?;
    Ok(())
}

pub fn load_model<T: Real, R: Read>(r: R) -> Result<PrnetModel<T>, PrnetError> {
    let file: ModelFile = serde_json::from_reader(r)?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(PrnetError::Schema(file.schema_version));
    }
    if file.input_dim != FEATURE_DIM {
        return Err(PrnetError::Dimension {
            expected: FEATURE_DIM,
            found: file.input_dim,
        });
    }
    if file.activation != "relu" {
        return Err(PrnetError::Invalid(format!(
            "activation {}",
            file.activation
        )));
    }
    let shapes = layer_shapes(file.input_dim, file.hidden_width, file.hidden_layers);
    if shapes.len() != file.layers.len() {
        return Err(PrnetError::Dimension {
            expected: shapes.len(),
            found: file.layers.len(),
        });
    }
    let mut model = PrnetModel::zeros(file.hidden_width, file.hidden_layers);
    for (k, ((rows, cols), lf)) in shapes.into_iter().zip(&file.layers).enumerate() {
        if lf.rows != rows
            || lf.cols != cols
            || lf.weights.len() != rows * cols
            || lf.bias.len() != rows
        {
            return Err(PrnetError::Invalid(format!(
                "layer {k} has the wrong shape"
            )));
        }
        if lf.weights.iter().chain(&lf.bias).any(|v| !v.is_finite()) {
            return Err(PrnetError::Invalid(format!(
                "layer {k} has non-finite values"
            )));
        }
        model.layers[k].weight =
            DMatrix::from_row_iterator(rows, cols, lf.weights.iter().map(|&v| T::lit(v)));
        model.layers[k].bias = DVector::from_iterator(rows, lf.bias.iter().map(|&v| T::lit(v)));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::SampleTarget;

    fn sample(time_ms: i64, slots: &[(usize, f64, f64)], seed: u64) -> FeatureSample<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = FeatureSample {
            time_ms,
            features: [[0.0; FEATURE_DIM]; SLOTS],
            mask: [false; SLOTS],
            target: Some(SampleTarget {
                labels: [0.0; SLOTS],
                h_row: [0.0; SLOTS],
            }),
        };
        for &(slot, label, h) in slots {
            s.mask[slot] = true;
            for v in s.features[slot].iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            let t = s.target.as_mut().unwrap();
            t.labels[slot] = label;
            t.h_row[slot] = h;
        }
        s
    }

    #[test]
    fn table_parameter_count() {
        let m = PrnetModel::<f64>::zeros(DEFAULT_HIDDEN_WIDTH, DEFAULT_HIDDEN_LAYERS);
        assert_eq!(m.param_count(), 31881);
        assert_eq!(m.layers.len(), 21);
    }

    #[test]
    fn zero_model_predicts_zero() {
        let m = PrnetModel::<f64>::zeros(8, 3);
        let s = sample(0, &[(0, 1.0, 0.5), (5, 2.0, 0.5)], 1);
        assert_eq!(m.forward(&s).unwrap(), [0.0; SLOTS]);
    }

    #[test]
    fn hand_loss() {
        let mut s = sample(0, &[(3, 1.0, 0.25)], 1);
        let mut p = [0.0; SLOTS];
        p[3] = 2.0;
        assert_eq!(loss(&p, &s).unwrap(), 0.25);
        s.target = None;
        assert!(matches!(loss(&p, &s), Err(PrnetError::MissingTarget(0))));
    }

    #[test]
    fn loss_ignores_common_shift() {
        let s = sample(0, &[(0, 1.0, 0.5), (1, -2.0, 0.25), (9, 0.5, 0.25)], 2);
        let m = PrnetModel::new(8, 3, 4);
        let mut p = m.forward(&s).unwrap();
        let base = loss(&p, &s).unwrap();
        for i in s.visible() {
            p[i] += 3.5;
        }
        assert!((loss(&p, &s).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn weight_sharing_permutes_outputs() {
        let m = PrnetModel::new(8, 3, 5);
        let s = sample(0, &[(2, 0.0, 0.5), (7, 0.0, 0.5)], 3);
        let mut t = s.clone();
        t.features.swap(2, 7);
        let a = m.forward(&s).unwrap();
        let b = m.forward(&t).unwrap();
        assert_eq!((a[2], a[7]), (b[7], b[2]));
    }

    #[test]
    fn lr_schedule_endpoints() {
        let c = TrainConfig::default();
        assert!((c.learning_rate(0) - 1e-2).abs() < 1e-12);
        assert!((c.learning_rate(c.max_iters - 1) - 1e-7).abs() < 1e-12);
    }

    #[test]
    fn zero_final_layer_stationary_point() {
        let mut m = PrnetModel::new(8, 3, 6);
        let last = m.layers.last_mut().unwrap();
        last.weight.fill(0.0);
        last.bias.fill(0.0);
        let s = sample(0, &[(0, 0.0, 0.5), (4, 0.0, 0.3), (6, 0.0, 0.2)], 7);
        let (l, g) = m.gradients(&[&s]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g
            .iter()
            .all(|l| l.weight.amax() == 0.0 && l.bias.amax() == 0.0));
    }

    #[test]
    fn gradient_matches_batch_loss() {
        let m = PrnetModel::new(6, 2, 8);
        let s1 = sample(0, &[(0, 1.0, 0.4), (3, -1.0, 0.6)], 9);
        let s2 = sample(1, &[(1, 2.0, 0.1), (2, 0.0, 0.2), (5, 1.0, 0.7)], 10);
        let (l, _) = m.gradients(&[&s1, &s2]).unwrap();
        assert!((l - m.batch_loss(&[&s1, &s2]).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn flat_round_trip() {
        let mut m = PrnetModel::<f64>::new(5, 2, 1);
        let p = m.flatten();
        let n = PrnetModel::<f64>::new(5, 2, 2);
        m.set_flat(&n.flatten()).unwrap();
        assert_eq!(m, n);
        assert!(m.set_flat(&p[1..]).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let m = PrnetModel::<f64>::new(40, 20, 11);
        let mut buf = Vec::new();
        save_model(&mut buf, &m).unwrap();
        let back: PrnetModel<f64> = load_model(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        let s = sample(0, &[(0, 0.0, 1.0), (12, 0.0, 0.0)], 3);
        assert_eq!(m.forward(&s).unwrap(), back.forward(&s).unwrap());

        assert!(matches!(
            load_model::<f64, _>(&buf[..buf.len() / 2]),
            Err(PrnetError::Json(_))
        ));
        let text =
            String::from_utf8(buf)
                .unwrap()
                .replacen("\"input_dim\":16", "\"input_dim\":15", 1);
        assert!(matches!(
            load_model::<f64, _>(text.as_bytes()),
            Err(PrnetError::Dimension {
                expected: 16,
                found: 15
            })
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert_eq!(c.batch_size, 128);
        c.lr_end = 1.0;
        assert!(c.validate().is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 1}"#).is_err());
    }

    #[test]
    fn train_rejects_empty() {
        let empty = FeatureSample::<f64> {
            time_ms: 0,
            features: [[0.0; FEATURE_DIM]; SLOTS],
            mask: [false; SLOTS],
            target: None,
        };
        assert!(matches!(
            train(&[empty], &TrainConfig::default()),
            Err(PrnetError::EmptyDataset)
        ));
    }
}
