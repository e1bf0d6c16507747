//! Rectified-flow velocity field.
//!
//! The field `v(x, t)` is a fully connected network: the flattened image is
//! concatenated with sinusoidal time features `sin(2^k π t), cos(2^k π t)`,
//! passed through tanh hidden layers, and mapped linearly back to one value
//! per pixel.
//!
//! Training pairs a pathological image `x0` (a healthy slice with synthetic
//! lesions) with its healthy original `x1`. On the straight path
//! `x_t = t·x1 + (1 - t)·x0` the target velocity is the constant `x1 - x0`,
//! and the loss is `‖(x1 - x0) - v(x_t, t)‖²`.

use std::borrow::Cow;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Image2D};
use crate::phantom::{inject_lesion, LesionParams};
use crate::rng::{derive_seed, rng};

pub const DEFAULT_TIME_PAIRS: usize = 4;
pub const DEFAULT_HIDDEN: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    /// Layer widths from input to output; input = pixels + 2·time_pairs.
    widths: Vec<usize>,
    time_pairs: usize,
    /// Per layer: weights (out × in, row-major) followed by biases (out).
    params: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct LayerSpan {
    inputs: usize,
    outputs: usize,
    weights: usize,
    biases: usize,
}

impl FlowModel {
    fn check_widths(widths: &[usize], time_pairs: usize) -> Result<()> {
        if widths.len() < 2 {
            return Err(Error::Param("a flow model needs at least input and output widths".into()));
        }
        if widths.contains(&0) {
            return Err(Error::Param(format!("layer widths must be positive: {widths:?}")));
        }
        let pixels = *widths.last().unwrap();
        if widths[0] != pixels + 2 * time_pairs {
            return Err(Error::Shape(format!(
                "input width {} must equal {pixels} pixels + {} time features",
                widths[0],
                2 * time_pairs
            )));
        }
        Ok(())
    }

    fn param_count(widths: &[usize]) -> usize {
        widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// All-zero parameters: the field is identically zero.
    pub fn zeros(pixels: usize, hidden: &[usize], time_pairs: usize) -> Result<Self> {
        let widths = Self::layer_widths(pixels, hidden, time_pairs);
        Self::check_widths(&widths, time_pairs)?;
        let n = Self::param_count(&widths);
        Ok(Self {
            widths,
            time_pairs,
            params: vec![0.0; n],
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn new(pixels: usize, hidden: &[usize], time_pairs: usize, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(pixels, hidden, time_pairs)?;
        let mut r = rng(seed);
        for span in model.spans() {
            let limit = (6.0 / (span.inputs + span.outputs) as f64).sqrt();
            for w in &mut model.params[span.weights..span.weights + span.inputs * span.outputs] {
                *w = limit * (2.0 * r.random::<f64>() - 1.0);
            }
        }
        Ok(model)
    }

    /// Builds a model from explicit widths and a flat parameter vector.
    pub fn from_parts(widths: Vec<usize>, time_pairs: usize, params: Vec<f64>) -> Result<Self> {
        Self::check_widths(&widths, time_pairs)?;
        let n = Self::param_count(&widths);
        if params.len() != n {
            return Err(Error::Shape(format!("expected {n} parameters, got {}", params.len())));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("model parameters must be finite".into()));
        }
        Ok(Self {
            widths,
            time_pairs,
            params,
        })
    }

    fn layer_widths(pixels: usize, hidden: &[usize], time_pairs: usize) -> Vec<usize> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(pixels + 2 * time_pairs);
        widths.extend_from_slice(hidden);
        widths.push(pixels);
        widths
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn time_pairs(&self) -> usize {
        self.time_pairs
    }

    pub fn pixels(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn spans(&self) -> Vec<LayerSpan> {
        let mut offset = 0;
        self.widths
            .windows(2)
            .map(|w| {
                let span = LayerSpan {
                    inputs: w[0],
                    outputs: w[1],
                    weights: offset,
                    biases: offset + w[0] * w[1],
                };
                offset += w[0] * w[1] + w[1];
                span
            })
            .collect()
    }

    pub fn time_features(&self, t: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.time_pairs);
        for k in 0..self.time_pairs {
            let arg = (1u64 << k) as f64 * std::f64::consts::PI * t;
            out.push(arg.sin());
            out.push(arg.cos());
        }
        out
    }

    fn check_input(&self, x: &[f64], t: f64) -> Result<()> {
        if x.len() != self.pixels() {
            return Err(Error::Shape(format!(
                "model expects {} pixels, got {}",
                self.pixels(),
                x.len()
            )));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Param(format!("time must lie in [0, 1], got {t}")));
        }
        Ok(())
    }

    /// Activations of every layer for a batch of inputs; `acts[l][b]` is layer
    /// `l` of sample `b`, and the last layer is the velocity.
    fn activations(&self, inputs: Vec<Vec<f64>>) -> Vec<Vec<Vec<f64>>> {
        let spans = self.spans();
        let mut acts = Vec::with_capacity(spans.len() + 1);
        acts.push(inputs);
        for (l, span) in spans.iter().enumerate() {
            let prev = &acts[l];
            let w = &self.params[span.weights..span.biases];
            let bias = &self.params[span.biases..span.biases + span.outputs];
            let last = l + 1 == spans.len();
            let mut out = vec![vec![0.0; span.outputs]; prev.len()];
            // Row-outer so each weight row is loaded once per batch.
            for (j, (row, b0)) in w.chunks_exact(span.inputs).zip(bias).enumerate() {
                for (o, p) in out.iter_mut().zip(prev) {
                    let z = b0 + dot(row, p);
                    o[j] = if last { z } else { z.tanh() };
                }
            }
            acts.push(out);
        }
        acts
    }

    fn network_input(&self, x: &[f64], t: f64) -> Vec<f64> {
        let mut input = Vec::with_capacity(self.widths[0]);
        input.extend_from_slice(x);
        input.extend(self.time_features(t));
        input
    }

    /// Velocity `v(x, t)` for a flattened image.
    pub fn forward(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_input(x, t)?;
        let v = self
            .activations(vec![self.network_input(x, t)])
            .pop()
            .and_then(|mut layer| layer.pop())
            .unwrap();
        if v.iter().any(|a| !a.is_finite()) {
            return Err(Error::Numeric(format!("non-finite velocity at t = {t}")));
        }
        Ok(v)
    }

    /// Squared error `‖target - v(x, t)‖²` and its gradient w.r.t. every
    /// parameter (same layout as [`FlowModel::params`]).
    pub fn loss_and_grad(&self, x: &[f64], t: f64, target: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.params.len()];
        let loss = self.accumulate_grad(&[(x, t, target)], &mut grad)?;
        Ok((loss, grad))
    }

    /// Sums losses and adds the summed gradient of a batch of
    /// `(x, t, target)` samples into `grad`.
    pub fn accumulate_grad(&self, samples: &[(&[f64], f64, &[f64])], grad: &mut [f64]) -> Result<f64> {
        if grad.len() != self.params.len() {
            return Err(Error::Shape("gradient buffer does not match parameters".into()));
        }
        for &(x, t, target) in samples {
            self.check_input(x, t)?;
            if target.len() != self.pixels() {
                return Err(Error::Shape("target length differs from model output".into()));
            }
        }
        let acts = self.activations(samples.iter().map(|&(x, t, _)| self.network_input(x, t)).collect());
        let spans = self.spans();
        let mut loss = 0.0;
        let mut delta: Vec<Vec<f64>> = acts
            .last()
            .unwrap()
            .iter()
            .zip(samples)
            .map(|(v, &(_, _, target))| {
                v.iter()
                    .zip(target)
                    .map(|(vi, ui)| {
                        let r = vi - ui;
                        loss += r * r;
                        2.0 * r
                    })
                    .collect()
            })
            .collect();
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite loss".into()));
        }

        for l in (0..spans.len()).rev() {
            let span = spans[l];
            let inputs = &acts[l];
            let gw = &mut grad[span.weights..span.biases];
            for (j, row) in gw.chunks_exact_mut(span.inputs).enumerate() {
                for (d, input) in delta.iter().zip(inputs) {
                    let d = d[j];
                    if d != 0.0 {
                        for (g, a) in row.iter_mut().zip(input) {
                            *g += d * a;
                        }
                    }
                }
            }
            let gb = &mut grad[span.biases..span.biases + span.outputs];
            for d in &delta {
                for (g, dj) in gb.iter_mut().zip(d) {
                    *g += dj;
                }
            }
            if l == 0 {
                break;
            }
            // Back through the weights, then through tanh of the layer below.
            let w = &self.params[span.weights..span.biases];
            let mut back = vec![vec![0.0; span.inputs]; delta.len()];
            for (j, row) in w.chunks_exact(span.inputs).enumerate() {
                for (bk, d) in back.iter_mut().zip(&delta) {
                    let d = d[j];
                    if d != 0.0 {
                        for (b, wv) in bk.iter_mut().zip(row) {
                            *b += d * wv;
                        }
                    }
                }
            }
            for (bk, input) in back.iter_mut().zip(inputs) {
                for (b, a) in bk.iter_mut().zip(input) {
                    *b *= 1.0 - a * a;
                }
            }
            delta = back;
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        Ok(loss)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators keep the loop vectorisable; summation order is fixed.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..a.len() {
        s += a[j] * b[j];
    }
    s
}

/// A pathological image and its healthy counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowPair {
    pub x0: Image2D,
    pub x1: Image2D,
}

impl FlowPair {
    pub fn new(x0: Image2D, x1: Image2D) -> Result<Self> {
        x0.geometry().ensure_same(x1.geometry(), "flow pair")?;
        Ok(Self { x0, x1 })
    }

    /// Point on the straight path and the constant target velocity.
    pub fn interpolate(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        let xt = self
            .x0
            .pixels()
            .iter()
            .zip(self.x1.pixels())
            .map(|(a, b)| t * b + (1.0 - t) * a)
            .collect();
        let u = self
            .x0
            .pixels()
            .iter()
            .zip(self.x1.pixels())
            .map(|(a, b)| b - a)
            .collect();
        (xt, u)
    }
}

/// Rectified-flow loss of one pair at time `t`, with parameter gradients.
pub fn rf_loss(model: &FlowModel, pair: &FlowPair, t: f64) -> Result<(f64, Vec<f64>)> {
    let (xt, u) = pair.interpolate(t);
    model.loss_and_grad(&xt, t, &u)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Momentum { beta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Independent `t` draws per pair per step.
    pub t_samples: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            epochs: 600,
            batch_size: 8,
            t_samples: 1,
            seed: 0,
            optimizer: Optimizer::Momentum { beta: 0.9 },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Param(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.t_samples == 0 {
            return Err(Error::Param("batch size and t samples must be positive".into()));
        }
        if let Optimizer::Momentum { beta } = self.optimizer {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Param(format!("momentum must lie in [0, 1), got {beta}")));
            }
        }
        Ok(())
    }
}

/// Supplies the training pairs of each epoch.
pub trait PairSource {
    fn epoch_pairs(&self, epoch: usize) -> Result<Cow<'_, [FlowPair]>>;
}

impl PairSource for [FlowPair] {
    fn epoch_pairs(&self, _epoch: usize) -> Result<Cow<'_, [FlowPair]>> {
        Ok(Cow::Borrowed(self))
    }
}

impl PairSource for Vec<FlowPair> {
    fn epoch_pairs(&self, _epoch: usize) -> Result<Cow<'_, [FlowPair]>> {
        Ok(Cow::Borrowed(self.as_slice()))
    }
}

/// Fresh synthetic lesions on every training image each epoch, so the model
/// never sees the same pathological counterpart twice.
#[derive(Debug, Clone)]
pub struct SyntheticLesionPairs {
    pub images: Vec<(Image2D, BinaryMask)>,
    pub lesion: LesionParams,
    pub seed: u64,
}

const STREAM_AUGMENT: u64 = 11;

impl PairSource for SyntheticLesionPairs {
    fn epoch_pairs(&self, epoch: usize) -> Result<Cow<'_, [FlowPair]>> {
        let epoch_seed = derive_seed(self.seed, STREAM_AUGMENT, epoch as u64);
        self.images
            .iter()
            .enumerate()
            .map(|(i, (healthy, brain))| {
                let les = inject_lesion(healthy, brain, &self.lesion, derive_seed(epoch_seed, 0, i as u64))?;
                FlowPair::new(les.image, healthy.clone())
            })
            .collect::<Result<Vec<_>>>()
            .map(Cow::Owned)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: FlowModel,
    /// Mean per-sample loss of each epoch.
    pub loss_history: Vec<f64>,
}

const DIVERGENCE_LOSS: f64 = 1e6;

/// Mini-batch gradient descent on the rectified-flow loss with fixed pairs.
pub fn train(model: FlowModel, pairs: &[FlowPair], config: &TrainConfig) -> Result<TrainOutcome> {
    if pairs.is_empty() {
        return Err(Error::Param("training needs at least one pair".into()));
    }
    train_with(model, pairs, config)
}

/// Like [`train`] with pairs drawn from `source` every epoch.
///
/// Each epoch shuffles the pairs, then for every batch averages the gradient
/// over `batch × t_samples` draws of `t ~ U[0, 1]` before one update.
/// Gradients are accumulated in batch order, so runs are bit-reproducible.
pub fn train_with<S: PairSource + ?Sized>(
    mut model: FlowModel,
    source: &S,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut r = rng(config.seed);
    let mut velocity = match config.optimizer {
        Optimizer::Momentum { .. } => vec![0.0; model.num_params()],
        Optimizer::Sgd => Vec::new(),
    };
    let mut history = Vec::with_capacity(config.epochs);
    let mut grad_sum = vec![0.0; model.num_params()];

    for epoch in 0..config.epochs {
        let pairs = source.epoch_pairs(epoch)?;
        if pairs.is_empty() {
            return Err(Error::Param(format!("epoch {epoch} has no training pairs")));
        }
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut r);
        let mut epoch_loss = 0.0;
        let mut samples = 0usize;

        for batch in order.chunks(config.batch_size) {
            grad_sum.iter_mut().for_each(|g| *g = 0.0);
            let mut draws = Vec::with_capacity(batch.len() * config.t_samples);
            for &i in batch {
                for _ in 0..config.t_samples {
                    let t: f64 = r.random();
                    let (xt, u) = pairs[i].interpolate(t);
                    draws.push((xt, t, u));
                }
            }
            let refs: Vec<(&[f64], f64, &[f64])> =
                draws.iter().map(|(x, t, u)| (x.as_slice(), *t, u.as_slice())).collect();
            epoch_loss += model.accumulate_grad(&refs, &mut grad_sum).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}: {m}")),
                other => other,
            })?;
            let count = draws.len();
            samples += count;
            let scale = config.learning_rate / count as f64;
            match config.optimizer {
                Optimizer::Sgd => {
                    for (p, g) in model.params.iter_mut().zip(&grad_sum) {
                        *p -= scale * g;
                    }
                }
                Optimizer::Momentum { beta } => {
                    for ((p, v), g) in model.params.iter_mut().zip(&mut velocity).zip(&grad_sum) {
                        *v = beta * *v + scale * g;
                        *p -= *v;
                    }
                }
            }
        }
        let mean = epoch_loss / samples as f64;
        if !mean.is_finite() || mean > DIVERGENCE_LOSS {
            return Err(Error::Numeric(format!(
                "training diverged at epoch {epoch}: mean loss {mean}"
            )));
        }
        history.push(mean);
    }
    Ok(TrainOutcome {
        model,
        loss_history: history,
    })
}

pub const AFLW_MAGIC: &[u8; 5] = b"AFLW1";

/// AFLW1 checkpoint bytes: magic, `u32` layer count, `u32` widths, `u32`
/// time-feature pairs, then every parameter as `f64`, all little-endian.
pub fn encode_model(model: &FlowModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + 4 * model.widths.len() + 8 * model.params.len());
    out.extend_from_slice(AFLW_MAGIC);
    out.extend_from_slice(&(model.widths.len() as u32).to_le_bytes());
    for &w in &model.widths {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    out.extend_from_slice(&(model.time_pairs as u32).to_le_bytes());
    for p in &model.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_model(bytes: &[u8], path: &Path) -> Result<FlowModel> {
    let err = |m: String| Error::format(path, m);
    if bytes.len() < 5 || &bytes[..5] != AFLW_MAGIC {
        return Err(err("bad magic".into()));
    }
    let mut pos = 5;
    let read_u32 = |pos: &mut usize| -> Result<usize> {
        let end = *pos + 4;
        let chunk = bytes.get(*pos..end).ok_or_else(|| err("truncated header".into()))?;
        *pos = end;
        Ok(u32::from_le_bytes(chunk.try_into().unwrap()) as usize)
    };
    let n_layers = read_u32(&mut pos)?;
    if !(2..=64).contains(&n_layers) {
        return Err(err(format!("implausible layer count {n_layers}")));
    }
    let widths = (0..n_layers)
        .map(|_| read_u32(&mut pos))
        .collect::<Result<Vec<_>>>()?;
    let time_pairs = read_u32(&mut pos)?;
    FlowModel::check_widths(&widths, time_pairs).map_err(|e| err(e.to_string()))?;
    let expected = FlowModel::param_count(&widths);
    let payload = &bytes[pos..];
    if payload.len() != 8 * expected {
        return Err(err(format!(
            "{} payload: expected {} parameter bytes, found {}",
            if payload.len() < 8 * expected { "truncated" } else { "oversized" },
            8 * expected,
            payload.len()
        )));
    }
    let params: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FlowModel::from_parts(widths, time_pairs, params).map_err(|e| err(e.to_string()))
}

pub fn save_model(path: impl AsRef<Path>, model: &FlowModel) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<FlowModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes, path)
}
