//! Multilayer perceptron scoring window descriptors.
//!
//! Training and gradient checks run in `f64`; [`InferenceMlp`] holds an `f32`
//! copy for the sliding-window scorer. Dense layers are evaluated as batched
//! matrix products so a whole row of windows (or a mini-batch) goes through
//! one GEMM per layer.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureVector};

pub const MODEL_MAGIC: &[u8; 10] = b"HAHOG-MLP\x01";

/// Bounds applied to reported scores so they stay strictly inside (0, 1)
/// even when the logistic saturates in floating point.
const ALPHA_FLOOR_F64: f64 = 1e-15;
const ALPHA_FLOOR_F32: f32 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Logistic,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs x inputs`, row-major.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Layer {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
            activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub feature_config: FeatureConfig,
}

#[inline]
fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Binary cross-entropy of `logistic(z)` against `y`, evaluated without
/// forming the probability.
#[inline]
fn bce_from_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

fn activate(act: Activation, v: &mut [f64]) {
    match act {
        Activation::Relu => v.iter_mut().for_each(|x| *x = x.max(0.0)),
        Activation::Logistic => v.iter_mut().for_each(|x| *x = logistic(*x)),
        Activation::Identity => {}
    }
}

/// `c (m x n) = a (m x k) * op(b) + c`, with `b` given by its strides.
#[allow(clippy::too_many_arguments)]
fn dgemm(m: usize, k: usize, n: usize, a: &[f64], rsa: usize, csa: usize, b: &[f64], rsb: usize, csb: usize, c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: all slices cover the strided extents asserted by callers and
    // the output is a dense m x n row-major block.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Mlp {
    /// Network with the given layer widths (`dims[0]` = input, last = 1),
    /// rectifier hidden layers and a logistic output. Weights are uniform in
    /// `±sqrt(6 / fan_in)`, biases zero.
    pub fn new(dims: &[usize], feature_config: FeatureConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(dims, feature_config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut model.layers {
            let limit = (6.0 / layer.inputs as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(model)
    }

    pub fn zeros(dims: &[usize], feature_config: FeatureConfig) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("invalid layer dims {dims:?}")));
        }
        if *dims.last().unwrap() != 1 {
            return Err(Error::Config("output layer must have exactly one unit".into()));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { Activation::Logistic } else { Activation::Relu };
                Layer::zeros(dims[i], dims[i + 1], act)
            })
            .collect();
        Ok(Mlp {
            layers,
            feature_config,
        })
    }

    /// Default architecture for a feature configuration: input → 64 → 16 → 1.
    pub fn for_features(feature_config: FeatureConfig, seed: u64) -> Result<Self> {
        Self::new(&[feature_config.descriptor_len(), 64, 16, 1], feature_config, seed)
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].inputs];
        dims.extend(self.layers.iter().map(|l| l.outputs));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.input_dim() {
            return Err(Error::Dimension(format!(
                "feature vector has {len} values, model expects {}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Output-layer pre-activation for one input.
    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x.len())?;
        let mut a = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.biases.clone();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                *zo += row.iter().zip(&a).map(|(w, v)| w * v).sum::<f64>();
            }
            if i + 1 < self.layers.len() {
                activate(layer.activation, &mut z);
            }
            a = z;
        }
        Ok(a[0])
    }

    /// Score α ∈ (0, 1).
    pub fn forward(&self, x: &FeatureVector) -> Result<f64> {
        self.forward_slice(&x.values)
    }

    pub fn forward_slice(&self, x: &[f64]) -> Result<f64> {
        let z = self.logit(x)?;
        Ok(self.output_activation(z))
    }

    fn output_activation(&self, z: f64) -> f64 {
        match self.layers.last().unwrap().activation {
            Activation::Logistic => logistic(z).clamp(ALPHA_FLOOR_F64, 1.0 - ALPHA_FLOOR_F64),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Forward pass over `n` rows of `x`, keeping every layer's
    /// pre-activations (`zs`) and activations (`acts[0]` is the input).
    fn forward_cached(&self, x: &[f64], n: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut acts = vec![x.to_vec()];
        let mut zs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut z = Vec::with_capacity(n * layer.outputs);
            for _ in 0..n {
                z.extend_from_slice(&layer.biases);
            }
            let prev = acts.last().unwrap();
            dgemm(n, layer.inputs, layer.outputs, prev, layer.inputs, 1, &layer.weights, 1, layer.inputs, &mut z, 1.0);
            let mut a = z.clone();
            activate(layer.activation, &mut a);
            zs.push(z);
            acts.push(a);
        }
        (zs, acts)
    }

    /// Mean cross-entropy over the batch and its gradient. `x` holds `n`
    /// rows of `input_dim` values.
    pub fn batch_loss_and_gradient(&self, x: &[f64], y: &[f64]) -> (f64, Gradients) {
        let n = y.len();
        let (zs, acts) = self.forward_cached(x, n);
        let last = self.layers.len() - 1;
        let logits = &zs[last];
        let loss = logits.iter().zip(y).map(|(&z, &t)| bce_from_logit(z, t)).sum::<f64>() / n as f64;

        let mut grads = Gradients::zeros_like(self);
        // dL/dz at the logistic output
        let mut delta: Vec<f64> = logits
            .iter()
            .zip(y)
            .map(|(&z, &t)| (logistic(z) - t) / n as f64)
            .collect();
        for l in (0..=last).rev() {
            let layer = &self.layers[l];
            let g = &mut grads.layers[l];
            dgemm(layer.outputs, n, layer.inputs, &delta, 1, layer.outputs, &acts[l], layer.inputs, 1, &mut g.weights, 0.0);
            for row in delta.chunks_exact(layer.outputs) {
                for (gb, d) in g.biases.iter_mut().zip(row) {
                    *gb += d;
                }
            }
            if l == 0 {
                break;
            }
            let mut prev_delta = vec![0.0; n * layer.inputs];
            dgemm(n, layer.outputs, layer.inputs, &delta, layer.outputs, 1, &layer.weights, layer.inputs, 1, &mut prev_delta, 0.0);
            let prev_act = self.layers[l - 1].activation;
            for (d, &z) in prev_delta.iter_mut().zip(&zs[l - 1]) {
                *d *= match prev_act {
                    Activation::Relu => f64::from(u8::from(z > 0.0)),
                    Activation::Logistic => {
                        let s = logistic(z);
                        s * (1.0 - s)
                    }
                    Activation::Identity => 1.0,
                };
            }
            delta = prev_delta;
        }
        (loss, grads)
    }

    /// Cross-entropy loss of one sample and its gradient.
    pub fn loss_and_gradient(&self, x: &[f64], y: f64) -> Result<(f64, Gradients)> {
        self.check_dim(x.len())?;
        Ok(self.batch_loss_and_gradient(x, &[y]))
    }

    pub fn loss(&self, x: &[f64], y: f64) -> Result<f64> {
        Ok(bce_from_logit(self.logit(x)?, y))
    }

    pub fn to_inference(&self) -> InferenceMlp {
        InferenceMlp {
            layers: self
                .layers
                .iter()
                .map(|l| InferenceLayer {
                    inputs: l.inputs,
                    outputs: l.outputs,
                    weights: l.weights.iter().map(|&w| w as f32).collect(),
                    biases: l.biases.iter().map(|&b| b as f32).collect(),
                    activation: l.activation,
                })
                .collect(),
            feature_config: self.feature_config,
        }
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.biases.iter()))
    }
}

/// Parameter gradients laid out like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Gradients {
    fn zeros_like(model: &Mlp) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: vec![0.0; l.weights.len()],
                    biases: vec![0.0; l.biases.len()],
                })
                .collect(),
        }
    }

    pub fn flat(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.biases.iter()))
    }
}

/// Largest relative disagreement between the back-propagated gradient and
/// central finite differences (step `1e-5`) over all parameters.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-6)`; the floor keeps
/// parameters with vanishing gradients from dividing rounding noise by zero.
pub fn grad_check(model: &Mlp, x: &[f64], y: f64) -> Result<f64> {
    const STEP: f64 = 1e-5;
    let (_, analytic) = model.loss_and_gradient(x, y)?;
    let analytic: Vec<f64> = analytic.flat().copied().collect();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = *probe.params_mut().nth(i).unwrap();
        *probe.params_mut().nth(i).unwrap() = orig + STEP;
        let up = probe.loss(x, y)?;
        *probe.params_mut().nth(i).unwrap() = orig - STEP;
        let down = probe.loss(x, y)?;
        *probe.params_mut().nth(i).unwrap() = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Epochs without a relative loss improvement of `min_improvement`
    /// before training stops early.
    pub patience: usize,
    pub min_improvement: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 30,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 1,
            patience: 5,
            min_improvement: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.learning_rate) || !pos(self.epsilon) || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config(format!("invalid training config {self:?}")));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("moment decay rates must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Dense labeled feature matrix. Features are kept in `f32` to halve the
/// footprint of large augmented sets; batches are widened to `f64`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingSet {
    pub dim: usize,
    pub features: Vec<f32>,
    pub labels: Vec<bool>,
}

impl TrainingSet {
    pub fn new(dim: usize) -> Self {
        TrainingSet {
            dim,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn push(&mut self, x: &[f64], label: bool) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension(format!(
                "sample has {} features, set expects {}",
                x.len(),
                self.dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite feature value".into()));
        }
        self.features.extend(x.iter().map(|&v| v as f32));
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l).count();
        (self.labels.len() - pos, pos)
    }

    pub fn subset(&self, idx: &[usize]) -> TrainingSet {
        let mut out = TrainingSet::new(self.dim);
        for &i in idx {
            out.features.extend_from_slice(self.row(i));
            out.labels.push(self.labels[i]);
        }
        out
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, model: &mut Mlp, grads: &Gradients, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        let lr = cfg.learning_rate;
        for (((p, &g), m), v) in model
            .params_mut()
            .zip(grads.flat())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon);
        }
    }
}

/// Mini-batch Adam on mean binary cross-entropy. Returns the trained model
/// and the mean loss of every completed epoch. Fully determined by
/// `(model, data, cfg)`.
pub fn train(model: Mlp, data: &TrainingSet, cfg: &TrainConfig) -> Result<(Mlp, Vec<f64>)> {
    cfg.validate()?;
    if data.dim != model.input_dim() {
        return Err(Error::Dimension(format!(
            "training set has {} features, model expects {}",
            data.dim,
            model.input_dim()
        )));
    }
    let (neg, pos) = data.class_counts();
    if neg == 0 || pos == 0 {
        return Err(Error::Data(format!(
            "training needs both classes, got {pos} positive and {neg} negative samples"
        )));
    }
    if data.features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite feature value".into()));
    }

    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.param_count());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let dim = data.dim;
    let mut xb = Vec::with_capacity(cfg.batch_size * dim);
    let mut yb = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            xb.clear();
            yb.clear();
            for &i in batch {
                xb.extend(data.row(i).iter().map(|&v| v as f64));
                yb.push(if data.labels[i] { 1.0 } else { 0.0 });
            }
            let (loss, grads) = model.batch_loss_and_gradient(&xb, &yb);
            total += loss * batch.len() as f64;
            adam.step(&mut model, &grads, cfg);
        }
        let epoch_loss = total / data.len() as f64;
        log::debug!("epoch {epoch}: loss {epoch_loss:.6}");
        history.push(epoch_loss);
        if epoch_loss < best * (1.0 - cfg.min_improvement) {
            best = epoch_loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log::debug!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    Ok((model, history))
}

/// Mean cross-entropy and accuracy at threshold 0.5 over a set.
pub fn evaluate_set(model: &Mlp, data: &TrainingSet) -> (f64, f64) {
    if data.is_empty() {
        return (0.0, 0.0);
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for chunk_start in (0..data.len()).step_by(256) {
        let end = (chunk_start + 256).min(data.len());
        let n = end - chunk_start;
        let x: Vec<f64> = data.features[chunk_start * data.dim..end * data.dim]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let (zs, _) = model.forward_cached(&x, n);
        for (k, &z) in zs.last().unwrap().iter().enumerate() {
            let label = data.labels[chunk_start + k];
            loss += bce_from_logit(z, if label { 1.0 } else { 0.0 });
            if (z >= 0.0) == label {
                correct += 1;
            }
        }
    }
    (loss / data.len() as f64, correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelHeader {
    layer_dims: Vec<usize>,
    activations: Vec<Activation>,
    feature_config: FeatureConfig,
}

/// Serializes the model: magic, `u32` header length, JSON header, then per
/// layer the row-major weight matrix followed by the biases as
/// little-endian `f32`.
pub fn encode_model(model: &Mlp) -> Vec<u8> {
    let header = ModelHeader {
        layer_dims: model.layer_dims(),
        activations: model.layers.iter().map(|l| l.activation).collect(),
        feature_config: model.feature_config,
    };
    let json = serde_json::to_vec(&header).expect("model header serializes");
    let mut out = Vec::with_capacity(MODEL_MAGIC.len() + 4 + json.len() + 4 * model.param_count());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for &p in model.params() {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<Mlp> {
    let rest = bytes
        .strip_prefix(MODEL_MAGIC.as_slice())
        .ok_or_else(|| Error::Model("bad magic".into()))?;
    if rest.len() < 4 {
        return Err(Error::Model("truncated header".into()));
    }
    let hlen = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
    let rest = &rest[4..];
    if rest.len() < hlen {
        return Err(Error::Model("truncated header".into()));
    }
    let header: ModelHeader =
        serde_json::from_slice(&rest[..hlen]).map_err(|e| Error::Model(format!("bad header: {e}")))?;
    if header.activations.len() + 1 != header.layer_dims.len() {
        return Err(Error::Model("activation count does not match layer dims".into()));
    }
    let mut model = Mlp::zeros(&header.layer_dims, header.feature_config)
        .map_err(|e| Error::Model(format!("shape mismatch: {e}")))?;
    if header.layer_dims[0] != header.feature_config.descriptor_len() {
        return Err(Error::Model(format!(
            "shape mismatch: input width {} but feature config yields {}",
            header.layer_dims[0],
            header.feature_config.descriptor_len()
        )));
    }
    for (layer, act) in model.layers.iter_mut().zip(&header.activations) {
        layer.activation = *act;
    }
    let payload = &rest[hlen..];
    let expected = model.param_count() * 4;
    if payload.len() < expected {
        return Err(Error::Model(format!(
            "truncated weights: {} of {expected} bytes",
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(Error::Model(format!(
            "shape mismatch: {} trailing bytes",
            payload.len() - expected
        )));
    }
    for (p, chunk) in model.params_mut().zip(payload.chunks_exact(4)) {
        *p = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
    }
    Ok(model)
}

pub fn save_model(model: &Mlp, path: &Path) -> Result<()> {
    fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Mlp> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

/// Hex SHA-256 of the serialized model.
pub fn model_hash(model: &Mlp) -> String {
    hex::encode(Sha256::digest(encode_model(model)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f32>,
    pub biases: Vec<f32>,
    pub activation: Activation,
}

/// Single-precision copy of a model for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceMlp {
    pub layers: Vec<InferenceLayer>,
    pub feature_config: FeatureConfig,
}

impl InferenceMlp {
    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    /// Scores `n` rows of `x`, writing one α per row into `out`. `scratch`
    /// is reused between calls to avoid reallocating activations.
    pub fn forward_batch(&self, x: &[f32], n: usize, scratch: &mut (Vec<f32>, Vec<f32>), out: &mut [f32]) {
        debug_assert_eq!(x.len(), n * self.input_dim());
        let (a, b) = scratch;
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let input: &[f32] = if l == 0 { x } else { a };
            b.clear();
            for _ in 0..n {
                b.extend_from_slice(&layer.biases);
            }
            if n > 0 {
                // SAFETY: `input` is n x inputs, weights outputs x inputs,
                // `b` n x outputs, all dense row-major.
                unsafe {
                    matrixmultiply::sgemm(
                        n,
                        layer.inputs,
                        layer.outputs,
                        1.0,
                        input.as_ptr(),
                        layer.inputs as isize,
                        1,
                        layer.weights.as_ptr(),
                        1,
                        layer.inputs as isize,
                        1.0,
                        b.as_mut_ptr(),
                        layer.outputs as isize,
                        1,
                    );
                }
            }
            match layer.activation {
                Activation::Relu => b.iter_mut().for_each(|v| *v = v.max(0.0)),
                Activation::Logistic if l == last => b.iter_mut().for_each(|v| {
                    *v = (1.0 / (1.0 + (-*v).exp())).clamp(ALPHA_FLOOR_F32, 1.0 - ALPHA_FLOOR_F32)
                }),
                Activation::Logistic => b.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp())),
                Activation::Identity => {}
            }
            std::mem::swap(a, b);
        }
        out[..n].copy_from_slice(&a[..n]);
    }

    pub fn forward(&self, x: &[f32]) -> Result<f32> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "feature vector has {} values, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut out = [0.0f32];
        self.forward_batch(x, 1, &mut (Vec::new(), Vec::new()), &mut out);
        Ok(out[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_for(dim: usize) -> FeatureConfig {
        // only descriptor_len matters for header validation
        let base = FeatureConfig::default();
        FeatureConfig {
            window_cells: 1,
            n_bins: 4,
            n_height_bins: dim - 4,
            ..base
        }
    }

    #[test]
    fn zero_model_scores_half() {
        let m = Mlp::zeros(&[5, 3, 1], cfg_for(5)).unwrap();
        assert_eq!(m.forward_slice(&[1.0, -2.0, 3.0, 0.5, 9.0]).unwrap(), 0.5);
    }

    #[test]
    fn single_layer_is_logistic_regression() {
        let mut m = Mlp::zeros(&[5, 1], cfg_for(5)).unwrap();
        m.layers[0].weights = vec![0.5, -1.0, 0.25, 2.0, 0.0];
        m.layers[0].biases = vec![-0.3];
        let x = [1.0, 2.0, 4.0, -0.5, 7.0];
        // 0.5 - 2 + 1 - 1 - 0.3 = -1.8
        let expected = 1.0 / (1.0 + 1.8f64.exp());
        assert!((m.forward_slice(&x).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch() {
        let m = Mlp::zeros(&[5, 1], cfg_for(5)).unwrap();
        assert!(matches!(m.forward_slice(&[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn output_bias_gradient_at_zero() {
        let m = Mlp::zeros(&[5, 4, 1], cfg_for(5)).unwrap();
        for y in [0.0, 1.0] {
            let (_, g) = m.loss_and_gradient(&[0.0; 5], y).unwrap();
            assert_eq!(g.layers[1].biases[0], 0.5 - y);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = Mlp::new(&[6, 5, 3, 1], cfg_for(6), 3).unwrap();
        let x = [0.1, -0.4, 0.7, 0.2, 0.9, -0.3];
        assert!(grad_check(&m, &x, 1.0).unwrap() < 1e-4);
        let linear = Mlp::new(&[6, 1], cfg_for(6), 4).unwrap();
        assert!(grad_check(&linear, &x, 0.0).unwrap() < 1e-4);
    }

    fn toy_set() -> TrainingSet {
        let mut set = TrainingSet::new(5);
        set.push(&[1.0, 0.0, 0.2, 0.0, 0.0], true).unwrap();
        set.push(&[0.0, 1.0, 0.0, 0.2, 0.0], false).unwrap();
        set
    }

    #[test]
    fn separable_toy_set_converges() {
        let model = Mlp::new(&[5, 8, 1], cfg_for(5), 9).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.01,
            batch_size: 2,
            epochs: 500,
            patience: 500,
            ..TrainConfig::default()
        };
        let (_, history) = train(model, &toy_set(), &cfg).unwrap();
        assert!(*history.last().unwrap() < 0.01, "{:?}", history.last());
        assert!(history.windows(2).all(|w| w[1] <= w[0]), "loss not monotone");
    }

    #[test]
    fn zero_epochs_is_identity() {
        let model = Mlp::new(&[5, 8, 1], cfg_for(5), 9).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (trained, history) = train(model.clone(), &toy_set(), &cfg).unwrap();
        assert_eq!(trained, model);
        assert!(history.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let run = || {
            let model = Mlp::new(&[5, 8, 1], cfg_for(5), 9).unwrap();
            encode_model(&train(model, &toy_set(), &cfg).unwrap().0)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn training_rejects_bad_data() {
        let model = Mlp::new(&[5, 8, 1], cfg_for(5), 9).unwrap();
        let mut one_class = TrainingSet::new(5);
        one_class.push(&[0.0; 5], true).unwrap();
        assert!(matches!(
            train(model.clone(), &one_class, &TrainConfig::default()),
            Err(Error::Data(_))
        ));
        let mut set = TrainingSet::new(5);
        assert!(matches!(set.push(&[f64::NAN, 0.0, 0.0, 0.0, 0.0], true), Err(Error::Data(_))));
    }

    #[test]
    fn model_file_errors() {
        let model = Mlp::new(&[5, 3, 1], cfg_for(5), 2).unwrap();
        let bytes = encode_model(&model);
        assert!(bytes.starts_with(b"HAHOG-MLP\x01"));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_model(&bad), Err(Error::Model(m)) if m.contains("magic")));
        assert!(matches!(decode_model(&bytes[..bytes.len() - 3]), Err(Error::Model(m)) if m.contains("truncated")));
        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 4]);
        assert!(matches!(decode_model(&long), Err(Error::Model(m)) if m.contains("shape")));
    }

    #[test]
    fn inference_copy_agrees() {
        let model = Mlp::new(&[5, 7, 3, 1], cfg_for(5), 5).unwrap();
        let inf = model.to_inference();
        let x = [0.3, 0.1, -0.2, 0.8, 0.05];
        let a = model.forward_slice(&x).unwrap();
        let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let b = inf.forward(&xf).unwrap();
        assert!((a - b as f64).abs() < 1e-6);
    }
}
