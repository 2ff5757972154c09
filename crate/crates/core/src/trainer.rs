//! Surrogate clique classification: a one-hidden-layer rectifier network with a
//! global softmax over all cliques, trained batch by batch with momentum SGD.
//! The hidden activations are the learned representation.
//!
//! Models are persisted as the magic bytes `CBM2`, three little-endian `u64`
//! (`input_dim`, `hidden_dim`, `classes`), then `W1`, `b1`, `W2`, `b2` as
//! row-major little-endian `f64`.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::batchopt::BatchAssignment;
use crate::cliques::CliqueAssignment;
use crate::dataset::{self, FeatureMatrix};
use crate::error::{Error, Result};
use crate::rng::Rng;

const MODEL_MAGIC: &[u8; 4] = b"CBM2";
const INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    /// `hidden × input`
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    /// `classes × hidden`
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

/// Same shapes as the model.
pub type Gradients = EmbeddingModel;

impl EmbeddingModel {
    pub fn zeros(input_dim: usize, hidden_dim: usize, classes: usize) -> Self {
        Self {
            w1: DMatrix::zeros(hidden_dim, input_dim),
            b1: DVector::zeros(hidden_dim),
            w2: DMatrix::zeros(classes, hidden_dim),
            b2: DVector::zeros(classes),
        }
    }

    /// Gaussian weights with std 0.01, zero biases.
    pub fn random(input_dim: usize, hidden_dim: usize, classes: usize, rng: &mut Rng) -> Self {
        let mut model = Self::zeros(input_dim, hidden_dim, classes);
        model.w1 = gaussian(hidden_dim, input_dim, rng);
        model.w2 = gaussian(classes, hidden_dim, rng);
        model
    }

    /// Replace the output layer with a freshly initialized one over `classes`.
    pub fn reinit_head(&mut self, classes: usize, rng: &mut Rng) {
        self.w2 = gaussian(classes, self.hidden_dim(), rng);
        self.b2 = DVector::zeros(classes);
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn classes(&self) -> usize {
        self.w2.nrows()
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.hidden_dim(), self.classes())
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.w1.shape() == other.w1.shape()
            && self.b1.len() == other.b1.len()
            && self.w2.shape() == other.w2.shape()
            && self.b2.len() == other.b2.len()
    }

    fn parts_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
        ]
    }

    fn parts(&self) -> [&[f64]; 4] {
        [self.w1.as_slice(), self.b1.as_slice(), self.w2.as_slice(), self.b2.as_slice()]
    }

    pub fn is_finite(&self) -> bool {
        self.parts().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        for dim in [self.input_dim(), self.hidden_dim(), self.classes()] {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        dataset::write_matrix_payload(&mut out, &self.w1);
        for v in &self.b1 {
            out.extend_from_slice(&v.to_le_bytes());
        }
        dataset::write_matrix_payload(&mut out, &self.w2);
        for v in &self.b2 {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = bytes;
        dataset::expect_magic(&mut reader, MODEL_MAGIC)?;
        let d = dataset::read_u64(&mut reader)? as usize;
        let h = dataset::read_u64(&mut reader)? as usize;
        let k = dataset::read_u64(&mut reader)? as usize;
        let w1 = dataset::read_matrix_payload(&mut reader, h, d)?;
        let b1 = dataset::read_matrix_payload(&mut reader, 1, h)?;
        let w2 = dataset::read_matrix_payload(&mut reader, k, h)?;
        let b2 = dataset::read_matrix_payload(&mut reader, 1, k)?;
        if !reader.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", reader.len())));
        }
        Ok(Self {
            w1,
            b1: DVector::from_iterator(h, b1.iter().copied()),
            w2,
            b2: DVector::from_iterator(k, b2.iter().copied()),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> DMatrix<f64> {
    // row-major draw order
    let draws: Vec<f64> = (0..rows * cols)
        .map(|_| INIT_STD * rng.sample::<f64, _>(StandardNormal))
        .collect();
    DMatrix::from_row_slice(rows, cols, &draws)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub minibatch: usize,
    pub iterations: usize,
    /// Feature-space jitter, as a multiple of each feature's standard deviation.
    pub jitter: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            minibatch: 32,
            iterations: 5000,
            jitter: 0.01,
            hidden: 64,
            seed: 42,
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidParams("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParams("momentum must be in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.jitter >= 0.0) {
            return Err(Error::InvalidParams("weight_decay and jitter must be >= 0".into()));
        }
        if self.minibatch == 0 || self.hidden == 0 {
            return Err(Error::InvalidParams("minibatch and hidden must be >= 1".into()));
        }
        Ok(())
    }
}

fn hidden_pre(model: &EmbeddingModel, inputs: &DMatrix<f64>) -> DMatrix<f64> {
    let mut z = inputs * model.w1.transpose();
    for mut row in z.row_iter_mut() {
        row += model.b1.transpose();
    }
    z
}

/// Mean cross-entropy of `softmax(W2 relu(W1 x + b1) + b2)` plus
/// `λ/2 (‖W1‖² + ‖W2‖²)`, with backpropagated gradients.
pub fn softmax_loss(
    model: &EmbeddingModel,
    inputs: &DMatrix<f64>,
    labels: &[usize],
    weight_decay: f64,
) -> Result<(f64, Gradients)> {
    let m = inputs.nrows();
    if inputs.ncols() != model.input_dim() || labels.len() != m || m == 0 {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} inputs with {} labels for a model over {} features",
            m,
            inputs.ncols(),
            labels.len(),
            model.input_dim()
        )));
    }
    let k = model.classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::ShapeMismatch(format!("label {bad} with {k} classes")));
    }
    let pre = hidden_pre(model, inputs);
    let hidden = pre.map(|v| v.max(0.0));
    let mut logits = &hidden * model.w2.transpose();
    for mut row in logits.row_iter_mut() {
        row += model.b2.transpose();
    }

    let mut loss = 0.0;
    // becomes dL/dlogits
    let mut delta = logits;
    for (j, mut row) in delta.row_iter_mut().enumerate() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let total = row.sum();
        row /= total;
        loss -= row[labels[j]].ln();
        row[labels[j]] -= 1.0;
    }
    let inv_m = 1.0 / m as f64;
    loss *= inv_m;
    delta *= inv_m;
    loss += 0.5 * weight_decay * (model.w1.norm_squared() + model.w2.norm_squared());

    let w2 = delta.transpose() * &hidden + &model.w2 * weight_decay;
    let b2 = delta.row_sum().transpose();
    let mut back = &delta * &model.w2;
    back.zip_apply(&pre, |g, z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
    let w1 = back.transpose() * inputs + &model.w1 * weight_decay;
    let b1 = back.row_sum().transpose();
    Ok((loss, Gradients { w1, b1, w2, b2 }))
}

/// `V ← μV − α∇L`, `W ← W + V`, parameter-wise.
pub fn sgd_step(
    weights: &mut EmbeddingModel,
    velocity: &mut EmbeddingModel,
    gradients: &Gradients,
    learning_rate: f64,
    momentum: f64,
) {
    debug_assert!(weights.same_shape(velocity) && weights.same_shape(gradients));
    let grads = gradients.parts();
    for ((w, v), g) in weights.parts_mut().into_iter().zip(velocity.parts_mut()).zip(grads) {
        for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = momentum * *vi - learning_rate * gi;
            *wi += *vi;
        }
    }
}

/// Hidden activations `relu(W1 x + b1)` of every sample.
pub fn embed(model: &EmbeddingModel, features: &FeatureMatrix) -> Result<FeatureMatrix> {
    if features.dim() != model.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "features have {} columns, model expects {}",
            features.dim(),
            model.input_dim()
        )));
    }
    FeatureMatrix::new(hidden_pre(model, features.values()).map(|v| v.max(0.0)))
}

/// Training samples of one batch row with their clique labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPool {
    pub samples: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Member pools per batch row. A sample in several cliques of one row is
/// labeled by the most compact of them (highest intra similarity, then lowest
/// clique index).
pub fn batch_pools(cliques: &CliqueAssignment, batches: &BatchAssignment) -> Result<Vec<BatchPool>> {
    if !batches.rounded {
        return Err(Error::InvalidParams("training needs a rounded batch assignment".into()));
    }
    if batches.k() != cliques.k() {
        return Err(Error::ShapeMismatch(format!(
            "batches over {} cliques, assignment has {}",
            batches.k(),
            cliques.k()
        )));
    }
    let priority = |k: usize| cliques.intra.get(k).copied().unwrap_or(0.0);
    let mut pools = Vec::with_capacity(batches.b());
    for (b, row) in batches.rows().into_iter().enumerate() {
        let mut owner: Vec<Option<usize>> = vec![None; cliques.n];
        for &k in &row {
            for &i in &cliques.cliques[k] {
                owner[i] = match owner[i] {
                    Some(prev) if priority(prev) >= priority(k) => Some(prev),
                    _ => Some(k),
                };
            }
        }
        let (samples, labels): (Vec<usize>, Vec<usize>) = owner
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.map(|k| (i, k)))
            .unzip();
        if samples.is_empty() {
            return Err(Error::EmptyBatch(b));
        }
        pools.push(BatchPool { samples, labels });
    }
    Ok(pools)
}

impl BatchPool {
    /// Positions into the pool, drawn uniformly with replacement.
    pub fn draw(&self, m: usize, rng: &mut Rng) -> Vec<usize> {
        (0..m).map(|_| rng.random_range(0..self.samples.len())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub batch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EmbeddingModel,
    pub losses: Vec<LossRecord>,
}

/// SGD over randomly drawn batch rows: each iteration picks a row uniformly,
/// draws `minibatch` samples from the union of its cliques, optionally
/// jitters them and takes one momentum step on the global softmax loss.
pub fn train(
    model: EmbeddingModel,
    features: &FeatureMatrix,
    cliques: &CliqueAssignment,
    batches: &BatchAssignment,
    params: &TrainParams,
    rng: &mut Rng,
) -> Result<TrainOutcome> {
    params.validate()?;
    if model.input_dim() != features.dim() || model.classes() != cliques.k() {
        return Err(Error::ShapeMismatch(format!(
            "model is {}→{} but data has {} features and {} cliques",
            model.input_dim(),
            model.classes(),
            features.dim(),
            cliques.k()
        )));
    }
    if cliques.n != features.n_samples() {
        return Err(Error::ShapeMismatch("cliques and features disagree on n".into()));
    }
    let pools = batch_pools(cliques, batches)?;
    let x = features.values();
    let d = features.dim();
    let noise: Vec<Option<Normal<f64>>> = (0..d)
        .map(|j| {
            let sd = x.column(j).variance().sqrt() * params.jitter;
            (sd > 0.0).then(|| Normal::new(0.0, sd).expect("finite std"))
        })
        .collect();

    let mut weights = model;
    let mut velocity = weights.zeros_like();
    let mut losses = Vec::with_capacity(params.iterations);
    let mut inputs = DMatrix::zeros(params.minibatch, d);
    let mut labels = vec![0; params.minibatch];
    for iter in 0..params.iterations {
        let b = rng.random_range(0..pools.len());
        let pool = &pools[b];
        for (row, pos) in pool.draw(params.minibatch, rng).into_iter().enumerate() {
            let i = pool.samples[pos];
            labels[row] = pool.labels[pos];
            for j in 0..d {
                let jitter = noise[j].as_ref().map_or(0.0, |n| n.sample(rng));
                inputs[(row, j)] = x[(i, j)] + jitter;
            }
        }
        let (loss, grads) = softmax_loss(&weights, &inputs, &labels, params.weight_decay)?;
        sgd_step(&mut weights, &mut velocity, &grads, params.learning_rate, params.momentum);
        losses.push(LossRecord { iter, batch: b, loss });
    }
    if !weights.is_finite() {
        return Err(Error::DegenerateProblem("training diverged to non-finite weights".into()));
    }
    Ok(TrainOutcome { model: weights, losses })
}

pub fn write_loss_log(losses: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("iter,batch_id,loss\n");
    for r in losses {
        out.push_str(&format!("{},{},{:e}\n", r.iter, r.batch, r.loss));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
