//! One-hidden-layer ReLU network with a softmax output, trained by
//! mini-batch SGD on cross-entropy.
//!
//! Parameters are stored as a [`ModelWeights`] with four layers in the order
//! `W1 [input, hidden]`, `b1 [hidden]`, `W2 [hidden, classes]`, `b2 [classes]`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use crate::adversary::random_weights;
use crate::error::{Error, Result};
use crate::tensors::{ClientUpdate, ModelWeights, TensorShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpDims {
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl MlpDims {
    pub fn shapes(&self) -> Vec<TensorShape> {
        vec![
            TensorShape::matrix(self.input, self.hidden).expect("positive dims"),
            TensorShape::vector(self.hidden).expect("positive dims"),
            TensorShape::matrix(self.hidden, self.classes).expect("positive dims"),
            TensorShape::vector(self.classes).expect("positive dims"),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub dims: MlpDims,
    pub weights: ModelWeights,
}

const W1: usize = 0;
const B1: usize = 1;
const W2: usize = 2;
const B2: usize = 3;

/// Intermediate values of one forward pass.
struct Trace {
    pre: Vec<f64>,
    hidden: Vec<f64>,
    probs: Vec<f64>,
}

impl MlpModel {
    pub fn from_weights(dims: MlpDims, weights: ModelWeights) -> Result<Self> {
        if weights.shapes() != dims.shapes() {
            return Err(Error::InvalidShape(format!(
                "weights do not match an MLP {}-{}-{}",
                dims.input, dims.hidden, dims.classes
            )));
        }
        Ok(Self { dims, weights })
    }

    pub fn zeros(dims: MlpDims) -> Self {
        Self {
            weights: ModelWeights::zeros(&dims.shapes()),
            dims,
        }
    }

    /// Glorot-normal initialization of every layer, biases included.
    pub fn glorot<R: Rng + ?Sized>(dims: MlpDims, rng: &mut R) -> Self {
        let zeros = ModelWeights::zeros(&dims.shapes());
        Self {
            weights: random_weights(&zeros, rng),
            dims,
        }
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let MlpDims {
            input,
            hidden,
            classes,
        } = self.dims;
        let w1 = self.weights.layer(W1).data();
        let b1 = self.weights.layer(B1).data();
        let w2 = self.weights.layer(W2).data();
        let b2 = self.weights.layer(B2).data();
        let mut pre = b1.to_vec();
        for i in 0..input {
            let xi = x[i];
            let row = &w1[i * hidden..(i + 1) * hidden];
            for (p, &w) in pre.iter_mut().zip(row) {
                *p += xi * w;
            }
        }
        let act: Vec<f64> = pre.iter().map(|&z| z.max(0.0)).collect();
        let mut logits = b2.to_vec();
        for j in 0..hidden {
            let a = act[j];
            if a == 0.0 {
                continue;
            }
            let row = &w2[j * classes..(j + 1) * classes];
            for (l, &w) in logits.iter_mut().zip(row) {
                *l += a * w;
            }
        }
        Trace {
            pre,
            hidden: act,
            probs: softmax(&logits),
        }
    }

    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        self.trace(x).probs
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.predict_proba(x))
    }

    /// Mean cross-entropy and accuracy over `data`.
    pub fn evaluate(&self, data: &Dataset) -> (f64, f64) {
        if data.is_empty() {
            return (0.0, 0.0);
        }
        let mut loss = 0.0;
        let mut correct = 0usize;
        for i in 0..data.len() {
            let p = self.predict_proba(data.row(i));
            let y = data.labels[i];
            loss -= p[y].max(f64::MIN_POSITIVE).ln();
            if argmax(&p) == y {
                correct += 1;
            }
        }
        let n = data.len() as f64;
        (loss / n, correct as f64 / n)
    }

    pub fn loss(&self, data: &Dataset, rows: &[usize]) -> f64 {
        rows.iter()
            .map(|&r| {
                -self.predict_proba(data.row(r))[data.labels[r]]
                    .max(f64::MIN_POSITIVE)
                    .ln()
            })
            .sum::<f64>()
            / rows.len() as f64
    }

    /// Mean cross-entropy over `rows` and its gradient, laid out like the weights.
    pub fn loss_and_gradient(&self, data: &Dataset, rows: &[usize]) -> (f64, Vec<f64>) {
        let MlpDims {
            input,
            hidden,
            classes,
        } = self.dims;
        let w2 = self.weights.layer(W2).data();
        let off_b1 = input * hidden;
        let off_w2 = off_b1 + hidden;
        let off_b2 = off_w2 + hidden * classes;
        let mut grad = vec![0.0; off_b2 + classes];
        let scale = 1.0 / rows.len() as f64;
        let mut loss = 0.0;
        let mut d_hidden = vec![0.0; hidden];
        for &r in rows {
            let x = data.row(r);
            let y = data.labels[r];
            let t = self.trace(x);
            loss -= t.probs[y].max(f64::MIN_POSITIVE).ln();
            let mut d_logits = t.probs;
            d_logits[y] -= 1.0;
            for d in d_logits.iter_mut() {
                *d *= scale;
            }
            for (g, d) in grad[off_b2..].iter_mut().zip(&d_logits) {
                *g += d;
            }
            for j in 0..hidden {
                let row = &w2[j * classes..(j + 1) * classes];
                let a = t.hidden[j];
                let gw2 = &mut grad[off_w2 + j * classes..off_w2 + (j + 1) * classes];
                let mut back = 0.0;
                for c in 0..classes {
                    gw2[c] += a * d_logits[c];
                    back += row[c] * d_logits[c];
                }
                d_hidden[j] = if t.pre[j] > 0.0 { back } else { 0.0 };
            }
            for (g, d) in grad[off_b1..off_w2].iter_mut().zip(&d_hidden) {
                *g += d;
            }
            for i in 0..input {
                let xi = x[i];
                let gw1 = &mut grad[i * hidden..(i + 1) * hidden];
                for (g, d) in gw1.iter_mut().zip(&d_hidden) {
                    *g += xi * d;
                }
            }
        }
        (loss * scale, grad)
    }

    /// `weights -= lr * grad` over the flat parameter vector.
    pub fn apply_gradient(&mut self, grad: &[f64], lr: f64) {
        let mut offset = 0;
        for l in 0..self.weights.num_layers() {
            let data = self.weights.layer_data_mut(l);
            for (w, g) in data.iter_mut().zip(&grad[offset..]) {
                *w -= lr * g;
            }
            offset += data.len();
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `epochs` passes of shuffled mini-batch SGD over `data`, starting from
/// `model`. The returned update carries the training-set size.
pub fn local_update<R: Rng + ?Sized>(
    model: &MlpModel,
    data: &Dataset,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    client_id: usize,
    rng: &mut R,
) -> Result<ClientUpdate> {
    let mut m = model.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        for batch in order.chunks(batch_size.max(1)) {
            let (_, grad) = m.loss_and_gradient(data, batch);
            m.apply_gradient(&grad, learning_rate);
        }
    }
    ClientUpdate::new(client_id, m.weights, data.len().max(1))
}

/// Largest relative discrepancy between backprop and central finite
/// differences (step 1e-5) over every parameter, on the rows of `batch`.
///
/// Each entry uses `|a - n| / max(|a|, |n|)`; pairs where both magnitudes
/// are below 1e-8 are compared absolutely instead.
pub fn grad_check(model: &MlpModel, batch: &Dataset) -> f64 {
    const H: f64 = 1e-5;
    let rows: Vec<usize> = (0..batch.len()).collect();
    let (_, analytic) = model.loss_and_gradient(batch, &rows);
    let flat = model.weights.to_flat();
    let mut numeric = vec![0.0; flat.len()];
    let mut probe = flat.clone();
    for p in 0..flat.len() {
        probe[p] = flat[p] + H;
        let up = MlpModel {
            dims: model.dims,
            weights: model.weights.with_flat_unchecked(&probe),
        }
        .loss(batch, &rows);
        probe[p] = flat[p] - H;
        let down = MlpModel {
            dims: model.dims,
            weights: model.weights.with_flat_unchecked(&probe),
        }
        .loss(batch, &rows);
        probe[p] = flat[p];
        numeric[p] = (up - down) / (2.0 * H);
    }
    max_relative_error(&analytic, &numeric)
}

pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let scale = x.abs().max(y.abs());
            if scale < 1e-8 {
                (x - y).abs()
            } else {
                (x - y).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}
