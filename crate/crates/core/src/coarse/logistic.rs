//! Multinomial logistic regression trained by full-batch gradient descent.

use serde::{Deserialize, Serialize};

use crate::error::{LocaterError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Iterations when starting from earlier weights.
    pub warm_iterations: usize,
    pub rate: f64,
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 150,
            warm_iterations: 10,
            rate: 0.5,
            l2: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: String,
    pub confidence: f64,
    pub probabilities: Vec<f64>,
}

/// Softmax classifier over lexicographically ordered labels. Features are
/// standardized with training statistics; constant columns are zeroed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticClassifier {
    labels: Vec<String>,
    dim: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `labels.len()` rows of `dim + 1` weights, bias last.
    weights: Vec<f64>,
}

/// Population variance of a probability vector.
pub fn prediction_confidence(p: &[f64]) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    let n = p.len() as f64;
    let mean = p.iter().sum::<f64>() / n;
    p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

fn softmax_into(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

/// Mean cross-entropy plus `l2 / 2 * |W|^2` (bias excluded) and its gradient.
/// `x` is row-major with `d1 = dim + 1` columns, the last being 1.
fn loss_grad_flat(w: &[f64], x: &[f64], d1: usize, y: &[usize], k: usize, l2: f64) -> (f64, Vec<f64>) {
    let n = y.len();
    let mut grad = vec![0.0; k * d1];
    let mut loss = 0.0;
    let mut p = vec![0.0; k];
    for (i, &yi) in y.iter().enumerate() {
        let row = &x[i * d1..(i + 1) * d1];
        for (c, pc) in p.iter_mut().enumerate() {
            let wc = &w[c * d1..(c + 1) * d1];
            *pc = row.iter().zip(wc).map(|(a, b)| a * b).sum();
        }
        softmax_into(&mut p);
        loss -= p[yi].max(1e-300).ln();
        for (c, &pc) in p.iter().enumerate() {
            let err = pc - if c == yi { 1.0 } else { 0.0 };
            if err != 0.0 {
                let g = &mut grad[c * d1..(c + 1) * d1];
                for (gj, xj) in g.iter_mut().zip(row) {
                    *gj += err * xj;
                }
            }
        }
    }
    let inv = 1.0 / n as f64;
    loss *= inv;
    for v in grad.iter_mut() {
        *v *= inv;
    }
    for c in 0..k {
        for j in 0..d1 - 1 {
            let wj = w[c * d1 + j];
            loss += 0.5 * l2 * wj * wj;
            grad[c * d1 + j] += l2 * wj;
        }
    }
    (loss, grad)
}

/// Loss and gradient for raw rows (bias appended internally).
pub fn loss_and_gradient(w: &[f64], rows: &[Vec<f64>], y: &[usize], k: usize, l2: f64) -> (f64, Vec<f64>) {
    let d1 = rows.first().map(|r| r.len() + 1).unwrap_or(1);
    let mut x = Vec::with_capacity(rows.len() * d1);
    for r in rows {
        x.extend_from_slice(r);
        x.push(1.0);
    }
    loss_grad_flat(w, &x, d1, y, k, l2)
}

impl LogisticClassifier {
    pub fn train(rows: &[&[f64]], y: &[&str], cfg: &TrainConfig) -> Result<Self> {
        Self::train_from(rows, y, cfg, None)
    }

    /// Like `train`, but starts from `init`'s weights when it has the same
    /// labels and dimension, running `warm_iterations` steps.
    pub fn train_from(rows: &[&[f64]], y: &[&str], cfg: &TrainConfig, init: Option<&LogisticClassifier>) -> Result<Self> {
        if rows.is_empty() {
            return Err(LocaterError::EmptyLabeled);
        }
        let dim = rows[0].len();
        let mut labels: Vec<String> = y.iter().map(|s| s.to_string()).collect();
        labels.sort();
        labels.dedup();
        let k = labels.len();

        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in rows {
            for j in 0..dim {
                let d = r[j] - mean[j];
                var[j] += d * d;
            }
        }
        let scale: Vec<f64> = var
            .iter()
            .map(|v| {
                let sd = (v / n).sqrt();
                if sd > 1e-12 {
                    1.0 / sd
                } else {
                    0.0
                }
            })
            .collect();

        let d1 = dim + 1;
        let warm = init.filter(|c| c.labels == labels && c.dim == dim);
        let iterations = if warm.is_some() { cfg.warm_iterations } else { cfg.iterations };
        let mut clf = LogisticClassifier {
            weights: warm.map_or_else(|| vec![0.0; k * d1], |c| c.weights.clone()),
            labels,
            dim,
            mean,
            scale,
        };
        if k < 2 {
            return Ok(clf);
        }

        let mut x = Vec::with_capacity(rows.len() * d1);
        for r in rows {
            clf.standardize_into(r, &mut x);
            x.push(1.0);
        }
        let yi: Vec<usize> = y
            .iter()
            .map(|s| clf.labels.binary_search_by(|l| l.as_str().cmp(s)).expect("label present"))
            .collect();
        for _ in 0..iterations {
            let (_, g) = loss_grad_flat(&clf.weights, &x, d1, &yi, k, cfg.l2);
            for (w, gj) in clf.weights.iter_mut().zip(&g) {
                *w -= cfg.rate * gj;
            }
        }
        Ok(clf)
    }

    fn standardize_into(&self, r: &[f64], out: &mut Vec<f64>) {
        out.extend(r.iter().zip(&self.mean).zip(&self.scale).map(|((x, m), s)| (x - m) * s));
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        let k = self.labels.len();
        if k == 1 {
            return vec![1.0];
        }
        let d1 = self.dim + 1;
        let mut z = Vec::with_capacity(d1);
        self.standardize_into(x, &mut z);
        z.push(1.0);
        let mut p: Vec<f64> = (0..k)
            .map(|c| {
                self.weights[c * d1..(c + 1) * d1]
                    .iter()
                    .zip(&z)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        softmax_into(&mut p);
        p
    }

    pub fn predict(&self, x: &[f64]) -> Prediction {
        let p = self.probabilities(x);
        let mut best = 0;
        for (i, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = i;
            }
        }
        Prediction {
            label: self.labels[best].clone(),
            confidence: prediction_confidence(&p),
            probabilities: p,
        }
    }
}
