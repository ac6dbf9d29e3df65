//! Linear softmax classifier over fixed embeddings: numerically stable
//! losses on hard and soft targets, analytic gradients, and plain SGD (no
//! momentum — steps are `w <- w - lr * (grad + wd * w)`). All reductions
//! run sequentially in index order, so repeated runs are bitwise identical.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RoltError};

/// `K x D` weight matrix plus per-class bias; scores are `W x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearModel {
    /// Uniform `[-1/sqrt(D), 1/sqrt(D)]` weight init (row-major fill
    /// order), zero bias. Deterministic in `seed`.
    pub fn init(class_count: usize, dim: usize, seed: u64) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Array2::zeros((class_count, dim));
        for k in 0..class_count {
            for d in 0..dim {
                weights[(k, d)] = rng.random_range(-bound..bound);
            }
        }
        Self {
            weights,
            bias: Array1::zeros(class_count),
        }
    }

    pub fn class_count(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    /// `X W^T + b` for a batch of row embeddings.
    pub fn logits(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.dim() {
            return Err(RoltError::DimensionMismatch(format!(
                "model expects dim {}, got {}",
                self.dim(),
                x.ncols()
            )));
        }
        Ok(x.dot(&self.weights.t()) + &self.bias)
    }

    /// Row-wise argmax class; ties resolve to the smaller index.
    pub fn predict(&self, x: &ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }
}

/// First-wins argmax per row.
pub fn argmax_rows(scores: &Array2<f64>) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_val = f64::NEG_INFINITY;
            for (k, &v) in row.iter().enumerate() {
                if v > best_val {
                    best_val = v;
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Row-wise `z - logsumexp(z)` with max subtraction, so arbitrarily large
/// logits stay finite.
pub fn log_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        row.mapv_inplace(|z| z - lse);
    }
    out
}

/// Row-stochastic softmax, computed through [`log_softmax`].
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = log_softmax(logits);
    out.mapv_inplace(f64::exp);
    out
}

fn check_simplex(target: &ArrayView1<f64>) -> Result<()> {
    let sum: f64 = target.sum();
    if (sum - 1.0).abs() > 1e-9 || target.iter().any(|&t| t < 0.0) {
        return Err(RoltError::InvalidTarget(format!(
            "target is not on the probability simplex (sum {sum})"
        )));
    }
    Ok(())
}

/// Cross-entropy `H(target, softmax(logits))` for one example. Rejects
/// targets off the probability simplex (tolerance 1e-9).
pub fn softmax_cross_entropy(logits: &ArrayView1<f64>, target: &ArrayView1<f64>) -> Result<f64> {
    if logits.len() != target.len() {
        return Err(RoltError::DimensionMismatch(format!(
            "{} logits vs {} target entries",
            logits.len(),
            target.len()
        )));
    }
    check_simplex(target)?;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    Ok(target
        .iter()
        .zip(logits.iter())
        .map(|(&t, &z)| t * (lse - z))
        .sum())
}

/// Mean negative log-likelihood of hard labels.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if logits.nrows() != labels.len() {
        return Err(RoltError::DimensionMismatch(format!(
            "{} logit rows vs {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    if labels.iter().any(|&y| y >= logits.ncols()) {
        return Err(RoltError::InvalidTarget(
            "label index out of class range".into(),
        ));
    }
    let ls = log_softmax(logits);
    let total: f64 = labels.iter().enumerate().map(|(i, &y)| -ls[(i, y)]).sum();
    Ok(total / labels.len().max(1) as f64)
}

/// Mean soft cross-entropy against simplex target rows.
pub fn soft_cross_entropy(logits: &Array2<f64>, targets: &Array2<f64>) -> Result<f64> {
    check_target_shape(logits, targets)?;
    let ls = log_softmax(logits);
    let mut total = 0.0;
    for (t, l) in targets.rows().into_iter().zip(ls.rows()) {
        check_simplex(&t)?;
        total -= t.dot(&l);
    }
    Ok(total / logits.nrows().max(1) as f64)
}

fn check_target_shape(logits: &Array2<f64>, targets: &Array2<f64>) -> Result<()> {
    if logits.dim() != targets.dim() {
        return Err(RoltError::DimensionMismatch(format!(
            "logits {:?} vs targets {:?}",
            logits.dim(),
            targets.dim()
        )));
    }
    Ok(())
}

/// Parameter gradients mirroring [`LinearModel`]'s shapes.
#[derive(Debug, Clone)]
pub struct GradientEstimate {
    pub dw: Array2<f64>,
    pub db: Array1<f64>,
    pub batch_size: usize,
}

/// Loss and exact gradient of the per-example-weighted mean cross-entropy
///
/// `L = (1/N) sum_i w_i * H(t_i, softmax(z_i))`,
///
/// using `dL/dz_i = (w_i / N) (softmax(z_i) - t_i)`. Weight decay is *not*
/// folded in here; it belongs to [`sgd_step`].
pub fn loss_gradient(
    model: &LinearModel,
    x: &ArrayView2<f64>,
    targets: &Array2<f64>,
    weights: Option<&[f64]>,
) -> Result<(f64, GradientEstimate)> {
    let n = x.nrows();
    if n == 0 {
        return Err(RoltError::DimensionMismatch(
            "empty batch has no gradient".into(),
        ));
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(RoltError::DimensionMismatch(format!(
                "{} example weights vs {} rows",
                w.len(),
                n
            )));
        }
    }
    let logits = model.logits(x)?;
    check_target_shape(&logits, targets)?;
    let ls = log_softmax(&logits);
    let mut delta = ls.mapv(f64::exp) - targets;
    let mut loss = 0.0;
    for i in 0..n {
        check_simplex(&targets.row(i))?;
        let w = weights.map_or(1.0, |w| w[i]);
        loss += w * -targets.row(i).dot(&ls.row(i));
        let scale = w / n as f64;
        delta.row_mut(i).mapv_inplace(|v| v * scale);
    }
    loss /= n as f64;
    Ok((
        loss,
        GradientEstimate {
            dw: delta.t().dot(x),
            db: delta.sum_axis(Axis(0)),
            batch_size: n,
        },
    ))
}

/// One plain SGD step with coupled L2 decay:
/// `theta <- theta - lr * (grad + weight_decay * theta)`.
/// Returns a new model; the input snapshot is untouched.
pub fn sgd_step(
    model: &LinearModel,
    grad: &GradientEstimate,
    lr: f64,
    weight_decay: f64,
) -> LinearModel {
    let mut next = model.clone();
    for (t, &g) in next.weights.iter_mut().zip(grad.dw.iter()) {
        *t -= lr * (g + weight_decay * *t);
    }
    for (t, &g) in next.bias.iter_mut().zip(grad.db.iter()) {
        *t -= lr * (g + weight_decay * *t);
    }
    next
}

/// One-hot probability rows for hard labels.
pub fn one_hot(labels: &[usize], class_count: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((labels.len(), class_count));
    for (i, &y) in labels.iter().enumerate() {
        if y >= class_count {
            return Err(RoltError::InvalidTarget(format!(
                "label {y} out of range for {class_count} classes"
            )));
        }
        out[(i, y)] = 1.0;
    }
    Ok(out)
}
