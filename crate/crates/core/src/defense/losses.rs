//! Loss functions on logits. Every function returns the loss together with
//! its gradient with respect to the logits.

use crate::tensor::argmax;
use crate::{Error, Result, Tensor};

/// Loss value and `∂loss/∂logits`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Tensor,
}

/// Smooths a one-hot vector: `y_hot − α·(y_hot − 1/N_c)`.
///
/// The true class ends up at `1 − α(1 − 1/N_c)` and every other class at
/// `α/N_c`.
pub fn smooth_labels(y_hot: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    let n = y_hot.len();
    let ones = y_hot.iter().filter(|&&v| v == 1.0).count();
    let zeros = y_hot.iter().filter(|&&v| v == 0.0).count();
    if n == 0 || ones != 1 || ones + zeros != n {
        return Err(Error::InvalidConfig(
            "label vector is not one-hot".to_string(),
        ));
    }
    let uniform = alpha / n as f64;
    Ok(y_hot.iter().map(|&h| (1.0 - alpha) * h + uniform).collect())
}

/// Smoothed target rows for a batch of class indices.
pub fn smoothed_targets(labels: &[usize], alpha: f64, n_classes: usize) -> Result<Tensor> {
    check_alpha(alpha)?;
    let mut t = Tensor::zeros(&[labels.len(), n_classes]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= n_classes {
            return Err(Error::InvalidConfig(format!(
                "label {y} out of range for {n_classes} classes"
            )));
        }
        let mut hot = vec![0.0; n_classes];
        hot[y] = 1.0;
        t.row_mut(i).copy_from_slice(&smooth_labels(&hot, alpha)?);
    }
    Ok(t)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "smoothing parameter must lie in [0, 1], got {alpha}"
        )))
    }
}

/// Numerically stable `log softmax`.
pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|&v| v - lse).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    log_softmax(z).into_iter().map(f64::exp).collect()
}

/// Mean over the batch of `−Σ_c t_c · log softmax(z)_c`; the gradient is
/// `(softmax(z) − t) / batch`.
pub fn cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<LossGrad> {
    if logits.shape() != targets.shape() || logits.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "logits {:?} and targets {:?} must be equal 2-d shapes",
            logits.shape(),
            targets.shape()
        )));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    let n = logits.rows();
    for i in 0..n {
        let s: f64 = targets.row(i).iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "target row {i} sums to {s}, expected 1"
            )));
        }
    }
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    let scale = if n > 0 { 1.0 / n as f64 } else { 0.0 };
    for i in 0..n {
        let ls = log_softmax(logits.row(i));
        let t = targets.row(i);
        total -= t.iter().zip(&ls).map(|(a, b)| a * b).sum::<f64>();
        for ((g, &l), &tc) in grad.row_mut(i).iter_mut().zip(&ls).zip(t) {
            *g = (l.exp() - tc) * scale;
        }
    }
    Ok(LossGrad {
        loss: total * scale,
        grad,
    })
}

/// Cross-entropy of one example against a hard label, with the unscaled
/// gradient `softmax(z) − onehot(y)`.
pub fn xent_single(z: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
    if y >= z.len() {
        return Err(Error::InvalidConfig(format!(
            "label {y} out of range for {} classes",
            z.len()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let ls = log_softmax(z);
    let mut g: Vec<f64> = ls.iter().map(|l| l.exp()).collect();
    g[y] -= 1.0;
    Ok((-ls[y], g))
}

/// `β·‖z‖_F` over the whole mini-batch (or `β·‖z‖_F²` when `squared`).
///
/// For the unsquared penalty the gradient is `β·z/‖z‖_F`, taken as zero when
/// `‖z‖_F == 0`.
pub fn logit_squeeze_penalty(logits: &Tensor, beta: f64, squared: bool) -> Result<LossGrad> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "squeezing parameter must be non-negative, got {beta}"
        )));
    }
    let sq: f64 = logits.data().iter().map(|v| v * v).sum();
    if squared {
        return Ok(LossGrad {
            loss: beta * sq,
            grad: logits.scale(2.0 * beta),
        });
    }
    let norm = sq.sqrt();
    let grad = if norm > 0.0 {
        logits.scale(beta / norm)
    } else {
        Tensor::zeros(logits.shape())
    };
    Ok(LossGrad {
        loss: beta * norm,
        grad,
    })
}

/// Margin loss `max_{k≠y} z_k − z_y`. Returns the loss and the maximizing
/// wrong class (lowest index on ties). The gradient is `+1` at that class,
/// `−1` at `y` and zero elsewhere.
pub fn cw_loss(z: &[f64], y: usize) -> Result<(f64, usize)> {
    if z.len() < 2 {
        return Err(Error::InvalidConfig(
            "margin loss needs at least two classes".into(),
        ));
    }
    if y >= z.len() {
        return Err(Error::InvalidConfig(format!(
            "label {y} out of range for {} classes",
            z.len()
        )));
    }
    let runner = runner_up(z, y);
    Ok((z[runner] - z[y], runner))
}

/// Highest-scoring class other than `y`, lowest index on ties.
pub fn runner_up(z: &[f64], y: usize) -> usize {
    let mut best = if y == 0 { 1 } else { 0 };
    for (k, &v) in z.iter().enumerate() {
        if k != y && v > z[best] {
            best = k;
        }
    }
    best
}

/// Predicted class under the lowest-index tie rule.
pub fn predict(z: &[f64]) -> usize {
    argmax(z)
}
