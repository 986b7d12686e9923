//! ℓ∞ adversarial attacks and accuracy evaluation under attack.
//!
//! Attacks work on batches but every example is handled independently: the
//! random start of example `i`, restart `r` comes from the stream
//! `(seed, i, r)` where `i` is the example's index in its dataset, so results
//! do not depend on how examples are grouped into batches or threads.

pub(crate) mod config;

use std::io::Write;

use rand::Rng;

pub use config::{AttackConfig, Family, LossKind};

use crate::analytics::class_ratios;
use crate::data::Dataset;
use crate::defense::losses;
use crate::nn::Network;
use crate::tensor::sign;
use crate::{parallel, rng, Error, Result, Tensor};

/// Examples per forward/backward batch in evaluation.
pub const EVAL_CHUNK: usize = 250;

/// Per-example losses, predictions and loss gradients at a batch of inputs.
struct Probe {
    loss: Vec<f64>,
    pred: Vec<usize>,
    grad: Option<Tensor>,
}

fn probe(net: &Network, x: &Tensor, y: &[usize], kind: LossKind, want_grad: bool) -> Result<Probe> {
    let trace = net.forward(x)?;
    let logits = trace.logits();
    let k = logits.row_len();
    let mut loss = Vec::with_capacity(y.len());
    let mut pred = Vec::with_capacity(y.len());
    let mut dz = Tensor::zeros(logits.shape());
    for (i, &yi) in y.iter().enumerate() {
        let z = logits.row(i);
        pred.push(losses::predict(z));
        match kind {
            LossKind::Xent => {
                let (l, g) = losses::xent_single(z, yi)?;
                loss.push(l);
                dz.row_mut(i).copy_from_slice(&g);
            }
            LossKind::Cw => {
                let (l, runner) = losses::cw_loss(z, yi)?;
                if !l.is_finite() {
                    return Err(Error::NonFinite("margin loss".into()));
                }
                loss.push(l);
                let row = dz.row_mut(i);
                row[runner] = 1.0;
                row[yi] = -1.0;
            }
        }
        debug_assert_eq!(z.len(), k);
    }
    if loss.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("attack loss".into()));
    }
    let grad = if want_grad {
        let g = net.backward(&trace, &dz, false)?.1;
        if !g.is_finite() {
            return Err(Error::NonFinite("input gradient".into()));
        }
        Some(g)
    } else {
        None
    };
    Ok(Probe { loss, pred, grad })
}

/// `clamp(v, x0 − ε, x0 + ε)`, then `clamp(·, 0, 1)` when `clip`.
#[inline]
fn project(v: f64, x0: f64, eps: f64, clip: bool) -> f64 {
    let v = v.clamp(x0 - eps, x0 + eps);
    if clip {
        v.clamp(0.0, 1.0)
    } else {
        v
    }
}

fn check_batch(net: &Network, x: &Tensor, y: &[usize]) -> Result<()> {
    if x.rows() != y.len() {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {}",
            y.len(),
            x.rows()
        )));
    }
    if let Some(&bad) = y.iter().find(|&&v| v >= net.n_classes()) {
        return Err(Error::InvalidConfig(format!(
            "label {bad} out of range for {} classes",
            net.n_classes()
        )));
    }
    Ok(())
}

/// Fast gradient sign method: `clip(x + ε·sign(∇ₓL(x, y)))`.
pub fn fgsm(net: &Network, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    if cfg.family != Family::Fgsm {
        return Err(Error::InvalidConfig(format!("expected fgsm, got {}", cfg.family)));
    }
    check_batch(net, x, y)?;
    fgsm_unchecked(net, x, y, cfg)
}

fn fgsm_unchecked(net: &Network, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    let g = probe(net, x, y, cfg.loss, true)?.grad.expect("gradient requested");
    let eps = cfg.epsilon;
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&v, &gv)| {
            let s = v + eps * sign(gv);
            if cfg.clip_to_valid {
                s.clamp(0.0, 1.0)
            } else {
                s
            }
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Projected gradient ascent with optional random start and restarts.
///
/// Candidates are the iterates after each step (the starting point itself is
/// never returned). Among all candidates of all restarts the one that flips
/// the prediction is preferred, then the one with the largest loss; ties keep
/// the earliest candidate.
pub fn pgd(net: &Network, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    let idx: Vec<u64> = (0..x.rows() as u64).collect();
    pgd_indexed(net, x, y, &idx, cfg)
}

/// [`pgd`] with explicit per-example stream indices.
pub fn pgd_indexed(
    net: &Network,
    x: &Tensor,
    y: &[usize],
    indices: &[u64],
    cfg: &AttackConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    if cfg.family != Family::Pgd {
        return Err(Error::InvalidConfig(format!("expected pgd, got {}", cfg.family)));
    }
    check_batch(net, x, y)?;
    if indices.len() != y.len() {
        return Err(Error::Shape("one stream index per example required".into()));
    }
    pgd_unchecked(net, x, y, indices, cfg)
}

fn pgd_unchecked(
    net: &Network,
    x0: &Tensor,
    y: &[usize],
    indices: &[u64],
    cfg: &AttackConfig,
) -> Result<Tensor> {
    let n = y.len();
    let eps = cfg.epsilon;
    let clip = cfg.clip_to_valid;
    let mut best = x0.clone();
    let mut best_key: Vec<Option<(bool, f64)>> = vec![None; n];

    let mut consider = |cur: &Tensor, p: &Probe, best: &mut Tensor| {
        for i in 0..n {
            let key = (p.pred[i] != y[i], p.loss[i]);
            let better = match best_key[i] {
                None => true,
                Some(b) => key.0 & !b.0 || (key.0 == b.0 && key.1 > b.1),
            };
            if better {
                best_key[i] = Some(key);
                best.row_mut(i).copy_from_slice(cur.row(i));
            }
        }
    };

    for restart in 0..cfg.restarts {
        let mut cur = x0.clone();
        if cfg.random_init {
            for (i, &ix) in indices.iter().enumerate() {
                let mut r = rng::stream(cfg.seed, &[ix, restart as u64]);
                let start = x0.row(i);
                for (v, &s) in cur.row_mut(i).iter_mut().zip(start) {
                    let u: f64 = if eps > 0.0 { r.random_range(-eps..eps) } else { 0.0 };
                    *v = project(s + u, s, eps, clip);
                }
            }
        }
        for step in 0..cfg.steps {
            let p = probe(net, &cur, y, cfg.loss, true)?;
            if step > 0 {
                consider(&cur, &p, &mut best);
            }
            let g = p.grad.expect("gradient requested");
            let base = x0.data();
            for ((v, &gv), &s) in cur.data_mut().iter_mut().zip(g.data()).zip(base) {
                *v = project(*v + cfg.step_size * sign(gv), s, eps, clip);
            }
        }
        let p = probe(net, &cur, y, cfg.loss, false)?;
        consider(&cur, &p, &mut best);
    }
    Ok(best)
}

/// `x − ε·sign(∇ₓz_y − ∇ₓz_ȳ)`, unclipped.
pub fn linearized_attack(net: &Network, x: &Tensor, y: usize, ybar: usize, eps: f64) -> Result<Tensor> {
    let k = net.n_classes();
    if y >= k || ybar >= k {
        return Err(Error::InvalidConfig(format!(
            "classes ({y}, {ybar}) out of range for {k} classes"
        )));
    }
    if y == ybar {
        return Err(Error::InvalidConfig("target class must differ from the true class".into()));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::InvalidConfig(format!("epsilon must be non-negative, got {eps}")));
    }
    if x.rows() != 1 {
        return Err(Error::Shape("linearized attack takes a single example".into()));
    }
    let (_, jac) = net.logit_jacobians(x)?;
    let dir: Vec<f64> = jac[y].data().iter().zip(jac[ybar].data()).map(|(a, b)| a - b).collect();
    Ok(step_against(x, &dir, eps))
}

fn step_against(x: &Tensor, dir: &[f64], eps: f64) -> Tensor {
    let data = x.data().iter().zip(dir).map(|(&v, &d)| v - eps * sign(d)).collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

/// Linearized attack on every example toward its minimum-ratio class.
fn linearized_batch(net: &Network, x: &Tensor, y: &[usize], eps: f64) -> Result<Tensor> {
    let (logits, jac) = net.logit_jacobians(x)?;
    let mut out = x.clone();
    for (i, &yi) in y.iter().enumerate() {
        let grads: Vec<&[f64]> = jac.iter().map(|j| j.row(i)).collect();
        let ratios = class_ratios(logits.row(i), yi, &grads);
        let target = (0..ratios.len())
            .filter(|&c| c != yi)
            .min_by(|&a, &b| ratios[a].total_cmp(&ratios[b]))
            .expect("at least two classes");
        let dir: Vec<f64> = grads[yi].iter().zip(grads[target]).map(|(a, b)| a - b).collect();
        let row = x.row(i);
        for ((v, &s), &d) in out.row_mut(i).iter_mut().zip(row).zip(&dir) {
            *v = s - eps * sign(d);
        }
    }
    Ok(out)
}

/// Crafts adversarial examples for a batch whose examples carry the given
/// dataset indices.
pub fn craft(
    net: &Network,
    x: &Tensor,
    y: &[usize],
    indices: &[u64],
    cfg: &AttackConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    check_batch(net, x, y)?;
    if cfg.epsilon == 0.0 && cfg.family != Family::Pgd {
        return Ok(x.clone());
    }
    match cfg.family {
        Family::Fgsm => fgsm_unchecked(net, x, y, cfg),
        Family::Pgd => pgd_unchecked(net, x, y, indices, cfg),
        Family::Linearized => linearized_batch(net, x, y, cfg.epsilon),
    }
}

/// Result of attacking one example.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub index: usize,
    pub true_label: usize,
    pub clean_pred: usize,
    pub adv_pred: usize,
    /// Loss of the evaluated model at the attacked input (cross-entropy when
    /// no attack is configured).
    pub achieved_loss: f64,
    pub linf_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub clean_accuracy: f64,
    pub outcomes: Vec<Outcome>,
}

impl EvalReport {
    fn from_outcomes(outcomes: Vec<Outcome>) -> Self {
        let n = outcomes.len().max(1) as f64;
        let correct = outcomes.iter().filter(|o| o.adv_pred == o.true_label).count();
        let clean = outcomes.iter().filter(|o| o.clean_pred == o.true_label).count();
        Self {
            accuracy: correct as f64 / n,
            clean_accuracy: clean as f64 / n,
            outcomes,
        }
    }

    /// CSV with columns `index,true_label,clean_pred,adv_pred,achieved_loss,linf_norm`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "index,true_label,clean_pred,adv_pred,achieved_loss,linf_norm")?;
        for o in &self.outcomes {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                o.index, o.true_label, o.clean_pred, o.adv_pred, o.achieved_loss, o.linf_norm
            )?;
        }
        Ok(())
    }
}

/// Accuracy of `net` on `data`, clean or under `attack`.
pub fn evaluate(net: &Network, data: &Dataset, attack: Option<&AttackConfig>) -> Result<EvalReport> {
    transfer_eval(net, net, data, attack)
}

/// Crafts adversarial examples against `source` and measures `target` on
/// them.
pub fn transfer_eval(
    source: &Network,
    target: &Network,
    data: &Dataset,
    attack: Option<&AttackConfig>,
) -> Result<EvalReport> {
    if source.input_shape() != target.input_shape() || source.n_classes() != target.n_classes() {
        return Err(Error::Shape(format!(
            "source {:?}→{} and target {:?}→{} differ",
            source.input_shape(),
            source.n_classes(),
            target.input_shape(),
            target.n_classes()
        )));
    }
    if data.item_shape() != target.input_shape() {
        return Err(Error::Shape(format!(
            "dataset items {:?} do not fit network input {:?}",
            data.item_shape(),
            target.input_shape()
        )));
    }
    if let Some(cfg) = attack {
        cfg.validate()?;
    }
    let ranges = parallel::chunk_ranges(data.len(), EVAL_CHUNK);
    let parts = parallel::map_ordered(&ranges, |&(s, e)| -> Result<Vec<Outcome>> {
        let idx: Vec<usize> = (s..e).collect();
        let (x, y) = data.batch(&idx);
        let clean = probe(target, &x, &y, LossKind::Xent, false)?;
        let (xa, kind) = match attack {
            None => return Ok(outcomes(&idx, &y, &clean.pred, &clean, &x, &x)),
            Some(cfg) => {
                let sidx: Vec<u64> = idx.iter().map(|&i| i as u64).collect();
                (craft(source, &x, &y, &sidx, cfg)?, cfg.loss)
            }
        };
        let adv = probe(target, &xa, &y, kind, false)?;
        Ok(outcomes(&idx, &y, &clean.pred, &adv, &x, &xa))
    });
    let mut all = Vec::with_capacity(data.len());
    for p in parts {
        all.extend(p?);
    }
    Ok(EvalReport::from_outcomes(all))
}

fn outcomes(idx: &[usize], y: &[usize], clean: &[usize], adv: &Probe, x: &Tensor, xa: &Tensor) -> Vec<Outcome> {
    idx.iter()
        .enumerate()
        .map(|(i, &index)| Outcome {
            index,
            true_label: y[i],
            clean_pred: clean[i],
            adv_pred: adv.pred[i],
            achieved_loss: adv.loss[i],
            linf_norm: x
                .row(i)
                .iter()
                .zip(xa.row(i))
                .fold(0.0, |m, (a, b)| m.max((a - b).abs())),
        })
        .collect()
}

/// Per-example loss of `net` at `x` under `kind`.
pub fn losses_at(net: &Network, x: &Tensor, y: &[usize], kind: LossKind) -> Result<Vec<f64>> {
    check_batch(net, x, y)?;
    Ok(probe(net, x, y, kind, false)?.loss)
}

/// Predicted classes for a batch.
pub fn predictions(net: &Network, x: &Tensor) -> Result<Vec<usize>> {
    let z = net.logits(x)?;
    Ok((0..z.rows()).map(|i| losses::predict(z.row(i))).collect())
}
