//! Linearized robustness analysis.
//!
//! For an example with label `y` and any other class `ȳ`, a one-step ℓ∞
//! perturbation of size ε can only swap the two logits once
//! `ε ≥ (z_y − z_ȳ) / ‖∇ₓz_y − ∇ₓz_ȳ‖₁`. The per-example robustness radius
//! `eps_l` is the smallest of these ratios over all wrong classes; it is
//! exact for models that are linear in their input.

mod activation;
mod histogram;

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

pub use activation::{activation_profile, ActivationLayer, ActivationProfile};
pub use histogram::{Histogram, DEFAULT_BINS};

use crate::attack::EVAL_CHUNK;
use crate::data::Dataset;
use crate::defense::losses;
use crate::nn::Network;
use crate::{parallel, Error, Result, Tensor};

/// Denominators below this are treated as zero.
pub const DENOM_FLOOR: f64 = 1e-12;

/// `numerator / denominator` with the zero-denominator limits: `+∞` for a
/// positive gap, `−∞` for a negative one and `0` for a zero gap.
pub fn safe_ratio(numerator: f64, denominator: f64) -> f64 {
    if denominator < DENOM_FLOOR {
        if numerator > 0.0 {
            f64::INFINITY
        } else if numerator < 0.0 {
            f64::NEG_INFINITY
        } else {
            0.0
        }
    } else {
        numerator / denominator
    }
}

fn l1_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Per-class ratios `(z_y − z_c) / ‖g_y − g_c‖₁`; the entry for `y` itself
/// is `+∞`. `grads[c]` is `∇ₓz_c` for the example.
pub fn class_ratios(z: &[f64], y: usize, grads: &[&[f64]]) -> Vec<f64> {
    (0..z.len())
        .map(|c| {
            if c == y {
                f64::INFINITY
            } else {
                safe_ratio(z[y] - z[c], l1_diff(grads[y], grads[c]))
            }
        })
        .collect()
}

/// Cosine of the angle between two vectors; zero when either is shorter
/// than [`DENOM_FLOOR`].
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < DENOM_FLOOR || nb < DENOM_FLOOR {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Linearized robustness quantities for one example. `logit_gap`,
/// `grad_gap_l1` and `cosine` refer to the runner-up class (largest wrong
/// logit, lowest index on ties).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub index: usize,
    pub label: usize,
    pub predicted: usize,
    pub eps_l: f64,
    /// Class attaining `eps_l`.
    pub argmin_class: usize,
    pub runner_up_class: usize,
    pub logit_gap: f64,
    pub grad_gap_l1: f64,
    pub cosine: f64,
    /// `z_y − z_c` for every wrong class `c`.
    #[serde(skip)]
    pub all_gaps: Vec<f64>,
    /// `|z_c|` for every class.
    #[serde(skip)]
    pub abs_logits: Vec<f64>,
    /// `‖∇ₓz_c‖₁` for every class.
    #[serde(skip)]
    pub grad_l1: Vec<f64>,
}

fn check_example(net: &Network, x: &Tensor, y: usize) -> Result<()> {
    if x.rows() != 1 {
        return Err(Error::Shape("expected a single example".into()));
    }
    if y >= net.n_classes() {
        return Err(Error::InvalidConfig(format!(
            "label {y} out of range for {} classes",
            net.n_classes()
        )));
    }
    Ok(())
}

/// `eps_l` for one example together with the per-class ratios.
pub fn epsilon_l(net: &Network, x: &Tensor, y: usize) -> Result<(f64, Vec<f64>)> {
    check_example(net, x, y)?;
    let (z, jac) = net.logit_jacobians(x)?;
    let grads: Vec<&[f64]> = jac.iter().map(|j| j.row(0)).collect();
    let ratios = class_ratios(z.row(0), y, &grads);
    let eps = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((eps, ratios))
}

/// `cos∠(∇ₓz_y, ∇ₓz_ȳ)`.
pub fn gradient_coherence(net: &Network, x: &Tensor, y: usize, ybar: usize) -> Result<f64> {
    check_example(net, x, y)?;
    if ybar >= net.n_classes() || ybar == y {
        return Err(Error::InvalidConfig(format!(
            "comparison class {ybar} must be a different valid class"
        )));
    }
    let y_grad = net.input_gradient(x, crate::nn::Selector::Logit(y))?;
    let ybar_grad = net.input_gradient(x, crate::nn::Selector::Logit(ybar))?;
    Ok(cosine(y_grad.data(), ybar_grad.data()))
}

/// Records for every example of `data`.
pub fn robustness_records(net: &Network, data: &Dataset) -> Result<Vec<ExampleRecord>> {
    if data.item_shape() != net.input_shape() {
        return Err(Error::Shape(format!(
            "dataset items {:?} do not fit network input {:?}",
            data.item_shape(),
            net.input_shape()
        )));
    }
    let ranges = parallel::chunk_ranges(data.len(), EVAL_CHUNK);
    let parts = parallel::map_ordered(&ranges, |&(s, e)| -> Result<Vec<ExampleRecord>> {
        let idx: Vec<usize> = (s..e).collect();
        let (x, y) = data.batch(&idx);
        let (z, jac) = net.logit_jacobians(&x)?;
        Ok(idx
            .iter()
            .enumerate()
            .map(|(i, &index)| {
                let zi = z.row(i);
                let grads: Vec<&[f64]> = jac.iter().map(|j| j.row(i)).collect();
                record(index, zi, y[i], &grads)
            })
            .collect())
    });
    let mut out = Vec::with_capacity(data.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn record(index: usize, z: &[f64], y: usize, grads: &[&[f64]]) -> ExampleRecord {
    let ratios = class_ratios(z, y, grads);
    let (argmin_class, eps_l) = ratios
        .iter()
        .copied()
        .enumerate()
        .filter(|&(c, _)| c != y)
        .fold((usize::MAX, f64::INFINITY), |best, (c, r)| {
            if best.0 == usize::MAX || r < best.1 {
                (c, r)
            } else {
                best
            }
        });
    let runner = losses::runner_up(z, y);
    ExampleRecord {
        index,
        label: y,
        predicted: losses::predict(z),
        eps_l,
        argmin_class,
        runner_up_class: runner,
        logit_gap: z[y] - z[runner],
        grad_gap_l1: l1_diff(grads[y], grads[runner]),
        cosine: cosine(grads[y], grads[runner]),
        all_gaps: (0..z.len()).filter(|&c| c != y).map(|c| z[y] - z[c]).collect(),
        abs_logits: z.iter().map(|v| v.abs()).collect(),
        grad_l1: grads.iter().map(|g| g.iter().map(|v| v.abs()).sum()).collect(),
    }
}

/// Fraction of records with `eps_l > epsilon`.
pub fn predicted_accuracy_of(records: &[ExampleRecord], epsilon: f64) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| r.eps_l > epsilon).count() as f64 / records.len() as f64
}

/// Fraction of `data` whose linearized radius exceeds `epsilon`.
pub fn predicted_accuracy(net: &Network, data: &Dataset, epsilon: f64) -> Result<f64> {
    if epsilon.is_nan() || epsilon < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "epsilon must be non-negative, got {epsilon}"
        )));
    }
    Ok(predicted_accuracy_of(&robustness_records(net, data)?, epsilon))
}

fn mean_finite(values: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = values
        .into_iter()
        .filter(|v| v.is_finite())
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Means of the distributions in a [`DistributionSuite`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub examples: usize,
    pub epsilon: f64,
    pub clean_accuracy: f64,
    pub predicted_accuracy: f64,
    pub mean_abs_logit: f64,
    pub mean_logit_gap: f64,
    pub mean_grad_gap_l1: f64,
    pub mean_cosine: f64,
    pub mean_eps_l: f64,
    pub mean_grad_l1: f64,
}

/// Histograms of every linearized-robustness quantity over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionSuite {
    pub summary: SuiteSummary,
    /// Named histograms in a fixed order.
    pub histograms: Vec<(String, Histogram)>,
}

impl DistributionSuite {
    pub fn get(&self, name: &str) -> Option<&Histogram> {
        self.histograms.iter().find(|(n, _)| n == name).map(|(_, h)| h)
    }
}

/// Histogram names produced by [`distribution_suite`].
pub const HISTOGRAMS: [&str; 7] = [
    "logit_gap",
    "logit_gap_all_pairs",
    "grad_gap_l1",
    "eps_l",
    "cosine",
    "abs_logit",
    "grad_l1",
];

pub fn distribution_suite(net: &Network, data: &Dataset, eps_for_hist: f64) -> Result<DistributionSuite> {
    Ok(suite_from_records(&robustness_records(net, data)?, eps_for_hist))
}

pub fn suite_from_records(records: &[ExampleRecord], epsilon: f64) -> DistributionSuite {
    let col = |f: fn(&ExampleRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
    let flat = |f: fn(&ExampleRecord) -> &Vec<f64>| {
        records.iter().flat_map(|r| f(r).iter().copied()).collect::<Vec<_>>()
    };
    let logit_gap = col(|r| r.logit_gap);
    let all_gaps = flat(|r| &r.all_gaps);
    let grad_gap = col(|r| r.grad_gap_l1);
    let eps = col(|r| r.eps_l);
    let cos = col(|r| r.cosine);
    let abs_logit = flat(|r| &r.abs_logits);
    let grad_l1 = flat(|r| &r.grad_l1);
    let n = records.len().max(1) as f64;
    let summary = SuiteSummary {
        examples: records.len(),
        epsilon,
        clean_accuracy: records.iter().filter(|r| r.predicted == r.label).count() as f64 / n,
        predicted_accuracy: predicted_accuracy_of(records, epsilon),
        mean_abs_logit: mean_finite(abs_logit.iter().copied()),
        mean_logit_gap: mean_finite(logit_gap.iter().copied()),
        mean_grad_gap_l1: mean_finite(grad_gap.iter().copied()),
        mean_cosine: mean_finite(cos.iter().copied()),
        mean_eps_l: mean_finite(eps.iter().copied()),
        mean_grad_l1: mean_finite(grad_l1.iter().copied()),
    };
    let samples = [logit_gap, all_gaps, grad_gap, eps, cos, abs_logit, grad_l1];
    let histograms = HISTOGRAMS
        .iter()
        .zip(samples.iter())
        .map(|(name, s)| (name.to_string(), Histogram::from_samples(s, DEFAULT_BINS)))
        .collect();
    DistributionSuite {
        summary,
        histograms,
    }
}

/// Everything the analysis reports about one model.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessReport {
    pub model: String,
    pub records: Vec<ExampleRecord>,
    pub suite: DistributionSuite,
    /// Empirical accuracies keyed by attack description.
    pub empirical: BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    model: &'a str,
    summary: &'a SuiteSummary,
    empirical_accuracy: &'a BTreeMap<String, f64>,
    histograms: BTreeMap<&'a str, &'a Histogram>,
}

impl RobustnessReport {
    pub fn new(model: impl Into<String>, records: Vec<ExampleRecord>, epsilon: f64) -> Self {
        let suite = suite_from_records(&records, epsilon);
        Self {
            model: model.into(),
            records,
            suite,
            empirical: BTreeMap::new(),
        }
    }

    /// JSON summary with histogram tables embedded.
    pub fn to_json(&self) -> Result<String> {
        let j = ReportJson {
            model: &self.model,
            summary: &self.suite.summary,
            empirical_accuracy: &self.empirical,
            histograms: self
                .suite
                .histograms
                .iter()
                .map(|(n, h)| (n.as_str(), h))
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&j)?)
    }

    /// Per-example CSV.
    pub fn write_records_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "index,label,predicted,eps_l,argmin_class,runner_up_class,logit_gap,grad_gap_l1,cosine"
        )?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                r.index,
                r.label,
                r.predicted,
                r.eps_l,
                r.argmin_class,
                r.runner_up_class,
                r.logit_gap,
                r.grad_gap_l1,
                r.cosine
            )?;
        }
        Ok(())
    }
}
