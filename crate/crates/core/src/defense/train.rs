use std::io::Write;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::losses;
use crate::attack::{self, AttackConfig};
use crate::data::{self, BatchStream, Dataset};
use crate::nn::{Gradients, Network, Sgd};
use crate::{rng, Error, Result, Tensor};

/// Loss terms applied to each batch of logits.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub alpha: f64,
    pub beta: f64,
    pub squeeze_squared: bool,
}

impl LossTerms {
    pub const PLAIN: LossTerms = LossTerms {
        alpha: 0.0,
        beta: 0.0,
        squeeze_squared: false,
    };

    /// Mean cross-entropy against (smoothed) targets plus the squeezing
    /// penalty divided by the batch size, i.e. `(Σ_i L_i + β‖z‖_F) / n`.
    pub fn eval(&self, logits: &Tensor, labels: &[usize]) -> Result<losses::LossGrad> {
        let targets = losses::smoothed_targets(labels, self.alpha, logits.row_len())?;
        let mut out = losses::cross_entropy(logits, &targets)?;
        if self.beta > 0.0 {
            let per_example = self.beta / logits.rows().max(1) as f64;
            let sq = losses::logit_squeeze_penalty(logits, per_example, self.squeeze_squared)?;
            out.loss += sq.loss;
            out.grad = out.grad.add(&sq.grad)?;
        }
        Ok(out)
    }
}

/// Objective value, parameter gradients and statistics of the clean logits.
#[derive(Debug, Clone)]
pub struct BatchObjective {
    pub loss: f64,
    pub grads: Gradients,
    pub clean_logits: Tensor,
}

/// `κ·L(x) + (1−κ)·L(x_adv)` where `x_adv` is crafted from `attack_base`
/// against the current network. With `κ = 1` or no attack only the clean
/// term is evaluated. Gradients do not flow through the attack.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective(
    net: &Network,
    x: &Tensor,
    attack_base: &Tensor,
    y: &[usize],
    stream_indices: &[u64],
    terms: LossTerms,
    kappa: f64,
    attack: Option<&AttackConfig>,
) -> Result<BatchObjective> {
    if !(0.0..=1.0).contains(&kappa) {
        return Err(Error::InvalidConfig(format!("kappa must lie in [0, 1], got {kappa}")));
    }
    let attack = attack.filter(|_| kappa < 1.0);
    let Some(cfg) = attack else {
        let trace = net.forward(x)?;
        let lg = terms.eval(trace.logits(), y)?;
        let grads = net.param_gradients(&trace, &lg.grad)?;
        return Ok(BatchObjective {
            loss: lg.loss,
            grads,
            clean_logits: trace.logits().clone(),
        });
    };
    let x_adv = attack::craft(net, attack_base, y, stream_indices, cfg)?;
    if !x_adv.is_finite() {
        return Err(Error::NonFinite("adversarial batch".into()));
    }
    let n = x.rows();
    let trace = net.forward(&Tensor::concat_rows(&[x.clone(), x_adv])?)?;
    let z = trace.logits();
    let clean = z.slice_rows(0, n);
    let adv = z.slice_rows(n, 2 * n);
    let lc = terms.eval(&clean, y)?;
    let la = terms.eval(&adv, y)?;
    let g = Tensor::concat_rows(&[lc.grad.scale(kappa), la.grad.scale(1.0 - kappa)])?;
    let grads = net.param_gradients(&trace, &g)?;
    Ok(BatchObjective {
        loss: kappa * lc.loss + (1.0 - kappa) * la.loss,
        grads,
        clean_logits: clean,
    })
}

/// Plain cross-entropy version of [`batch_objective`], attacking `x` itself.
pub fn adversarial_objective(
    net: &Network,
    x: &Tensor,
    y: &[usize],
    kappa: f64,
    attack: &AttackConfig,
) -> Result<(f64, Gradients)> {
    attack.validate()?;
    let idx: Vec<u64> = (0..y.len() as u64).collect();
    let o = batch_objective(net, x, x, y, &idx, LossTerms::PLAIN, kappa, Some(attack))?;
    Ok((o.loss, o.grads))
}

/// One training-log row; values are averages over the logged interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub mean_abs_logit: f64,
    pub mean_logit_gap: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn last(&self) -> Option<&LogRecord> {
        self.records.last()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "iteration,loss,accuracy,mean_abs_logit,mean_logit_gap")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.iteration, r.loss, r.accuracy, r.mean_abs_logit, r.mean_logit_gap
            )?;
        }
        Ok(())
    }
}

#[derive(Default)]
struct Interval {
    iters: usize,
    loss: f64,
    examples: usize,
    correct: usize,
    abs_logit: f64,
    logits: usize,
    gap: f64,
}

impl Interval {
    fn add(&mut self, loss: f64, z: &Tensor, y: &[usize]) {
        self.iters += 1;
        self.loss += loss;
        for (i, &yi) in y.iter().enumerate() {
            let row = z.row(i);
            self.examples += 1;
            self.correct += (losses::predict(row) == yi) as usize;
            self.abs_logit += row.iter().map(|v| v.abs()).sum::<f64>();
            self.logits += row.len();
            self.gap += row[yi] - row[losses::runner_up(row, yi)];
        }
    }

    fn record(&self, iteration: usize) -> LogRecord {
        let e = self.examples.max(1) as f64;
        LogRecord {
            iteration,
            loss: self.loss / self.iters.max(1) as f64,
            accuracy: self.correct as f64 / e,
            mean_abs_logit: self.abs_logit / self.logits.max(1) as f64,
            mean_logit_gap: self.gap / e,
        }
    }
}

/// Trains a fresh network. The result depends only on `(config, data)`.
///
/// Each iteration draws a batch, adds Gaussian noise when `sigma > 0`,
/// evaluates the configured objective on the noisy batch (adversarial
/// examples are crafted from the noise-free batch) and takes one SGD step.
pub fn train(config: &TrainConfig, data: &Dataset) -> Result<(Network, TrainLog)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    let mut net = Network::from_architecture(
        &config.arch,
        data.item_shape(),
        data.n_classes(),
        rng::derive_seed(config.seed, &[0x1417]),
    )?;
    let mut opt = Sgd::new(config.momentum, config.weight_decay)?;
    let mut batches = BatchStream::new(data.len(), config.batch_size, rng::derive_seed(config.seed, &[0xba7]));
    let terms = LossTerms {
        alpha: config.alpha,
        beta: config.beta,
        squeeze_squared: config.squeeze_squared,
    };
    let noise_seed = rng::derive_seed(config.seed, &[0x5167]);
    let attack_seed = rng::derive_seed(config.seed, &[0xad5]);
    let mut log = TrainLog::default();
    let mut interval = Interval::default();

    for it in 0..config.iterations {
        let idx = batches.next_batch();
        let (x, y) = data.batch(&idx);
        let mut xn = data::gaussian_augment(&x, config.sigma, noise_seed, it as u64)?;
        if config.clip_augmentation {
            data::clip_unit(&mut xn);
        }
        let attack = config.uses_attack().then(|| {
            config
                .inner
                .clone()
                .with_seed(rng::derive_seed(attack_seed, &[it as u64]))
        });
        let stream: Vec<u64> = idx.iter().map(|&i| i as u64).collect();
        let obj = batch_objective(&net, &xn, &x, &y, &stream, terms, config.kappa, attack.as_ref())
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged {
                    iteration: it,
                    loss: f64::NAN,
                },
                e => e,
            })?;
        if !obj.loss.is_finite() || obj.grads.first_non_finite().is_some() {
            return Err(Error::Diverged {
                iteration: it,
                loss: obj.loss,
            });
        }
        opt.step(&mut net, &obj.grads, config.learning_rate(it))?;
        interval.add(obj.loss, &obj.clean_logits, &y);
        if (it + 1) % config.log_every == 0 || it + 1 == config.iterations {
            log.records.push(interval.record(it + 1));
            interval = Interval::default();
        }
    }
    Ok((net, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::LossKind;
    use crate::data::synth_blobs;
    use crate::defense::config::Regime;
    use crate::nn::{checkpoint, Architecture};

    fn blobs() -> Dataset {
        synth_blobs(200, 3, 6, 0.6, 5).unwrap()
    }

    fn small(mut c: TrainConfig) -> TrainConfig {
        c.arch = Architecture::Mlp { hidden: vec![8] };
        c.batch_size = 20;
        c.log_every = 10;
        c
    }

    #[test]
    fn natural_training_learns_blobs() {
        let d = blobs();
        let (net, log) = train(&small(TrainConfig::natural(200, 1)), &d).unwrap();
        let acc = attack::evaluate(&net, &d, None).unwrap().accuracy;
        assert!(acc > 0.95, "accuracy {acc}");
        assert_eq!(log.records.len(), 20);
        assert!(log.records.windows(2).all(|w| w[0].iteration < w[1].iteration));
    }

    #[test]
    fn deterministic_checkpoints() {
        let d = blobs();
        let c = small(TrainConfig::logit_squeeze(0.5, 0.1, 30, 4));
        let a = train(&c, &d).unwrap();
        let b = train(&c, &d).unwrap();
        assert_eq!(checkpoint::to_bytes(&a.0), checkpoint::to_bytes(&b.0));
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn zero_smoothing_matches_natural() {
        let d = blobs();
        let n = train(&small(TrainConfig::natural(40, 2)), &d).unwrap();
        let s = train(&small(TrainConfig::label_smooth(0.0, 0.0, 40, 2)), &d).unwrap();
        assert_eq!(n.1, s.1);
        assert_eq!(checkpoint::to_bytes(&n.0), checkpoint::to_bytes(&s.0));
    }

    #[test]
    fn unit_kappa_matches_natural() {
        let d = blobs();
        let n = train(&small(TrainConfig::natural(30, 3)), &d).unwrap();
        let mut c = small(TrainConfig::adversarial(
            1.0,
            AttackConfig::pgd(0.1, 3, 0.05, true, LossKind::Xent),
            30,
            3,
        ));
        c.regime = Regime::Adversarial;
        let a = train(&c, &d).unwrap();
        assert_eq!(checkpoint::to_bytes(&n.0), checkpoint::to_bytes(&a.0));
    }

    #[test]
    fn objective_mixing() {
        let d = blobs();
        let net = Network::from_architecture(&Architecture::Mlp { hidden: vec![8] }, &[6], 3, 9).unwrap();
        let (x, y) = d.batch(&(0..16).collect::<Vec<_>>());
        let cfg = AttackConfig::fgsm(0.05, LossKind::Xent);

        let (l1, g1) = adversarial_objective(&net, &x, &y, 1.0, &cfg).unwrap();
        let o = batch_objective(&net, &x, &x, &y, &[], LossTerms::PLAIN, 1.0, None).unwrap();
        assert_eq!(l1, o.loss);
        assert_eq!(g1.layers, o.grads.layers);

        let zero = AttackConfig::fgsm(0.0, LossKind::Xent);
        let (l0, _) = adversarial_objective(&net, &x, &y, 0.0, &zero).unwrap();
        assert!((l0 - o.loss).abs() < 1e-12);

        let xa = attack::fgsm(&net, &x, &y, &cfg).unwrap();
        let clean = LossTerms::PLAIN.eval(&net.logits(&x).unwrap(), &y).unwrap().loss;
        let adv = LossTerms::PLAIN.eval(&net.logits(&xa).unwrap(), &y).unwrap().loss;
        let (lh, _) = adversarial_objective(&net, &x, &y, 0.5, &cfg).unwrap();
        assert!((lh - 0.5 * (clean + adv)).abs() < 1e-12);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut c = small(TrainConfig::label_smooth(1.5, 0.0, 5, 0));
        assert!(train(&c, &blobs()).unwrap_err().is_config());
        c.alpha = 0.1;
        c.lr = 1e6;
        c.iterations = 200;
        let e = train(&c, &blobs());
        if let Err(e) = e {
            assert!(e.is_numerical(), "{e}");
        }
    }
}
