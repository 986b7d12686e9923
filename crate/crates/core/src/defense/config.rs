use std::fmt;
use std::str::FromStr;

use crate::attack::config::parse_value;
use crate::attack::{AttackConfig, LossKind};
use crate::nn::Architecture;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Natural,
    LabelSmooth,
    LogitSqueeze,
    Adversarial,
    /// Any mixture of smoothing, squeezing, noise and adversarial examples.
    Combined,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Natural => "natural",
            Regime::LabelSmooth => "label_smooth",
            Regime::LogitSqueeze => "logit_squeeze",
            Regime::Adversarial => "adversarial",
            Regime::Combined => "combined",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "natural" => Ok(Regime::Natural),
            "label_smooth" | "label_smoothing" => Ok(Regime::LabelSmooth),
            "logit_squeeze" | "logit_squeezing" => Ok(Regime::LogitSqueeze),
            "adversarial" => Ok(Regime::Adversarial),
            "combined" => Ok(Regime::Combined),
            _ => Err(Error::Parse(format!("unknown training regime {s:?}"))),
        }
    }
}

/// Everything that determines a training run. Perturbation sizes and the
/// noise std are on the `[0, 1]` pixel scale.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    pub arch: Architecture,
    /// Label smoothing strength in `[0, 1]`.
    pub alpha: f64,
    /// Logit squeezing coefficient.
    pub beta: f64,
    /// Gaussian noise std applied to training batches.
    pub sigma: f64,
    /// Weight of the clean term in the adversarial objective.
    pub kappa: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Penalize `‖z‖_F²` instead of `‖z‖_F`.
    pub squeeze_squared: bool,
    /// Clamp noise-augmented batches to `[0, 1]`.
    pub clip_augmentation: bool,
    pub inner: AttackConfig,
    pub seed: u64,
    /// Iterations per training-log record.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Natural,
            arch: Architecture::small_cnn(),
            alpha: 0.0,
            beta: 0.0,
            sigma: 0.0,
            kappa: 0.5,
            iterations: 1000,
            batch_size: 50,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            squeeze_squared: false,
            clip_augmentation: false,
            inner: AttackConfig::mnist_pgd40(LossKind::Xent),
            seed: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn natural(iterations: usize, seed: u64) -> Self {
        Self {
            iterations,
            seed,
            ..Self::default()
        }
    }

    pub fn label_smooth(alpha: f64, sigma: f64, iterations: usize, seed: u64) -> Self {
        Self {
            regime: Regime::LabelSmooth,
            alpha,
            sigma,
            ..Self::natural(iterations, seed)
        }
    }

    pub fn logit_squeeze(beta: f64, sigma: f64, iterations: usize, seed: u64) -> Self {
        Self {
            regime: Regime::LogitSqueeze,
            beta,
            sigma,
            ..Self::natural(iterations, seed)
        }
    }

    pub fn adversarial(kappa: f64, inner: AttackConfig, iterations: usize, seed: u64) -> Self {
        Self {
            regime: Regime::Adversarial,
            kappa,
            inner,
            ..Self::natural(iterations, seed)
        }
    }

    /// Piecewise-constant rate: `lr` for the first half of the budget,
    /// `lr/10` until 75 %, `lr/100` afterwards.
    pub fn learning_rate(&self, iteration: usize) -> f64 {
        if 4 * iteration >= 3 * self.iterations {
            self.lr * 0.01
        } else if 2 * iteration >= self.iterations {
            self.lr * 0.1
        } else {
            self.lr
        }
    }

    /// Whether the adversarial term contributes to the objective.
    pub fn uses_attack(&self) -> bool {
        matches!(self.regime, Regime::Adversarial | Regime::Combined) && self.kappa < 1.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be non-negative, got {}", self.beta));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be non-negative, got {}", self.sigma));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return bad(format!("kappa must lie in [0, 1], got {}", self.kappa));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if self.log_every == 0 {
            return bad("log interval must be positive".into());
        }
        let off = |name: &str, v: f64| -> Result<()> {
            if v != 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "{} training does not use {name} (got {v}); use the combined regime",
                    self.regime
                )));
            }
            Ok(())
        };
        match self.regime {
            Regime::Natural => {
                off("alpha", self.alpha)?;
                off("beta", self.beta)?;
                off("sigma", self.sigma)?;
            }
            Regime::LabelSmooth => off("beta", self.beta)?,
            Regime::LogitSqueeze => off("alpha", self.alpha)?,
            Regime::Adversarial => {
                off("alpha", self.alpha)?;
                off("beta", self.beta)?;
                off("sigma", self.sigma)?;
            }
            Regime::Combined => {}
        }
        if matches!(self.regime, Regime::Adversarial | Regime::Combined) {
            self.inner
                .validate()
                .map_err(|e| Error::InvalidConfig(format!("inner attack: {e}")))?;
        }
        Ok(())
    }

    /// `(key, value)` pairs in a fixed order; inner-attack keys carry an
    /// `inner.` prefix.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = [
            ("regime", self.regime.to_string()),
            ("arch", self.arch.to_string()),
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("sigma", self.sigma.to_string()),
            ("kappa", self.kappa.to_string()),
            ("iterations", self.iterations.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("squeeze_squared", self.squeeze_squared.to_string()),
            ("clip_augmentation", self.clip_augmentation.to_string()),
            ("seed", self.seed.to_string()),
            ("log_every", self.log_every.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        out.extend(
            self.inner
                .to_pairs()
                .into_iter()
                .map(|(k, v)| (format!("inner.{k}"), v)),
        );
        out
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some(k) = key.strip_prefix("inner.") {
            return self.inner.set(k, value);
        }
        match key {
            "regime" => self.regime = value.parse()?,
            "arch" => self.arch = value.parse()?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "beta" => self.beta = parse_value(key, value)?,
            "sigma" => self.sigma = parse_value(key, value)?,
            "kappa" => self.kappa = parse_value(key, value)?,
            "iterations" | "iters" => self.iterations = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "momentum" => self.momentum = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "squeeze_squared" => self.squeeze_squared = parse_value(key, value)?,
            "clip_augmentation" => self.clip_augmentation = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "log_every" => self.log_every = parse_value(key, value)?,
            _ => return Err(Error::Parse(format!("unknown training key {key:?}"))),
        }
        Ok(())
    }

    /// Flat `key=value` text, one pair per line.
    pub fn to_kv(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Parses `key=value` lines on top of the defaults. Blank lines and
    /// lines starting with `#` are ignored; later keys override earlier ones.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in parse_kv(text)? {
            c.set(&k, &v)?;
        }
        Ok(c)
    }
}

/// Splits flat `key=value` text into trimmed pairs in file order.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(i, l)| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Parse(format!("line {}: expected key=value, got {l:?}", i + 1)))
        })
        .collect()
}
