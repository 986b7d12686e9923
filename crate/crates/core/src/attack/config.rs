use std::fmt;
use std::str::FromStr;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Fgsm,
    Pgd,
    /// One linearized step toward the class with the smallest robustness
    /// ratio; unclipped analysis attack.
    Linearized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Xent,
    Cw,
}

/// ℓ∞ attack settings. `epsilon` and `step_size` are on the `[0, 1]` pixel
/// scale.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub family: Family,
    pub loss: LossKind,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_init: bool,
    pub restarts: usize,
    pub clip_to_valid: bool,
    pub seed: u64,
}

impl AttackConfig {
    /// Single signed-gradient step of size `epsilon`, no random start.
    pub fn fgsm(epsilon: f64, loss: LossKind) -> Self {
        Self {
            family: Family::Fgsm,
            loss,
            epsilon,
            steps: 1,
            step_size: epsilon,
            random_init: false,
            restarts: 1,
            clip_to_valid: true,
            seed: 0,
        }
    }

    pub fn pgd(epsilon: f64, steps: usize, step_size: f64, random_init: bool, loss: LossKind) -> Self {
        Self {
            family: Family::Pgd,
            loss,
            epsilon,
            steps,
            step_size,
            random_init,
            restarts: 1,
            clip_to_valid: true,
            seed: 0,
        }
    }

    /// 40-step PGD, step 0.01, ε = 0.3, random start.
    pub fn mnist_pgd40(loss: LossKind) -> Self {
        Self::pgd(0.3, 40, 0.01, true, loss)
    }

    pub fn linearized(epsilon: f64) -> Self {
        Self {
            family: Family::Linearized,
            loss: LossKind::Xent,
            epsilon,
            steps: 1,
            step_size: epsilon,
            random_init: false,
            restarts: 1,
            clip_to_valid: false,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    /// `(key, value)` pairs in a fixed order, for flat config files.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("family", self.family.to_string()),
            ("loss", self.loss.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("steps", self.steps.to_string()),
            ("step_size", self.step_size.to_string()),
            ("random_init", self.random_init.to_string()),
            ("restarts", self.restarts.to_string()),
            ("clip_to_valid", self.clip_to_valid.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Sets one field from its textual form. Changing `family` to fgsm or
    /// linearized also resets the step settings to match.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "family" => {
                self.family = value.parse()?;
                if self.family != Family::Pgd {
                    self.steps = 1;
                    self.step_size = self.epsilon;
                    self.random_init = false;
                    self.restarts = 1;
                }
                if self.family == Family::Linearized {
                    self.clip_to_valid = false;
                }
            }
            "loss" => self.loss = value.parse()?,
            "epsilon" | "eps" => {
                self.epsilon = parse_value(key, value)?;
                if self.family != Family::Pgd {
                    self.step_size = self.epsilon;
                }
            }
            "steps" => self.steps = parse_value(key, value)?,
            "step_size" => self.step_size = parse_value(key, value)?,
            "random_init" => self.random_init = parse_value(key, value)?,
            "restarts" => self.restarts = parse_value(key, value)?,
            "clip_to_valid" => self.clip_to_valid = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(Error::Parse(format!("unknown attack key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be non-negative, got {}", self.epsilon));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return bad(format!("step size must be non-negative, got {}", self.step_size));
        }
        if self.steps == 0 {
            return bad("attack needs at least one step".into());
        }
        if self.restarts == 0 {
            return bad("attack needs at least one restart".into());
        }
        if self.restarts >= 2 && !self.random_init {
            return bad("restarts >= 2 require a random start".into());
        }
        match self.family {
            Family::Fgsm | Family::Linearized => {
                if self.steps != 1 || self.step_size != self.epsilon {
                    return bad(format!(
                        "{} takes exactly one step of size epsilon",
                        self.family
                    ));
                }
                if self.random_init {
                    return bad(format!("{} has no random start", self.family));
                }
            }
            Family::Pgd => {
                if self.step_size <= 0.0 {
                    return bad("pgd step size must be positive".into());
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("bad value {value:?} for {key}")))
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Fgsm => "fgsm",
            Family::Pgd => "pgd",
            Family::Linearized => "linearized",
        })
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fgsm" => Ok(Family::Fgsm),
            "pgd" => Ok(Family::Pgd),
            "linearized" => Ok(Family::Linearized),
            _ => Err(Error::Parse(format!("unknown attack family {s:?}"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Xent => "xent",
            LossKind::Cw => "cw",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "xent" | "x-ent" | "cross_entropy" => Ok(LossKind::Xent),
            "cw" => Ok(LossKind::Cw),
            _ => Err(Error::Parse(format!("unknown attack loss {s:?}"))),
        }
    }
}
