//! Experiment manifests: flat `key=value` files that pin every input of a
//! run.
//!
//! ```text
//! id=squeeze-b05
//! dataset=mnist
//! pixel_scale=255
//! train.regime=logit_squeeze
//! train.beta=0.5
//! train.sigma=127.5
//! attack.0.family=pgd
//! attack.0.epsilon=76.5
//! ```
//!
//! Perturbation sizes, step sizes and noise levels are written in the
//! declared pixel scale and converted to `[0, 1]` units by
//! [`Manifest::resolved`].

use std::collections::BTreeMap;
use std::path::PathBuf;

use rbk_core::attack::{AttackConfig, LossKind};
use rbk_core::data::{self, Dataset, Split};
use rbk_core::defense::{parse_kv, TrainConfig};
use rbk_core::{rng, Error, Result};

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetKind {
    /// IDX files; `None` means the default directory.
    Mnist { dir: Option<PathBuf> },
    /// Gaussian blobs, see [`data::synth_blobs`].
    Blobs {
        n: usize,
        classes: usize,
        dim: usize,
        separation: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Mnist { dir: None },
            train_limit: None,
            test_limit: None,
        }
    }
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Split> {
        let split = match &self.kind {
            DatasetKind::Mnist { dir } => {
                data::load_mnist(dir.clone().unwrap_or_else(data::default_mnist_dir))?
            }
            &DatasetKind::Blobs {
                n,
                classes,
                dim,
                separation,
                seed,
            } => Split {
                train: data::synth_blobs(n, classes, dim, separation, seed)?,
                test: data::synth_blobs(
                    (n / 4).max(1),
                    classes,
                    dim,
                    separation,
                    rng::derive_seed(seed, &[1]),
                )?,
            },
        };
        let cut = |d: Dataset, limit: Option<usize>| match limit {
            Some(l) => d.take(l),
            None => d,
        };
        Ok(Split {
            train: cut(split.train, self.train_limit),
            test: cut(split.test, self.test_limit),
        })
    }

    fn pairs(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        match &self.kind {
            DatasetKind::Mnist { dir } => {
                out.push(("dataset".into(), "mnist".into()));
                if let Some(d) = dir {
                    out.push(("dataset.dir".into(), d.display().to_string()));
                }
            }
            DatasetKind::Blobs {
                n,
                classes,
                dim,
                separation,
                seed,
            } => {
                out.push(("dataset".into(), "blobs".into()));
                out.push(("dataset.n".into(), n.to_string()));
                out.push(("dataset.classes".into(), classes.to_string()));
                out.push(("dataset.dim".into(), dim.to_string()));
                out.push(("dataset.separation".into(), separation.to_string()));
                out.push(("dataset.seed".into(), seed.to_string()));
            }
        }
        if let Some(l) = self.train_limit {
            out.push(("dataset.train_limit".into(), l.to_string()));
        }
        if let Some(l) = self.test_limit {
            out.push(("dataset.test_limit".into(), l.to_string()));
        }
        out
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let blobs = || DatasetKind::Blobs {
            n: 2000,
            classes: 3,
            dim: 2,
            separation: 0.5,
            seed: 0,
        };
        match key {
            "dataset" => {
                self.kind = match value.trim() {
                    "mnist" => DatasetKind::Mnist { dir: None },
                    "blobs" => blobs(),
                    other => return Err(Error::Parse(format!("unknown dataset {other:?}"))),
                }
            }
            "dataset.train_limit" => self.train_limit = Some(num(key, value)?),
            "dataset.test_limit" => self.test_limit = Some(num(key, value)?),
            "dataset.dir" => match &mut self.kind {
                DatasetKind::Mnist { dir } => *dir = Some(PathBuf::from(value.trim())),
                _ => return Err(Error::Parse("dataset.dir only applies to mnist".into())),
            },
            _ => {
                let DatasetKind::Blobs {
                    n,
                    classes,
                    dim,
                    separation,
                    seed,
                } = &mut self.kind
                else {
                    return Err(Error::Parse(format!("unknown dataset key {key:?}")));
                };
                match key {
                    "dataset.n" => *n = num(key, value)?,
                    "dataset.classes" => *classes = num(key, value)?,
                    "dataset.dim" => *dim = num(key, value)?,
                    "dataset.separation" => *separation = num(key, value)?,
                    "dataset.seed" => *seed = num(key, value)?,
                    _ => return Err(Error::Parse(format!("unknown dataset key {key:?}"))),
                }
            }
        }
        Ok(())
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("bad value {value:?} for {key}")))
}

/// Everything needed to regenerate a run's outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub id: String,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub attacks: Vec<AttackConfig>,
    /// 1 or 255: the unit of `epsilon`, `step_size` and `sigma`.
    pub pixel_scale: f64,
    pub version: String,
    /// Expected checkpoint hash, checked by evaluation commands.
    pub model_hash: Option<String>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            id: "run".into(),
            dataset: DatasetSpec::default(),
            train: TrainConfig::default(),
            attacks: Vec::new(),
            pixel_scale: 1.0,
            version: TOOLKIT_VERSION.into(),
            model_hash: None,
        }
    }
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Self::default();
        m.apply(&parse_kv(text)?)?;
        Ok(m)
    }

    /// Applies `key=value` overrides in order; the last writer wins.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        // Attack entries are collected by index so sparse numbering works.
        let mut attacks: BTreeMap<usize, AttackConfig> =
            std::mem::take(&mut self.attacks).into_iter().enumerate().collect();
        for (k, v) in pairs {
            self.set_one(k, v, &mut attacks)?;
        }
        self.attacks = attacks.into_values().collect();
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.apply(&[(key.to_string(), value.to_string())])
    }

    fn set_one(&mut self, key: &str, value: &str, attacks: &mut BTreeMap<usize, AttackConfig>) -> Result<()> {
        if let Some(k) = key.strip_prefix("train.") {
            return self.train.set(k, value);
        }
        if let Some(rest) = key.strip_prefix("attack.") {
            let (i, k) = rest
                .split_once('.')
                .ok_or_else(|| Error::Parse(format!("attack key {key:?} needs an index")))?;
            let i: usize = num(key, i)?;
            return attacks
                .entry(i)
                .or_insert_with(|| AttackConfig::mnist_pgd40(LossKind::Xent))
                .set(k, value);
        }
        if key == "dataset" || key.starts_with("dataset.") {
            return self.dataset.set(key, value);
        }
        match key {
            "id" => self.id = value.trim().to_string(),
            "pixel_scale" => {
                let s: f64 = num(key, value)?;
                if s != 1.0 && s != 255.0 {
                    return Err(Error::InvalidConfig(format!("pixel scale must be 1 or 255, got {s}")));
                }
                self.pixel_scale = s;
            }
            "version" => self.version = value.trim().to_string(),
            "model_hash" => self.model_hash = Some(value.trim().to_string()),
            _ => return Err(Error::Parse(format!("unknown manifest key {key:?}"))),
        }
        Ok(())
    }

    /// Copy with every pixel-valued setting converted to `[0, 1]` units and
    /// `pixel_scale = 1`.
    pub fn resolved(&self) -> Self {
        let s = self.pixel_scale;
        let mut m = self.clone();
        m.pixel_scale = 1.0;
        m.train.sigma /= s;
        scale_attack(&mut m.train.inner, s);
        for a in &mut m.attacks {
            scale_attack(a, s);
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        for (i, a) in self.attacks.iter().enumerate() {
            a.validate()
                .map_err(|e| Error::InvalidConfig(format!("attack {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut pairs: Vec<(String, String)> = vec![
            ("id".into(), self.id.clone()),
            ("version".into(), self.version.clone()),
            ("pixel_scale".into(), self.pixel_scale.to_string()),
        ];
        pairs.extend(self.dataset.pairs());
        pairs.extend(
            self.train
                .to_pairs()
                .into_iter()
                .map(|(k, v)| (format!("train.{k}"), v)),
        );
        for (i, a) in self.attacks.iter().enumerate() {
            pairs.extend(a.to_pairs().into_iter().map(|(k, v)| (format!("attack.{i}.{k}"), v)));
        }
        if let Some(h) = &self.model_hash {
            pairs.push(("model_hash".into(), h.clone()));
        }
        pairs.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

fn scale_attack(a: &mut AttackConfig, s: f64) {
    a.epsilon /= s;
    a.step_size /= s;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rbk_core::attack::Family;

    #[test]
    fn round_trip_and_overrides() {
        let text = "id=x\npixel_scale=255\ndataset=blobs\ndataset.n=90\ntrain.regime=label_smooth\n\
                    train.alpha=0.2\ntrain.sigma=76.5\nattack.1.family=fgsm\nattack.1.epsilon=76.5\n\
                    attack.0.epsilon=8\n";
        let m = Manifest::parse(text).unwrap();
        assert_eq!(m.attacks.len(), 2);
        assert_eq!(m.attacks[1].family, Family::Fgsm);
        assert_eq!(Manifest::parse(&m.to_kv()).unwrap(), m);

        let r = m.resolved();
        assert!((r.train.sigma - 0.3).abs() < 1e-15);
        assert!((r.attacks[1].epsilon - 0.3).abs() < 1e-15);
        assert_eq!(r.attacks[1].step_size, r.attacks[1].epsilon);
        assert!((r.attacks[0].epsilon - 8.0 / 255.0).abs() < 1e-15);
        assert!(r.validate().is_ok());

        let mut o = m.clone();
        o.set("train.alpha", "0.5").unwrap();
        assert_eq!(o.train.alpha, 0.5);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Manifest::parse("pixel_scale=10").unwrap_err().is_config());
        assert!(Manifest::parse("attack.x.eps=1").is_err());
        assert!(Manifest::parse("dataset.n=5").is_err());
        assert!(Manifest::parse("wat=1").is_err());
        let m = Manifest::parse("train.alpha=1.5\ntrain.regime=label_smooth").unwrap();
        assert!(m.validate().unwrap_err().is_config());
    }

    #[test]
    fn blobs_load() {
        let m = Manifest::parse("dataset=blobs\ndataset.n=40\ndataset.dim=3\ndataset.test_limit=5").unwrap();
        let s = m.dataset.load().unwrap();
        assert_eq!(s.train.len(), 40);
        assert_eq!(s.test.len(), 5);
        assert_eq!(s.train.item_shape(), &[3]);
    }
}
