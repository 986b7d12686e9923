use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rbk_cli::{
    cmd_analyze, cmd_eval, cmd_landscape, cmd_report, cmd_train, exit_code, model_name, Manifest,
    ReportAttacks,
};
use rbk_core::data::Split;
use rbk_core::nn::{checkpoint, Network};
use rbk_core::Error;

#[derive(Parser)]
#[command(name = "rbk", version, about = "Adversarial robustness experiments on small image classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint, log and resolved manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint under the given attack.
    Attack(AttackArgs),
    /// Clean accuracy, plus any attacks listed in the manifest.
    Eval(EvalArgs),
    /// Linearized robustness report, histograms and activation profiles.
    Analyze(AnalyzeArgs),
    /// Loss-surface grids around the first test images.
    Landscape(LandscapeArgs),
    /// Markdown comparison table over several checkpoints.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// Manifest file (key=value); flags below override its entries.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// `mnist` or `blobs`.
    #[arg(long)]
    dataset: Option<String>,
    /// Directory holding the IDX files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    test_limit: Option<usize>,
    /// Unit of epsilon, step size and sigma: 1 or 255.
    #[arg(long)]
    pixel_scale: Option<f64>,
    /// Extra manifest entries, e.g. `--set train.kappa=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl Common {
    fn pairs(&self) -> Result<Vec<(String, String)>> {
        let mut p = Vec::new();
        let mut push = |k: &str, v: String| p.push((k.to_string(), v));
        if let Some(d) = &self.dataset {
            push("dataset", d.clone());
        }
        if let Some(d) = &self.data_dir {
            push("dataset.dir", d.display().to_string());
        }
        if let Some(n) = self.train_limit {
            push("dataset.train_limit", n.to_string());
        }
        if let Some(n) = self.test_limit {
            push("dataset.test_limit", n.to_string());
        }
        if let Some(s) = self.pixel_scale {
            push("pixel_scale", s.to_string());
        }
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("--set expects KEY=VALUE, got {s:?}")))?;
            push(k.trim(), v.trim().to_string());
        }
        Ok(p)
    }

    fn manifest(&self, extra: Vec<(String, String)>) -> Result<Manifest> {
        let mut m = match &self.manifest {
            Some(path) => Manifest::parse(
                &fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
            )?,
            None => Manifest::default(),
        };
        // Pixel scale first so values given on the command line use it.
        let mut pairs = self.pairs()?;
        pairs.extend(extra);
        pairs.sort_by_key(|(k, _)| k != "pixel_scale");
        m.apply(&pairs)?;
        Ok(m)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    regime: Option<String>,
    /// `linear`, `mlp:W1,W2,..` or `cnn[:C1,C2,H]`.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Penalize the squared Frobenius norm of the logits.
    #[arg(long)]
    squeeze_squared: bool,
    #[arg(long)]
    id: Option<String>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct AttackFlags {
    /// `fgsm`, `pgd` or `linearized`.
    #[arg(long, default_value = "pgd")]
    family: String,
    /// `xent` or `cw`.
    #[arg(long, default_value = "xent")]
    loss: String,
    #[arg(long)]
    eps: f64,
    #[arg(long, default_value_t = 40)]
    steps: usize,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    rand_init: bool,
    #[arg(long, default_value_t = 1)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    attack_seed: u64,
}

impl AttackFlags {
    fn pairs(&self, index: usize) -> Vec<(String, String)> {
        let k = |s: &str| format!("attack.{index}.{s}");
        let mut p = vec![
            (k("family"), self.family.clone()),
            (k("loss"), self.loss.clone()),
            (k("epsilon"), self.eps.to_string()),
        ];
        if self.family.eq_ignore_ascii_case("pgd") {
            p.push((k("steps"), self.steps.to_string()));
            p.push((k("step_size"), self.step_size.unwrap_or(self.eps / 4.0).to_string()));
            p.push((k("random_init"), self.rand_init.to_string()));
            p.push((k("restarts"), self.restarts.to_string()));
        }
        p.push((k("seed"), self.attack_seed.to_string()));
        p
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Craft attacks on this checkpoint and transfer them.
    #[arg(long)]
    surrogate: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    eval: EvalArgs,
    #[command(flatten)]
    attack: AttackFlags,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    common: Common,
    /// One or more checkpoints.
    #[arg(long, num_args = 1.., required = true)]
    checkpoint: Vec<PathBuf>,
    /// Perturbation size for the predicted accuracy (in pixel-scale units).
    #[arg(long, default_value_t = 0.3)]
    eps: f64,
    #[arg(long, default_value = "analysis")]
    out: PathBuf,
}

#[derive(Args)]
struct LandscapeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 8)]
    images: usize,
    /// Grid half-width (in pixel-scale units).
    #[arg(long, default_value_t = 10.0)]
    range: f64,
    #[arg(long, default_value_t = 41)]
    resolution: usize,
    /// Use the adversarial direction for the first axis.
    #[arg(long)]
    adversarial: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "landscape")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoints to compare.
    #[arg(long, num_args = 1.., required = true)]
    compare: Vec<PathBuf>,
    /// Black-box source model; defaults to the first compared checkpoint.
    #[arg(long)]
    surrogate: Option<PathBuf>,
    /// Perturbation size (in pixel-scale units).
    #[arg(long, default_value_t = 0.3)]
    eps: f64,
    #[arg(long, default_value_t = 0)]
    attack_seed: u64,
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

fn load_checkpoint(path: &Path, manifest: &Manifest) -> Result<Network> {
    let net = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(expected) = &manifest.model_hash {
        let found = checkpoint::hash(&net);
        if &found != expected {
            eprintln!(
                "warning: {} has hash {found}, manifest expects {expected}",
                path.display()
            );
        }
    }
    Ok(net)
}

fn load_split(m: &Manifest) -> Result<Split> {
    Ok(m.dataset.load()?)
}

fn scale(m: &Manifest) -> f64 {
    m.pixel_scale
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => {
            let mut extra = Vec::new();
            let mut set = |k: &str, v: Option<String>| {
                if let Some(v) = v {
                    extra.push((format!("train.{k}"), v));
                }
            };
            set("regime", a.regime.clone());
            set("arch", a.arch.clone());
            set("alpha", a.alpha.map(|v| v.to_string()));
            set("beta", a.beta.map(|v| v.to_string()));
            set("sigma", a.sigma.map(|v| v.to_string()));
            set("kappa", a.kappa.map(|v| v.to_string()));
            set("iterations", a.iters.map(|v| v.to_string()));
            set("batch_size", a.batch_size.map(|v| v.to_string()));
            set("lr", a.lr.map(|v| v.to_string()));
            set("seed", a.seed.map(|v| v.to_string()));
            if a.squeeze_squared {
                set("squeeze_squared", Some("true".into()));
            }
            if let Some(id) = &a.id {
                extra.push(("id".into(), id.clone()));
            }
            let m = a.common.manifest(extra)?;
            m.resolved().validate()?;
            let split = load_split(&m)?;
            let out = cmd_train(&m, &split, &a.out)?;
            let s = &out.summary;
            println!(
                "{}: hash {} train {:.4} test {:.4} (log {:.4}) -> {}",
                s.id,
                s.model_hash,
                s.train_accuracy,
                s.test_accuracy,
                s.final_log_accuracy,
                a.out.display()
            );
        }
        Command::Attack(a) => {
            let m = a.eval.common.manifest(a.attack.pairs(0))?;
            let m = Manifest {
                attacks: m.attacks[..1].to_vec(),
                ..m
            };
            eval(&a.eval, m)?;
        }
        Command::Eval(a) => {
            let m = a.common.manifest(Vec::new())?;
            eval(&a, m)?;
        }
        Command::Analyze(a) => {
            let m = a.common.manifest(Vec::new())?;
            let split = load_split(&m)?;
            let models = a
                .checkpoint
                .iter()
                .map(|p| Ok((model_name(p), load_checkpoint(p, &m)?)))
                .collect::<Result<Vec<_>>>()?;
            let eps = a.eps / scale(&m);
            let reports = cmd_analyze(&models, &split.test, eps, &a.out)?;
            println!("model,clean_accuracy,predicted_accuracy,mean_abs_logit,mean_grad_gap_l1");
            for r in &reports {
                let s = &r.suite.summary;
                println!(
                    "{},{:.4},{:.4},{:.4},{:.4}",
                    r.model, s.clean_accuracy, s.predicted_accuracy, s.mean_abs_logit, s.mean_grad_gap_l1
                );
            }
        }
        Command::Landscape(a) => {
            let m = a.common.manifest(Vec::new())?;
            let split = load_split(&m)?;
            let net = load_checkpoint(&a.checkpoint, &m)?;
            let grids = cmd_landscape(
                &net,
                &split.test,
                a.images,
                a.range / scale(&m),
                a.resolution,
                a.adversarial,
                a.seed,
                &a.out,
            )?;
            for g in &grids {
                println!(
                    "image {}: {}x{} grid, center loss {:.6}, axis ranges {:.4} / {:.4}",
                    g.image_index,
                    g.resolution,
                    g.resolution,
                    g.center(),
                    g.range_along_first(),
                    g.range_along_second()
                );
            }
        }
        Command::Report(a) => {
            let m = a.common.manifest(Vec::new())?;
            let split = load_split(&m)?;
            let models = a
                .compare
                .iter()
                .map(|p| Ok((model_name(p), load_checkpoint(p, &m)?)))
                .collect::<Result<Vec<_>>>()?;
            let surrogate = match &a.surrogate {
                Some(p) => load_checkpoint(p, &m)?,
                None => models[0].1.clone(),
            };
            let attacks = ReportAttacks::standard(a.eps / scale(&m), a.attack_seed);
            let (_, md) = cmd_report(&models, &surrogate, &split, &attacks, &a.out)?;
            print!("{md}");
        }
    }
    Ok(())
}

fn eval(a: &EvalArgs, m: Manifest) -> Result<()> {
    let m = m.resolved();
    m.validate()?;
    let split = load_split(&m)?;
    let net = load_checkpoint(&a.checkpoint, &m)?;
    let surrogate = a.surrogate.as_deref().map(|p| load_checkpoint(p, &m)).transpose()?;
    if let Some(s) = &surrogate {
        if s.input_shape() != net.input_shape() || s.n_classes() != net.n_classes() {
            bail!(Error::Shape("surrogate and target models differ in shape".into()));
        }
    }
    let rows = cmd_eval(&net, surrogate.as_ref(), &split.test, &m.attacks, a.out.as_deref())?;
    println!("mode,attack,clean_accuracy,accuracy");
    for r in rows {
        println!("{},{},{:.4},{:.4}", r.mode, r.attack, r.clean_accuracy, r.accuracy);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
