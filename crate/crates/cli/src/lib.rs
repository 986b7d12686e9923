//! Reproducible experiment commands behind the `rbk` binary.
//!
//! Every command takes already-resolved inputs (pixel values on the `[0, 1]`
//! scale) and writes deterministic artifacts: nothing written depends on
//! wall-clock time or thread scheduling.

pub mod manifest;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rbk_core::analytics::{self, ActivationLayer, RobustnessReport};
use rbk_core::attack::{self, AttackConfig, Family, LossKind};
use rbk_core::data::{Dataset, Split};
use rbk_core::defense::{self, TrainLog};
use rbk_core::landscape::{self, DirectionSpec, LandscapeGrid};
use rbk_core::nn::{checkpoint, Network};
use rbk_core::{rng, Error, Result};
use serde::Serialize;

pub use manifest::{DatasetKind, DatasetSpec, Manifest, TOOLKIT_VERSION};

pub const CHECKPOINT_FILE: &str = "model.rbk";
pub const RESOLVED_FILE: &str = "manifest.resolved";

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub id: String,
    pub model_hash: String,
    pub iterations: usize,
    pub final_log_accuracy: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub test_mean_abs_logit: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub network: Network,
    pub log: TrainLog,
    pub summary: TrainSummary,
}

/// Trains the manifest's model and writes the checkpoint, training log,
/// resolved manifest and summary into `out`.
pub fn cmd_train(manifest: &Manifest, split: &Split, out: &Path) -> Result<TrainOutput> {
    let m = manifest.resolved();
    m.validate()?;
    let (network, log) = defense::train(&m.train, &split.train)?;
    fs::create_dir_all(out)?;
    let bytes = checkpoint::to_bytes(&network);
    fs::write(out.join(CHECKPOINT_FILE), &bytes)?;
    let hash = checkpoint::hash_bytes(&bytes);
    log.write_csv(create(&out.join("train_log.csv"))?)?;
    let mut echo = m.clone();
    echo.model_hash = Some(hash.clone());
    write_text(&out.join(RESOLVED_FILE), &echo.to_kv())?;

    let train_accuracy = attack::evaluate(&network, &split.train, None)?.accuracy;
    let test_accuracy = attack::evaluate(&network, &split.test, None)?.accuracy;
    let suite = analytics::distribution_suite(&network, &split.test, 0.0)?;
    let summary = TrainSummary {
        id: m.id.clone(),
        model_hash: hash,
        iterations: m.train.iterations,
        final_log_accuracy: log.last().map_or(0.0, |r| r.accuracy),
        train_accuracy,
        test_accuracy,
        test_mean_abs_logit: suite.summary.mean_abs_logit,
    };
    write_json(&out.join("train_summary.json"), &summary)?;
    Ok(TrainOutput {
        network,
        log,
        summary,
    })
}

/// Short human-readable attack label, e.g. `pgd-40 xent eps=0.3`.
pub fn describe(a: &AttackConfig) -> String {
    let mut s = match a.family {
        Family::Pgd => format!("pgd-{} {} eps={} step={}", a.steps, a.loss, a.epsilon, a.step_size),
        f => format!("{f} {} eps={}", a.loss, a.epsilon),
    };
    if a.random_init {
        s.push_str(" rand");
    }
    if a.restarts > 1 {
        s.push_str(&format!(" restarts={}", a.restarts));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub attack: String,
    /// `white-box` or `transfer`.
    pub mode: String,
    pub clean_accuracy: f64,
    pub accuracy: f64,
}

/// Clean accuracy followed by one row per attack. With a surrogate the
/// attacks are crafted on it and transferred to `net`.
pub fn cmd_eval(
    net: &Network,
    surrogate: Option<&Network>,
    test: &Dataset,
    attacks: &[AttackConfig],
    out: Option<&Path>,
) -> Result<Vec<EvalRow>> {
    let clean = attack::evaluate(net, test, None)?;
    let mut rows = vec![EvalRow {
        attack: "none".into(),
        mode: "clean".into(),
        clean_accuracy: clean.clean_accuracy,
        accuracy: clean.accuracy,
    }];
    for (i, a) in attacks.iter().enumerate() {
        let (report, mode) = match surrogate {
            Some(s) => (attack::transfer_eval(s, net, test, Some(a))?, "transfer"),
            None => (attack::evaluate(net, test, Some(a))?, "white-box"),
        };
        if let Some(dir) = out {
            report.write_csv(create(&dir.join(format!("attack_{i}.csv")))?)?;
        }
        rows.push(EvalRow {
            attack: describe(a),
            mode: mode.into(),
            clean_accuracy: report.clean_accuracy,
            accuracy: report.accuracy,
        });
    }
    if let Some(dir) = out {
        write_json(&dir.join("eval.json"), &rows)?;
    }
    Ok(rows)
}

/// Robustness report, histograms and activation profiles for each model.
pub fn cmd_analyze(
    models: &[(String, Network)],
    test: &Dataset,
    epsilon: f64,
    out: &Path,
) -> Result<Vec<RobustnessReport>> {
    let mut reports = Vec::with_capacity(models.len());
    let mut table = String::from("model,examples,epsilon,clean_accuracy,predicted_accuracy,mean_abs_logit,mean_logit_gap,mean_grad_gap_l1,mean_cosine,inactive_penultimate\n");
    for (name, net) in models {
        let dir = out.join(name);
        let records = analytics::robustness_records(net, test)?;
        let report = RobustnessReport::new(name.clone(), records, epsilon);
        write_text(&dir.join("report.json"), &(report.to_json()? + "\n"))?;
        report.write_records_csv(create(&dir.join("records.csv"))?)?;
        for (h, hist) in &report.suite.histograms {
            hist.write_csv(create(&dir.join(format!("hist_{h}.csv")))?)?;
        }
        let pen = analytics::activation_profile(net, test, ActivationLayer::Penultimate, 1e-3)?;
        pen.write_csv(create(&dir.join("activations_penultimate.csv"))?)?;
        let logit = analytics::activation_profile(net, test, ActivationLayer::Logits, 1e-3)?;
        logit.write_csv(create(&dir.join("activations_logits.csv"))?)?;
        let s = &report.suite.summary;
        table.push_str(&format!(
            "{name},{},{},{},{},{},{},{},{},{}\n",
            s.examples,
            s.epsilon,
            s.clean_accuracy,
            s.predicted_accuracy,
            s.mean_abs_logit,
            s.mean_logit_gap,
            s.mean_grad_gap_l1,
            s.mean_cosine,
            pen.inactive
        ));
        reports.push(report);
    }
    write_text(&out.join("summary.csv"), &table)?;
    Ok(reports)
}

/// Loss grids around the first `images` test examples. The first axis is the
/// adversarial direction when `adversarial` is set, otherwise a Rademacher
/// direction; the second axis is always Rademacher.
#[allow(clippy::too_many_arguments)]
pub fn cmd_landscape(
    net: &Network,
    test: &Dataset,
    images: usize,
    range: f64,
    resolution: usize,
    adversarial: bool,
    seed: u64,
    out: &Path,
) -> Result<Vec<LandscapeGrid>> {
    let hash = checkpoint::hash(net);
    let mut grids = Vec::new();
    for i in 0..images.min(test.len()) {
        let (x, y) = test.batch(&[i]);
        let s = rng::derive_seed(seed, &[i as u64]);
        let first = if adversarial {
            DirectionSpec::Adversarial
        } else {
            DirectionSpec::Rademacher { seed: rng::derive_seed(s, &[1]) }
        };
        let dirs = [first, DirectionSpec::Rademacher { seed: rng::derive_seed(s, &[2]) }];
        let g = landscape::landscape(net, &x, y[0], i, dirs, range, resolution)?;
        g.write_csv(create(&out.join(format!("grid_{i}.csv")))?)?;
        write_text(&out.join(format!("grid_{i}.json")), &(g.sidecar_json(&hash)? + "\n"))?;
        grids.push(g);
    }
    Ok(grids)
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub model: String,
    pub train: f64,
    pub test: f64,
    pub white_pgd_xent: f64,
    pub white_pgd_cw: f64,
    pub black_fgsm: f64,
    pub black_pgd: f64,
}

/// The attacks behind each report column, at perturbation `epsilon`.
pub struct ReportAttacks {
    pub white_xent: AttackConfig,
    pub white_cw: AttackConfig,
    pub black_fgsm: AttackConfig,
    pub black_pgd: AttackConfig,
}

impl ReportAttacks {
    /// 40-step PGD (step 0.01, random start) white-box; FGSM and PGD on the
    /// margin loss from the surrogate for the black-box columns.
    pub fn standard(epsilon: f64, seed: u64) -> Self {
        let pgd = |loss| AttackConfig::pgd(epsilon, 40, 0.01, true, loss).with_seed(seed);
        Self {
            white_xent: pgd(LossKind::Xent),
            white_cw: pgd(LossKind::Cw),
            black_fgsm: AttackConfig::fgsm(epsilon, LossKind::Cw),
            black_pgd: pgd(LossKind::Cw),
        }
    }
}

pub fn report_row(name: &str, net: &Network, surrogate: &Network, split: &Split, a: &ReportAttacks) -> Result<ReportRow> {
    let test = &split.test;
    Ok(ReportRow {
        model: name.to_string(),
        train: attack::evaluate(net, &split.train, None)?.accuracy,
        test: attack::evaluate(net, test, None)?.accuracy,
        white_pgd_xent: attack::evaluate(net, test, Some(&a.white_xent))?.accuracy,
        white_pgd_cw: attack::evaluate(net, test, Some(&a.white_cw))?.accuracy,
        black_fgsm: attack::transfer_eval(surrogate, net, test, Some(&a.black_fgsm))?.accuracy,
        black_pgd: attack::transfer_eval(surrogate, net, test, Some(&a.black_pgd))?.accuracy,
    })
}

fn pct(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

pub fn render_markdown(rows: &[ReportRow], epsilon: f64) -> String {
    let mut s = format!(
        "Accuracy under l-inf attacks with epsilon = {epsilon}. White-box columns use 40-step PGD \
         with a random start; black-box columns transfer margin-loss attacks from the surrogate.\n\n"
    );
    s.push_str("| Model | Train | Test | White-box PGD X-ent | White-box PGD CW | Black-box FGSM | Black-box PGD |\n");
    s.push_str("|---|---|---|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} |\n",
            r.model,
            pct(r.train),
            pct(r.test),
            pct(r.white_pgd_xent),
            pct(r.white_pgd_cw),
            pct(r.black_fgsm),
            pct(r.black_pgd)
        ));
    }
    s
}

/// Comparison table over several models; writes `report.md` and
/// `report.json`.
pub fn cmd_report(
    models: &[(String, Network)],
    surrogate: &Network,
    split: &Split,
    attacks: &ReportAttacks,
    out: &Path,
) -> Result<(Vec<ReportRow>, String)> {
    if models.is_empty() {
        return Err(Error::InvalidConfig("report needs at least one model".into()));
    }
    let rows = models
        .iter()
        .map(|(n, net)| report_row(n, net, surrogate, split, attacks))
        .collect::<Result<Vec<_>>>()?;
    let md = render_markdown(&rows, attacks.white_xent.epsilon);
    write_text(&out.join("report.md"), &md)?;
    write_json(&out.join("report.json"), &rows)?;
    Ok((rows, md))
}

/// Model name derived from a checkpoint path: the file stem, or the parent
/// directory for the default checkpoint name.
pub fn model_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned());
    match stem.as_deref() {
        Some("model") | None => path
            .parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into()),
        Some(s) => s.to_string(),
    }
}

/// Process exit code for an error: 2 for configuration problems, 3 for
/// numerical failures, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            if e.is_config() {
                return 2;
            }
            if e.is_numerical() {
                return 3;
            }
        }
    }
    1
}
