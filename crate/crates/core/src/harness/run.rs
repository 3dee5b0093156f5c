//! Command execution: every command reads an [`ExperimentConfig`], writes
//! its artifacts under the output directory and records the resolved
//! configuration in each of them.

use super::config::{ExperimentConfig, SweepParam};
use super::curve::{compare, radii_grid, CertifiedAccuracyCurve};
use crate::blackbox::{self, Coordinator, CoordinatorState, Decorated, SpsaConfig};
use crate::data::{load_dataset, DataFormat, Dataset, DeskSpec, Split};
use crate::error::{Error, Result};
use crate::peft::{self, PeftConfig, PeftMethod};
use crate::smoothing::{self, certify_dataset, iso_duration, read_results, CertifyRun};
use crate::train::{self, TrainConfig, TrainMode};
use crate::vit::checkpoint::{self, CheckpointKind};
use crate::vit::{VitConfig, VitModel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Pretrain,
    Finetune,
    Certify,
    Predict,
    SpsaTrain,
    Report,
    Sweep,
    Compare,
}

impl FromStr for Command {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pretrain" => Command::Pretrain,
            "finetune" => Command::Finetune,
            "certify" => Command::Certify,
            "predict" => Command::Predict,
            "spsa-train" => Command::SpsaTrain,
            "report" => Command::Report,
            "sweep" => Command::Sweep,
            "compare" => Command::Compare,
            _ => return Err(Error::config("command", format!("unknown command `{s}`"))),
        })
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::Certify => "certify",
            Command::Predict => "predict",
            Command::SpsaTrain => "spsa-train",
            Command::Report => "report",
            Command::Sweep => "sweep",
            Command::Compare => "compare",
        })
    }
}

/// What a command produced.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub artifacts: Vec<PathBuf>,
    /// Human-readable one-liners for the terminal.
    pub summary: Vec<String>,
}

impl Outcome {
    fn merge(&mut self, other: Outcome) {
        self.artifacts.extend(other.artifacts);
        self.summary.extend(other.summary);
    }
}

pub const LOCK_FILE: &str = ".smoothcert.lock";

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::config("out", format!("{}: {e}", dir.display())))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(OutputLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Data(format!(
                "{} is in use by another command (delete {} if that run is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::config("out", format!("{} is not writable: {e}", dir.display()))),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Runs `command` under a lock on the output directory. `inputs` are the
/// curve files for `compare` and ignored otherwise.
pub fn run(command: Command, cfg: &ExperimentConfig, inputs: &[PathBuf]) -> Result<Outcome> {
    let _lock = OutputLock::acquire(&cfg.out)?;
    match command {
        Command::Pretrain => pretrain(cfg),
        Command::Finetune => finetune(cfg),
        Command::Certify => certify(cfg),
        Command::Predict => predict(cfg),
        Command::SpsaTrain => spsa_train(cfg),
        Command::Report => report(cfg).map(|(o, _)| o),
        Command::Sweep => sweep(cfg),
        Command::Compare => compare_files(cfg, inputs),
    }
}

/// Loads (or generates) one split, applies the seeded subset and checks it
/// against the model geometry.
pub fn load_split(cfg: &ExperimentConfig, split: Split) -> Result<Dataset> {
    let ds = match cfg.data.format {
        DataFormat::Desk => {
            let count = match split {
                Split::Train => cfg.data.train_count,
                Split::Test => cfg.data.test_count,
            };
            DeskSpec::new(cfg.data.family, cfg.vit.image_size, count, cfg.seed).generate(split)?
        }
        format => {
            let (key, path) = match split {
                Split::Train => ("data.train", &cfg.data.train),
                Split::Test => ("data.test", &cfg.data.test),
            };
            let path = path
                .as_ref()
                .ok_or_else(|| Error::config(key, format!("required for format `{format}`")))?;
            load_dataset(path, format, split)?
        }
    };
    let ds = if cfg.data.subset > 0 { ds.subset(cfg.data.subset, cfg.seed) } else { ds };
    let v = &cfg.vit;
    if ds.channels != v.channels || ds.height != v.image_size || ds.width != v.image_size {
        return Err(Error::config(
            "vit.image_size",
            format!(
                "data is {}×{}×{} but the model takes {}×{}×{}",
                ds.channels, ds.height, ds.width, v.channels, v.image_size, v.image_size
            ),
        ));
    }
    Ok(ds)
}

fn provenance_map(cfg: &ExperimentConfig) -> BTreeMap<String, String> {
    cfg.entries()
}

fn load_backbone(cfg: &ExperimentConfig) -> Result<VitModel<f32>> {
    let m: VitModel<f32> = checkpoint::load_checkpoint(&cfg.paths.backbone)?;
    if m.peft_method() != PeftMethod::None {
        return Err(Error::Checkpoint(format!(
            "{} carries `{}` state; a backbone must be a plain model",
            cfg.paths.backbone.display(),
            m.peft_method()
        )));
    }
    Ok(m)
}

/// The model to certify: the backbone alone for `peft.method = none`, the
/// fine-tuned checkpoint otherwise.
pub fn load_model(cfg: &ExperimentConfig) -> Result<VitModel<f32>> {
    if cfg.peft.method == PeftMethod::None {
        return load_backbone(cfg);
    }
    let manifest = checkpoint::read_manifest(&cfg.paths.checkpoint)?;
    let method = manifest.peft_config.as_ref().map_or(PeftMethod::None, |p| p.method);
    if method != cfg.peft.method {
        return Err(Error::config(
            "peft.method",
            format!("{} holds a `{method}` model, configuration asks for `{}`", cfg.paths.checkpoint.display(), cfg.peft.method),
        ));
    }
    match manifest.kind {
        CheckpointKind::Full => checkpoint::load_checkpoint(&cfg.paths.checkpoint),
        CheckpointKind::Peft => checkpoint::load_peft_checkpoint(&cfg.paths.checkpoint, load_backbone(cfg)?),
    }
}

/// Trained and adapted parameter counts of a configuration, computed from a
/// freshly built model of that shape.
pub fn parameter_counts(vit: &VitConfig, peft_config: &PeftConfig) -> Result<(usize, usize)> {
    if peft_config.method == PeftMethod::None {
        return Ok((0, 0));
    }
    let model = peft::attach(VitModel::<f32>::new(vit.clone(), 0)?, peft_config, 0)?;
    Ok((model.count_parameters(true), peft_config.delta_parameter_count(vit.embed_dim, vit.depth)))
}

/// Short human label such as `lora r=4 σ=0.25`.
pub fn describe(cfg: &ExperimentConfig) -> String {
    let p = &cfg.peft;
    let method = match p.method {
        PeftMethod::Lora => format!("lora r={}", p.rank),
        PeftMethod::Prompt => format!("prompt p={}", p.prompt_length),
        PeftMethod::Adapter => format!("adapter m={}", p.adapter_bottleneck),
        PeftMethod::Full => "full".to_string(),
        PeftMethod::None => "base".to_string(),
    };
    let method = if cfg.certify.decorated { "blackbox".to_string() } else { method };
    format!("{method} σ={}", cfg.smoothing.sigma)
}

fn artifact(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    cfg.out.join(name)
}

fn ensure_parent(p: &Path) -> Result<()> {
    if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d)?;
    }
    Ok(())
}

fn pretrain(cfg: &ExperimentConfig) -> Result<Outcome> {
    let ds = load_split(cfg, Split::Train)?;
    if ds.num_classes != cfg.vit.num_classes {
        return Err(Error::config(
            "vit.num_classes",
            format!("the training data has {} classes", ds.num_classes),
        ));
    }
    let mut model = VitModel::<f32>::new(cfg.vit.clone(), cfg.seed)?;
    let tc = TrainConfig {
        mode: TrainMode::CleanPretrain,
        epochs: cfg.pretrain.epochs,
        learning_rate: cfg.pretrain.learning_rate,
        ..cfg.train.clone()
    };
    let trace = train::train(&mut model, &ds, &tc)?;
    model.freeze();
    ensure_parent(&cfg.paths.backbone)?;
    checkpoint::save_with_provenance(&model, &cfg.paths.backbone, provenance_map(cfg))?;
    let loss = artifact(cfg, "pretrain_loss.csv");
    train::write_loss_csv(&loss, &trace, &cfg.provenance())?;
    let last = trace.last();
    Ok(Outcome {
        artifacts: vec![cfg.paths.backbone.clone(), loss],
        summary: vec![format!(
            "pretrained on {} examples: final loss {:.4}, clean accuracy {:.3}",
            ds.len(),
            last.map_or(f64::NAN, |e| e.mean_loss),
            last.map_or(f64::NAN, |e| e.clean_acc)
        )],
    })
}

fn finetune(cfg: &ExperimentConfig) -> Result<Outcome> {
    if cfg.peft.method == PeftMethod::None {
        return Err(Error::config("peft.method", "finetune needs lora, adapter, prompt or full"));
    }
    let backbone = load_backbone(cfg)?;
    let ds = load_split(cfg, Split::Train)?;
    let (model, trace) = if cfg.train.mode == TrainMode::JointAdapt {
        train::joint_adapt(backbone, &ds, &cfg.peft, &cfg.train)?
    } else {
        let mut m = backbone;
        if ds.num_classes != m.config.num_classes {
            m.reset_head(ds.num_classes, cfg.seed)?;
        }
        let mut m = peft::attach(m, &cfg.peft, cfg.seed)?;
        let trace = train::train(&mut m, &ds, &cfg.train)?;
        (m, trace)
    };
    ensure_parent(&cfg.paths.checkpoint)?;
    checkpoint::save_with_provenance(&model, &cfg.paths.checkpoint, provenance_map(cfg))?;
    let loss = artifact(cfg, "finetune_loss.csv");
    train::write_loss_csv(&loss, &trace, &cfg.provenance())?;
    let last = trace.last();
    Ok(Outcome {
        artifacts: vec![cfg.paths.checkpoint.clone(), loss],
        summary: vec![format!(
            "{} on {} examples, {} trained parameters: final loss {:.4}, noisy accuracy {:.3}",
            describe(cfg),
            ds.len(),
            model.count_parameters(true),
            last.map_or(f64::NAN, |e| e.mean_loss),
            last.map_or(f64::NAN, |e| e.noisy_acc)
        )],
    })
}

#[derive(Serialize, Deserialize)]
struct CoordinatorFile {
    provenance: BTreeMap<String, String>,
    coordinator: CoordinatorState,
}

fn load_coordinator(cfg: &ExperimentConfig, backbone: &VitModel<f32>) -> Result<Coordinator> {
    let p = &cfg.paths.coordinator;
    let text = fs::read_to_string(p).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", p.display())))?;
    let file: CoordinatorFile =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", p.display())))?;
    Coordinator::from_state(backbone, file.coordinator)
}

fn certify_run(cfg: &ExperimentConfig) -> CertifyRun {
    CertifyRun {
        seed: cfg.seed,
        skip: cfg.certify.skip,
        max: cfg.certify.max,
        workers: cfg.certify.workers,
        provenance: cfg.provenance(),
    }
}

fn certify(cfg: &ExperimentConfig) -> Result<Outcome> {
    let ds = load_split(cfg, Split::Test)?;
    ensure_parent(&cfg.paths.results)?;
    let run = certify_run(cfg);
    let rows = if cfg.certify.decorated {
        let backbone = load_backbone(cfg)?;
        let coordinator = load_coordinator(cfg, &backbone)?;
        let decorated = Decorated { coordinator: &coordinator, oracle: &backbone };
        let painted = Dataset { images: decorated.paint(&ds.images, ds.len())?, ..ds.clone() };
        certify_dataset(&decorated, &painted, &cfg.smoothing, &run, &cfg.paths.results)?
    } else {
        let model = load_model(cfg)?;
        certify_dataset(&model, &ds, &cfg.smoothing, &run, &cfg.paths.results)?
    };
    let curve = CertifiedAccuracyCurve::from_rows("", &rows, &[0.0], 0, 0);
    Ok(Outcome {
        artifacts: vec![cfg.paths.results.clone()],
        summary: vec![format!(
            "{}: {} examples, certified accuracy at r=0 {:.3}, abstain rate {:.3}",
            describe(cfg),
            rows.len(),
            curve.accuracy[0],
            curve.abstain_rate
        )],
    })
}

pub const PREDICT_HEADER: &str = "idx\tlabel\tpredict\tcorrect\ttime";

fn predict(cfg: &ExperimentConfig) -> Result<Outcome> {
    let ds = load_split(cfg, Split::Test)?;
    let model = load_model(cfg)?;
    let bound = cfg.certify.max.unwrap_or(usize::MAX).min(ds.len());
    let idx: Vec<usize> = (0..bound).step_by(cfg.certify.skip).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.certify.workers)
        .build()
        .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
    let rows: Vec<Result<(usize, Option<usize>, std::time::Duration)>> = pool.install(|| {
        idx.par_iter()
            .map(|&i| {
                let t = Instant::now();
                let p = smoothing::predict(&model, ds.image(i), &cfg.smoothing, cfg.seed, i as u64)?;
                Ok((i, p, t.elapsed()))
            })
            .collect()
    });
    let mut text = String::new();
    for (k, v) in cfg.provenance() {
        text.push_str(&format!("# {k}={v}\n"));
    }
    text.push_str(PREDICT_HEADER);
    text.push('\n');
    let (mut correct, mut abstained) = (0, 0);
    for r in rows {
        let (i, p, t) = r?;
        let ok = p == Some(ds.labels[i]);
        correct += ok as usize;
        abstained += p.is_none() as usize;
        let shown = p.map_or(-1, |c| c as i64);
        text.push_str(&format!("{i}\t{}\t{shown}\t{}\t{}\n", ds.labels[i], ok as u8, iso_duration(t)));
    }
    let path = artifact(cfg, "predictions.tsv");
    fs::write(&path, text)?;
    let n = idx.len().max(1) as f64;
    Ok(Outcome {
        artifacts: vec![path],
        summary: vec![format!(
            "{}: {} examples, accuracy {:.3}, abstain rate {:.3}",
            describe(cfg),
            idx.len(),
            correct as f64 / n,
            abstained as f64 / n
        )],
    })
}

fn spsa_train(cfg: &ExperimentConfig) -> Result<Outcome> {
    let backbone = load_backbone(cfg)?;
    let train_ds = load_split(cfg, Split::Train)?;
    let test_ds = load_split(cfg, Split::Test)?;
    let mut coordinator = Coordinator::new(&backbone, cfg.spsa.epsilon, cfg.seed)?;
    let sc = SpsaConfig {
        sigma: cfg.smoothing.sigma,
        steps: cfg.spsa.steps,
        batch_size: cfg.spsa.batch_size,
        seed: cfg.seed,
        retries: cfg.spsa.retries,
    };
    let oracle = blackbox::CountingOracle::new(&backbone);
    let trace = blackbox::spsa_train(&mut coordinator, &oracle, &train_ds, &cfg.spsa.schedule, &sc)?;

    ensure_parent(&cfg.paths.coordinator)?;
    let file = CoordinatorFile { provenance: provenance_map(cfg), coordinator: coordinator.state() };
    fs::write(&cfg.paths.coordinator, serde_json::to_string_pretty(&file)?)?;
    let loss = artifact(cfg, "spsa_loss.csv");
    let mut text = String::new();
    for (k, v) in cfg.provenance() {
        text.push_str(&format!("# {k}={v}\n"));
    }
    text.push_str("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        text.push_str(&format!("{},{l:.6}\n", i + 1));
    }
    fs::write(&loss, text)?;

    let mut plain = coordinator.clone();
    plain.epsilon = 0.0;
    let before = blackbox::evaluate_decorated(&plain, &backbone, &test_ds, cfg.smoothing.sigma, cfg.seed)?;
    let after = blackbox::evaluate_decorated(&coordinator, &backbone, &test_ds, cfg.smoothing.sigma, cfg.seed)?;
    Ok(Outcome {
        artifacts: vec![cfg.paths.coordinator.clone(), loss],
        summary: vec![format!(
            "{} SPSA steps, {} oracle queries: noisy accuracy {before:.3} undecorated, {after:.3} decorated",
            cfg.spsa.steps,
            oracle.queries()
        )],
    })
}

/// Builds the curve from the results file alone; checkpoints are not read.
fn report(cfg: &ExperimentConfig) -> Result<(Outcome, CertifiedAccuracyCurve)> {
    let (meta, rows) = read_results(&cfg.paths.results)?;
    let source = ExperimentConfig::from_pairs(&meta).ok();
    let (trained, adapted) = match &source {
        Some(s) => parameter_counts(&s.vit, &s.peft)?,
        None => (0, 0),
    };
    let label = cfg
        .report
        .label
        .clone()
        .unwrap_or_else(|| source.as_ref().map_or_else(|| "results".to_string(), describe));
    let grid = radii_grid(cfg.report.radius_max, cfg.report.radius_step);
    let curve = CertifiedAccuracyCurve::from_rows(label, &rows, &grid, trained, adapted);
    curve.validate()?;
    let csv = artifact(cfg, "curve.csv");
    let dat = artifact(cfg, "curve.dat");
    let mut prov = cfg.provenance();
    prov.push(("source".into(), cfg.paths.results.display().to_string()));
    fs::write(&csv, curve.to_csv(&prov))?;
    fs::write(&dat, curve.to_plot_data())?;
    let out = Outcome {
        artifacts: vec![csv, dat],
        summary: vec![format!(
            "{}: clean {:.3}, certified at r=0.5 {:.3}, r=1.0 {:.3}, abstain {:.3}",
            curve.label,
            curve.clean_accuracy,
            curve.at(0.5),
            curve.at(1.0),
            curve.abstain_rate
        )],
    };
    Ok((out, curve))
}

/// Fine-tunes, certifies and reports once per swept value, then writes the
/// comparison table to `sweep.csv`.
fn sweep(cfg: &ExperimentConfig) -> Result<Outcome> {
    let (param, values) = cfg.sweep()?;
    if !cfg.paths.backbone.exists() {
        return Err(Error::Checkpoint(format!(
            "backbone {} not found; run pretrain first",
            cfg.paths.backbone.display()
        )));
    }
    let mut outcome = Outcome::default();
    let mut curves = Vec::new();
    for v in values {
        let name = param.key().trim_start_matches("peft.");
        let mut sub = cfg.with_out(&cfg.out.join("sweep").join(format!("{name}-{v}")));
        match param {
            SweepParam::Rank => sub.peft.rank = v,
            SweepParam::PromptLength => sub.peft.prompt_length = v,
            SweepParam::AdapterBottleneck => sub.peft.adapter_bottleneck = v,
        }
        sub.validate()?;
        fs::create_dir_all(&sub.out)?;
        outcome.merge(finetune(&sub)?);
        outcome.merge(certify(&sub)?);
        let (o, curve) = report(&sub)?;
        outcome.merge(o);
        curves.push(curve);
    }
    let table = compare(&curves)?;
    let path = artifact(cfg, "sweep.csv");
    fs::write(&path, table.to_csv(&cfg.provenance()))?;
    outcome.artifacts.push(path);
    Ok(outcome)
}

fn compare_files(cfg: &ExperimentConfig, inputs: &[PathBuf]) -> Result<Outcome> {
    if inputs.is_empty() {
        return Err(Error::config("inputs", "compare needs at least one curve file"));
    }
    let curves = inputs
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
            CertifiedAccuracyCurve::from_csv(&text)
        })
        .collect::<Result<Vec<_>>>()?;
    let table = compare(&curves)?;
    let path = artifact(cfg, "compare.csv");
    let mut prov = cfg.provenance();
    for (i, p) in inputs.iter().enumerate() {
        prov.push((format!("input.{i}"), p.display().to_string()));
    }
    fs::write(&path, table.to_csv(&prov))?;
    Ok(Outcome { artifacts: vec![path], summary: vec![format!("compared {} curves", curves.len())] })
}
