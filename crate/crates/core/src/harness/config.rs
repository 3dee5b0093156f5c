//! Experiment configuration.
//!
//! Files are plain text, one `key = value` per line, with dotted section
//! paths (`smoothing.sigma = 0.25`). A `[section]` line prefixes the keys that
//! follow it. `#` starts a comment. Command-line overrides are applied on top
//! of the file, and the fully resolved configuration is what every artifact
//! records.

use crate::blackbox::SpsaSchedule;
use crate::data::{DataFormat, DeskFamily};
use crate::error::{Error, Result};
use crate::peft::{PeftConfig, PeftMethod};
use crate::smoothing::SmoothingParams;
use crate::train::{TrainConfig, TrainMode};
use crate::vit::VitConfig;
use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Where the images come from.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub format: DataFormat,
    /// Training split file or directory (file formats only).
    pub train: Option<PathBuf>,
    /// Test split file or directory (file formats only).
    pub test: Option<PathBuf>,
    pub family: DeskFamily,
    pub train_count: usize,
    pub test_count: usize,
    /// Seeded subset size applied to each loaded split; 0 keeps everything.
    pub subset: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            format: DataFormat::Desk,
            train: None,
            test: None,
            family: DeskFamily::Gratings,
            train_count: 2000,
            test_count: 500,
            subset: 2000,
        }
    }
}

/// Settings of the clean backbone pretraining; batch size and optimizer come
/// from the `train` section.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 15, learning_rate: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CertifyConfig {
    pub skip: usize,
    pub max: Option<usize>,
    /// Worker threads. Results do not depend on it, so it is left out of the
    /// recorded provenance.
    pub workers: usize,
    /// Certify the coordinator-decorated backbone instead of the model.
    pub decorated: bool,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        CertifyConfig { skip: 1, max: None, workers: 1, decorated: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpsaSection {
    pub schedule: SpsaSchedule,
    pub steps: usize,
    pub batch_size: usize,
    pub epsilon: f64,
    pub retries: u32,
}

impl Default for SpsaSection {
    fn default() -> Self {
        let c = crate::blackbox::SpsaConfig::default();
        SpsaSection {
            schedule: SpsaSchedule::default(),
            steps: c.steps,
            batch_size: c.batch_size,
            epsilon: 0.3,
            retries: c.retries,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportConfig {
    pub radius_max: f64,
    pub radius_step: f64,
    pub label: Option<String>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig { radius_max: 2.0, radius_step: 0.05, label: None }
    }
}

/// The PEFT hyper-parameter a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Rank,
    PromptLength,
    AdapterBottleneck,
}

impl SweepParam {
    pub fn key(self) -> &'static str {
        match self {
            SweepParam::Rank => "peft.rank",
            SweepParam::PromptLength => "peft.prompt_length",
            SweepParam::AdapterBottleneck => "peft.adapter_bottleneck",
        }
    }

    pub fn for_method(method: PeftMethod) -> Option<Self> {
        match method {
            PeftMethod::Lora => Some(SweepParam::Rank),
            PeftMethod::Prompt => Some(SweepParam::PromptLength),
            PeftMethod::Adapter => Some(SweepParam::AdapterBottleneck),
            PeftMethod::Full | PeftMethod::None => None,
        }
    }

    pub fn default_values(self) -> Vec<usize> {
        match self {
            SweepParam::Rank => vec![1, 2, 4, 8],
            SweepParam::PromptLength => vec![10, 50, 100, 200],
            SweepParam::AdapterBottleneck => vec![8, 16, 32, 64],
        }
    }
}

/// Artifact locations. Relative defaults are resolved against the output
/// directory when the configuration is built.
#[derive(Clone, Debug, PartialEq)]
pub struct Paths {
    pub backbone: PathBuf,
    pub checkpoint: PathBuf,
    pub coordinator: PathBuf,
    pub results: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub vit: VitConfig,
    pub peft: PeftConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub smoothing: SmoothingParams,
    pub certify: CertifyConfig,
    pub spsa: SpsaSection,
    pub report: ReportConfig,
    pub sweep_values: Option<Vec<usize>>,
    pub paths: Paths,
    pub out: PathBuf,
    pub seed: u64,
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_enum<V: FromStr<Err = Error>>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|e| match e {
        Error::Config { message, .. } => Error::config(key, message),
        other => other,
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{value}`"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    let v: Vec<usize> = value.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?;
    if v.is_empty() {
        return Err(Error::config(key, "needs at least one value"));
    }
    Ok(v)
}

fn opt_path(v: &Option<PathBuf>) -> String {
    v.as_ref().map_or_else(String::new, |p| p.display().to_string())
}

/// Parses `key = value` text into ordered pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    let mut section = String::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}", n + 1), format!("expected key = value, got `{line}`")))?;
        let k = k.trim();
        let key = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
        if out.iter().any(|(existing, _)| *existing == key) {
            return Err(Error::config(key, format!("set twice (line {})", n + 1)));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

impl ExperimentConfig {
    /// Builds the configuration from defaults, then `file` (if any), then
    /// `overrides`, and validates it.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = match file {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::config("--config", format!("{}: {e}", p.display())))?;
                parse_pairs(&text)?
            }
            None => Vec::new(),
        };
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(&pairs)
    }

    /// Applies `pairs` in order (later wins) on top of the defaults.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut b = Builder::default();
        for (k, v) in pairs {
            b.set(k, v)?;
        }
        let cfg = b.finish();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.peft.validate()?;
        self.train.validate()?;
        if !(self.pretrain.learning_rate >= 0.0 && self.pretrain.learning_rate.is_finite()) {
            return Err(Error::config("pretrain.lr", "must be ≥ 0"));
        }
        self.smoothing.validate()?;
        self.spsa.schedule.validate()?;
        if !(0.0..=1.0).contains(&self.spsa.epsilon) {
            return Err(Error::config("spsa.epsilon", "must lie in [0,1]"));
        }
        if self.spsa.batch_size == 0 {
            return Err(Error::config("spsa.batch_size", "must be ≥ 1"));
        }
        if self.certify.skip == 0 {
            return Err(Error::config("certify.skip", "must be ≥ 1"));
        }
        if self.certify.workers == 0 {
            return Err(Error::config("certify.workers", "must be ≥ 1"));
        }
        if !(self.report.radius_step > 0.0) || !(self.report.radius_max >= 0.0) {
            return Err(Error::config("report.radius_step", "grid needs step > 0 and max ≥ 0"));
        }
        if self.data.format == DataFormat::Desk {
            if self.data.train_count == 0 || self.data.test_count == 0 {
                return Err(Error::config("data.train_count", "desk splits need at least one example"));
            }
            if self.vit.channels != 3 {
                return Err(Error::config("vit.channels", "desk images have 3 channels"));
            }
        }
        if let Some(v) = &self.sweep_values {
            if v.contains(&0) {
                return Err(Error::config("sweep.values", "values must be ≥ 1"));
            }
        }
        Ok(())
    }

    /// The resolved configuration as sorted `key → value` pairs; feeding them
    /// back through [`ExperimentConfig::from_pairs`] reproduces `self`.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("seed", self.seed.to_string());
        put("out", self.out.display().to_string());
        put("data.format", self.data.format.to_string());
        put("data.train", opt_path(&self.data.train));
        put("data.test", opt_path(&self.data.test));
        put("data.family", self.data.family.to_string());
        put("data.train_count", self.data.train_count.to_string());
        put("data.test_count", self.data.test_count.to_string());
        put("data.subset", self.data.subset.to_string());
        let v = &self.vit;
        put("vit.image_size", v.image_size.to_string());
        put("vit.channels", v.channels.to_string());
        put("vit.patch_size", v.patch_size.to_string());
        put("vit.embed_dim", v.embed_dim.to_string());
        put("vit.num_heads", v.num_heads.to_string());
        put("vit.depth", v.depth.to_string());
        put("vit.mlp_ratio", v.mlp_ratio.to_string());
        put("vit.num_classes", v.num_classes.to_string());
        let p = &self.peft;
        put("peft.method", p.method.to_string());
        put("peft.rank", p.rank.to_string());
        put("peft.lora_alpha", p.lora_alpha.map_or_else(String::new, |a| a.to_string()));
        put("peft.adapter_bottleneck", p.adapter_bottleneck.to_string());
        put("peft.adapter_activation", p.adapter_activation.to_string());
        put("peft.prompt_length", p.prompt_length.to_string());
        put("peft.prompt_depth", p.prompt_depth.to_string());
        put("pretrain.epochs", self.pretrain.epochs.to_string());
        put("pretrain.lr", self.pretrain.learning_rate.to_string());
        let t = &self.train;
        put("train.sigma", t.sigma.to_string());
        put("train.epochs", t.epochs.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.lr", t.learning_rate.to_string());
        put("train.optimizer", t.optimizer.to_string());
        put("train.mode", t.mode.to_string());
        put("train.eval_examples", t.eval_examples.to_string());
        let s = &self.smoothing;
        put("smoothing.sigma", s.sigma.to_string());
        put("smoothing.n0", s.n0.to_string());
        put("smoothing.n", s.n.to_string());
        put("smoothing.alpha", s.alpha.to_string());
        put("smoothing.batch", s.batch.to_string());
        put("certify.skip", self.certify.skip.to_string());
        put("certify.max", self.certify.max.map_or_else(String::new, |m| m.to_string()));
        put("certify.decorated", self.certify.decorated.to_string());
        let sp = &self.spsa;
        put("spsa.a", sp.schedule.a.to_string());
        put("spsa.big_a", sp.schedule.big_a.to_string());
        put("spsa.alpha", sp.schedule.alpha.to_string());
        put("spsa.c", sp.schedule.c.to_string());
        put("spsa.gamma", sp.schedule.gamma.to_string());
        put("spsa.beta", sp.schedule.beta.to_string());
        put("spsa.steps", sp.steps.to_string());
        put("spsa.batch_size", sp.batch_size.to_string());
        put("spsa.epsilon", sp.epsilon.to_string());
        put("spsa.retries", sp.retries.to_string());
        put("report.radius_max", self.report.radius_max.to_string());
        put("report.radius_step", self.report.radius_step.to_string());
        put("report.label", self.report.label.clone().unwrap_or_default());
        put(
            "sweep.values",
            self.sweep_values.as_ref().map_or_else(String::new, |v| {
                v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
            }),
        );
        put("paths.backbone", self.paths.backbone.display().to_string());
        put("paths.checkpoint", self.paths.checkpoint.display().to_string());
        put("paths.coordinator", self.paths.coordinator.display().to_string());
        put("paths.results", self.paths.results.display().to_string());
        m
    }

    /// Entries as ordered pairs, the form artifacts embed.
    pub fn provenance(&self) -> Vec<(String, String)> {
        self.entries().into_iter().collect()
    }

    /// `key=value` text that [`ExperimentConfig::load`] reads back.
    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// A copy writing into `out`, with every output path that defaulted to
    /// the old directory moved along and the backbone left where it is.
    pub fn with_out(&self, out: &Path) -> Self {
        let mut c = self.clone();
        let moved = |p: &Path| -> PathBuf {
            match p.strip_prefix(&self.out) {
                Ok(rel) => out.join(rel),
                Err(_) => p.to_path_buf(),
            }
        };
        c.paths.checkpoint = moved(&self.paths.checkpoint);
        c.paths.coordinator = moved(&self.paths.coordinator);
        c.paths.results = moved(&self.paths.results);
        c.out = out.to_path_buf();
        c
    }

    /// The sweep axis and its values for this configuration.
    pub fn sweep(&self) -> Result<(SweepParam, Vec<usize>)> {
        let param = SweepParam::for_method(self.peft.method).ok_or_else(|| {
            Error::config("peft.method", format!("a sweep needs lora, prompt or adapter, not `{}`", self.peft.method))
        })?;
        Ok((param, self.sweep_values.clone().unwrap_or_else(|| param.default_values())))
    }
}

#[derive(Default)]
struct Builder {
    cfg: Option<ExperimentConfig>,
    lr_set: bool,
    paths: BTreeMap<&'static str, PathBuf>,
}

impl Builder {
    fn cfg(&mut self) -> &mut ExperimentConfig {
        self.cfg.get_or_insert_with(|| ExperimentConfig {
            data: DataConfig::default(),
            vit: VitConfig::default(),
            peft: PeftConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            smoothing: SmoothingParams::default(),
            certify: CertifyConfig::default(),
            spsa: SpsaSection::default(),
            report: ReportConfig::default(),
            sweep_values: None,
            paths: Paths {
                backbone: PathBuf::new(),
                checkpoint: PathBuf::new(),
                coordinator: PathBuf::new(),
                results: PathBuf::new(),
            },
            out: PathBuf::from("out"),
            seed: 0,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let empty = value.is_empty();
        let c = self.cfg();
        match key {
            "seed" => c.seed = parse(key, value)?,
            "out" => c.out = PathBuf::from(value),
            "data.format" => c.data.format = parse_enum(key, value)?,
            "data.train" => c.data.train = (!empty).then(|| PathBuf::from(value)),
            "data.test" => c.data.test = (!empty).then(|| PathBuf::from(value)),
            "data.family" => c.data.family = parse_enum(key, value)?,
            "data.train_count" => c.data.train_count = parse(key, value)?,
            "data.test_count" => c.data.test_count = parse(key, value)?,
            "data.subset" => c.data.subset = parse(key, value)?,
            "vit.image_size" => c.vit.image_size = parse(key, value)?,
            "vit.channels" => c.vit.channels = parse(key, value)?,
            "vit.patch_size" => c.vit.patch_size = parse(key, value)?,
            "vit.embed_dim" => c.vit.embed_dim = parse(key, value)?,
            "vit.num_heads" => c.vit.num_heads = parse(key, value)?,
            "vit.depth" => c.vit.depth = parse(key, value)?,
            "vit.mlp_ratio" => c.vit.mlp_ratio = parse(key, value)?,
            "vit.num_classes" => c.vit.num_classes = parse(key, value)?,
            "peft.method" => c.peft.method = parse_enum(key, value)?,
            "peft.rank" => c.peft.rank = parse(key, value)?,
            "peft.lora_alpha" => c.peft.lora_alpha = if empty { None } else { Some(parse(key, value)?) },
            "peft.adapter_bottleneck" => c.peft.adapter_bottleneck = parse(key, value)?,
            "peft.adapter_activation" => c.peft.adapter_activation = parse_enum(key, value)?,
            "peft.prompt_length" => c.peft.prompt_length = parse(key, value)?,
            "peft.prompt_depth" => c.peft.prompt_depth = parse_enum(key, value)?,
            "pretrain.epochs" => c.pretrain.epochs = parse(key, value)?,
            "pretrain.lr" => c.pretrain.learning_rate = parse(key, value)?,
            "train.sigma" => c.train.sigma = parse(key, value)?,
            "train.epochs" => c.train.epochs = parse(key, value)?,
            "train.batch_size" => c.train.batch_size = parse(key, value)?,
            "train.lr" => {
                c.train.learning_rate = parse(key, value)?;
                self.lr_set = true;
            }
            "train.optimizer" => c.train.optimizer = parse_enum(key, value)?,
            "train.mode" => c.train.mode = parse_enum::<TrainMode>(key, value)?,
            "train.eval_examples" => c.train.eval_examples = parse(key, value)?,
            "smoothing.sigma" => c.smoothing.sigma = parse(key, value)?,
            "smoothing.n0" => c.smoothing.n0 = parse(key, value)?,
            "smoothing.n" => c.smoothing.n = parse(key, value)?,
            "smoothing.alpha" => c.smoothing.alpha = parse(key, value)?,
            "smoothing.batch" => c.smoothing.batch = parse(key, value)?,
            "certify.skip" => c.certify.skip = parse(key, value)?,
            "certify.max" => c.certify.max = if empty { None } else { Some(parse(key, value)?) },
            "certify.workers" => c.certify.workers = parse(key, value)?,
            "certify.decorated" => c.certify.decorated = parse_bool(key, value)?,
            "spsa.a" => c.spsa.schedule.a = parse(key, value)?,
            "spsa.big_a" => c.spsa.schedule.big_a = parse(key, value)?,
            "spsa.alpha" => c.spsa.schedule.alpha = parse(key, value)?,
            "spsa.c" => c.spsa.schedule.c = parse(key, value)?,
            "spsa.gamma" => c.spsa.schedule.gamma = parse(key, value)?,
            "spsa.beta" => c.spsa.schedule.beta = parse(key, value)?,
            "spsa.steps" => c.spsa.steps = parse(key, value)?,
            "spsa.batch_size" => c.spsa.batch_size = parse(key, value)?,
            "spsa.epsilon" => c.spsa.epsilon = parse(key, value)?,
            "spsa.retries" => c.spsa.retries = parse(key, value)?,
            "report.radius_max" => c.report.radius_max = parse(key, value)?,
            "report.radius_step" => c.report.radius_step = parse(key, value)?,
            "report.label" => c.report.label = (!empty).then(|| value.to_string()),
            "sweep.values" => c.sweep_values = if empty { None } else { Some(parse_list(key, value)?) },
            "paths.backbone" | "paths.checkpoint" | "paths.coordinator" | "paths.results" => {
                let name = match key {
                    "paths.backbone" => "backbone",
                    "paths.checkpoint" => "checkpoint",
                    "paths.coordinator" => "coordinator",
                    _ => "results",
                };
                if empty {
                    self.paths.remove(name);
                } else {
                    self.paths.insert(name, PathBuf::from(value));
                }
            }
            _ => return Err(Error::config(key, "unknown configuration key")),
        }
        Ok(())
    }

    fn finish(mut self) -> ExperimentConfig {
        let lr_set = self.lr_set;
        let paths = std::mem::take(&mut self.paths);
        let mut c = self.cfg().clone();
        if !lr_set {
            c.train.learning_rate = TrainConfig::default_learning_rate(c.peft.method);
        }
        c.train.seed = c.seed;
        let pick = |name: &str, default: &str| paths.get(name).cloned().unwrap_or_else(|| c.out.join(default));
        c.paths = Paths {
            backbone: pick("backbone", "backbone.psmc"),
            checkpoint: pick("checkpoint", "finetuned.psmc"),
            coordinator: pick("coordinator", "coordinator.json"),
            results: pick("results", "results.tsv"),
        };
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(s: &[(&str, &str)]) -> Vec<(String, String)> {
        s.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn sections_comments_and_dotted_keys() {
        let text = "seed = 3  # trailing\n\n[smoothing]\nsigma = 0.5\nn = 200\n\npeft.method=lora\n";
        let p = parse_pairs(text).unwrap();
        assert_eq!(p[1], ("smoothing.sigma".to_string(), "0.5".to_string()));
        assert_eq!(p[3], ("smoothing.peft.method".to_string(), "lora".to_string()));
        assert!(parse_pairs("a = 1\na = 2\n").is_err());
        assert!(parse_pairs("no equals sign\n").is_err());
    }

    #[test]
    fn overrides_win_and_entries_round_trip() {
        let c = ExperimentConfig::from_pairs(&pairs(&[
            ("smoothing.sigma", "0.5"),
            ("peft.method", "lora"),
            ("smoothing.sigma", "0.25"),
            ("out", "/tmp/x"),
        ]))
        .unwrap();
        assert_eq!(c.smoothing.sigma, 0.25);
        assert_eq!(c.train.learning_rate, 1e-3);
        assert_eq!(c.paths.backbone, PathBuf::from("/tmp/x/backbone.psmc"));
        let again = ExperimentConfig::from_pairs(&c.provenance()).unwrap();
        assert_eq!(again, c);
        let text = parse_pairs(&c.to_text()).unwrap();
        assert_eq!(ExperimentConfig::from_pairs(&text).unwrap(), c);
    }

    #[test]
    fn errors_name_the_field() {
        let field = |p: &[(&str, &str)]| match ExperimentConfig::from_pairs(&pairs(p)) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected a config error, got {other:?}"),
        };
        assert_eq!(field(&[("smoothing.alpha", "2")]), "smoothing.alpha");
        assert_eq!(field(&[("smoothing.n", "many")]), "smoothing.n");
        assert_eq!(field(&[("peft.method", "dora")]), "peft.method");
        assert_eq!(field(&[("vit.patch_size", "5")]), "vit.patch_size");
        assert_eq!(field(&[("nonsense.key", "1")]), "nonsense.key");
    }

    #[test]
    fn moving_the_output_keeps_an_explicit_backbone() {
        let c = ExperimentConfig::from_pairs(&pairs(&[("out", "a"), ("paths.checkpoint", "/abs/ck.psmc")])).unwrap();
        let d = c.with_out(Path::new("a/sub"));
        assert_eq!(d.paths.backbone, PathBuf::from("a/backbone.psmc"));
        assert_eq!(d.paths.results, PathBuf::from("a/sub/results.tsv"));
        assert_eq!(d.paths.checkpoint, PathBuf::from("/abs/ck.psmc"));
    }
}
