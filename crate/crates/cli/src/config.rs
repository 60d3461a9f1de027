//! Flat `key = value` configuration. Every key is declared once in [`KEYS`]
//! with its default; files and `--set` overrides may only use declared keys.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mmda_core::datasets::SynthConfig;
use mmda_core::evaluation::AblationParameter;
use mmda_core::imaging::AugmentConfig;
use mmda_core::training::{AdamConfig, TrainConfig};

use crate::CliError;

pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key { name, default, help }
}

pub const KEYS: &[Key] = &[
    key("lambda", "0.1", "weight of the unlabeled entropy term"),
    key("temperature", "0.05", "softmax temperature of the cosine head"),
    key(
        "shots",
        "3",
        "labeled target samples per class (K); as many again are held out for validation",
    ),
    key(
        "batch_size",
        "12",
        "labeled samples per batch, half source and half target (even)",
    ),
    key(
        "unlabeled_per_batch",
        "auto",
        "unlabeled target samples per batch; auto = batch_size",
    ),
    key("lr0", "0.0001", "initial learning rate"),
    key("decay_rate", "0.001", "learning-rate decay rate"),
    key("decay_power", "0.75", "learning-rate decay exponent"),
    key("batch_budget", "400", "training batches"),
    key("validation_interval", "10", "batches between validation passes"),
    key("seed", "0", "master seed; every random stream derives from it"),
    key("num_classes", "2", "number of classes"),
    key("channels", "3", "input planes; grayscale images are replicated"),
    key("encoder", "desk", "encoder: desk (small CNN) or linear"),
    key("widths", "16,32,64", "desk encoder block widths"),
    key("linear_dim", "64", "feature size of the linear encoder"),
    key("normalize_prototypes", "false", "also L2-normalize the prototype rows"),
    key("adam_beta1", "0.9", "Adam first-moment decay"),
    key("adam_beta2", "0.999", "Adam second-moment decay"),
    key("adam_eps", "1e-8", "Adam denominator guard"),
    key("flip_probability", "0.5", "augmentation: horizontal flip probability"),
    key("scale_low", "0.8", "augmentation: smallest zoom factor"),
    key("scale_high", "1.2", "augmentation: largest zoom factor"),
    key("stop_after", "none", "train: stop once this many batches are done"),
    key(
        "resume",
        "false",
        "train: continue from the checkpoints in the output directory",
    ),
    key("source_manifest", "", "source-domain manifest (path,label,domain)"),
    key("target_manifest", "", "target-domain manifest"),
    key("out", "mmda-out", "output directory"),
    key("side", "256", "prep: canonical image side"),
    key("prep_domain", "source", "prep: domain written to the manifest"),
    key("checkpoint", "", "eval: checkpoint file; empty = <out>/best.ckpt"),
    key(
        "eval_manifest",
        "",
        "eval: labeled records to score; empty = target_manifest",
    ),
    key("synth_per_class", "100", "synth: images per class and domain"),
    key("synth_shift", "0.3", "synth: target brightness shift"),
    key("synth_side", "32", "synth: image side"),
    key("synth_noise", "0.03", "synth: pixel noise level"),
    key(
        "scenarios",
        "",
        "scenarios: CSV of name,source,target; empty = synthesize four",
    ),
    key("scenario_shots", "3,5,10", "scenarios: K values"),
    key("scenario_repeats", "5", "scenarios: seeds per cell"),
    key("ablation_parameter", "lambda", "ablate: lambda or temperature"),
    key(
        "ablation_values",
        "0.001,0.005,0.01,0.1,0.2,0.5,1.0",
        "ablate: values to sweep",
    ),
    key(
        "gradcheck_instances",
        "20",
        "gradcheck: random instances, half desk and half raw",
    ),
    key("gradcheck_side", "8", "gradcheck: image side of desk instances"),
    key("gradcheck_dim", "8", "gradcheck: feature size of raw instances"),
    key("gradcheck_delta", "1e-4", "gradcheck: finite-difference step"),
    key("gradcheck_tolerance", "1e-4", "gradcheck: relative error tolerance"),
    key("log_level", "warn", "error, warn, info, debug or trace"),
];

/// Help block listing every key with its default.
pub fn keys_help() -> String {
    let width = KEYS.iter().map(|k| k.name.len()).max().unwrap_or(0);
    let mut out = String::from("Configuration keys (file: key = value; flags: --set key=value):\n");
    for k in KEYS {
        let default = if k.default.is_empty() { "\"\"" } else { k.default };
        let _ = writeln!(out, "  {:<width$}  {:<32}  {}", k.name, default, k.help);
    }
    out
}

/// Resolved key values. Precedence: flags, then the file, then defaults.
#[derive(Clone, Debug)]
pub struct Config {
    values: BTreeMap<&'static str, String>,
    /// Keys whose value came from the file at `origin`.
    from_file: BTreeSet<&'static str>,
    origin: PathBuf,
}

fn declared(name: &str) -> Result<&'static Key, CliError> {
    KEYS.iter()
        .find(|k| k.name == name)
        .ok_or_else(|| CliError::Usage(format!("unknown config key {name:?}")))
}

fn split_pair(text: &str) -> Option<(&str, &str)> {
    let (k, v) = text.split_once('=')?;
    Some((k.trim(), v.trim()))
}

impl Default for Config {
    fn default() -> Self {
        Config {
            values: KEYS.iter().map(|k| (k.name, k.default.to_string())).collect(),
            from_file: BTreeSet::new(),
            origin: PathBuf::new(),
        }
    }
}

impl Config {
    /// Reads a config file. Relative manifest and output paths in it are
    /// taken relative to the file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
        let mut cfg = Config::default();
        cfg.origin = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = split_pair(line)
                .ok_or_else(|| CliError::Usage(format!("{}:{}: expected key = value", path.display(), n + 1)))?;
            cfg.set(k, v)
                .map_err(|e| CliError::Usage(format!("{}:{}: {e}", path.display(), n + 1)))?;
            cfg.from_file.insert(declared(k)?.name);
        }
        Ok(cfg)
    }

    pub fn set(&mut self, name: &str, value: &str) -> Result<(), CliError> {
        let k = declared(name)?;
        self.values.insert(k.name, value.to_string());
        self.from_file.remove(k.name);
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = split_pair(pair).ok_or_else(|| CliError::Usage(format!("expected key=value, got {pair:?}")))?;
        self.set(k, v)
    }

    pub fn raw(&self, name: &str) -> &str {
        self.values.get(name).map(String::as_str).expect("declared key")
    }

    pub fn get<T: FromStr>(&self, name: &str) -> Result<T, CliError> {
        let raw = self.raw(name);
        raw.parse()
            .map_err(|_| CliError::Usage(format!("invalid value {raw:?} for {name}")))
    }

    fn list<T: FromStr>(&self, name: &str) -> Result<Vec<T>, CliError> {
        self.raw(name)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| CliError::Usage(format!("invalid entry {s:?} in {name}")))
            })
            .collect()
    }

    fn optional<T: FromStr>(&self, name: &str, none: &str) -> Result<Option<T>, CliError> {
        if self.raw(name) == none {
            Ok(None)
        } else {
            self.get(name).map(Some)
        }
    }

    /// A path key; empty means unset. Relative values from a file resolve
    /// against the file's directory, others against the working directory.
    pub fn path(&self, name: &str) -> Option<PathBuf> {
        let raw = self.raw(name);
        if raw.is_empty() {
            return None;
        }
        let p = PathBuf::from(raw);
        Some(if self.from_file.contains(name) {
            self.origin.join(p)
        } else {
            p
        })
    }

    pub fn require_path(&self, name: &str) -> Result<PathBuf, CliError> {
        self.path(name)
            .ok_or_else(|| CliError::Usage(format!("{name} is required for this command")))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.path("out").unwrap_or_else(|| PathBuf::from("mmda-out"))
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let cfg = TrainConfig {
            lambda: self.get("lambda")?,
            temperature: self.get("temperature")?,
            shots: self.get("shots")?,
            batch_size: self.get("batch_size")?,
            unlabeled_per_batch: self.optional("unlabeled_per_batch", "auto")?,
            lr0: self.get("lr0")?,
            decay_rate: self.get("decay_rate")?,
            decay_power: self.get("decay_power")?,
            batch_budget: self.get("batch_budget")?,
            validation_interval: self.get("validation_interval")?,
            seed: self.get("seed")?,
            num_classes: self.get("num_classes")?,
            channels: self.get("channels")?,
            encoder: self.raw("encoder").to_string(),
            widths: self.list("widths")?,
            linear_dim: self.get("linear_dim")?,
            normalize_prototypes: self.get("normalize_prototypes")?,
            augment: AugmentConfig {
                flip_probability: self.get("flip_probability")?,
                scale_low: self.get("scale_low")?,
                scale_high: self.get("scale_high")?,
            },
            adam: AdamConfig {
                beta1: self.get("adam_beta1")?,
                beta2: self.get("adam_beta2")?,
                eps: self.get("adam_eps")?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn stop_after(&self) -> Result<Option<u64>, CliError> {
        self.optional("stop_after", "none")
    }

    pub fn synth(&self) -> Result<SynthConfig, CliError> {
        let cfg = SynthConfig {
            per_class: self.get("synth_per_class")?,
            shift: self.get("synth_shift")?,
            side: self.get("synth_side")?,
            noise: self.get("synth_noise")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn scenario_shots(&self) -> Result<Vec<usize>, CliError> {
        self.list("scenario_shots")
    }

    pub fn ablation(&self) -> Result<(AblationParameter, Vec<f64>), CliError> {
        Ok((self.get("ablation_parameter")?, self.list("ablation_values")?))
    }
}
