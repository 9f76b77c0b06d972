//! Experiment configuration: a sectioned TOML file plus `key = value` overrides.
//!
//! ```toml
//! [run]
//! name = "quant2"
//! out_dir = "runs"
//!
//! [model]
//! scale = "tiny"          # full | tiny
//! precision = "f32"       # f32 | f64
//!
//! [data]
//! source = "synthetic"    # synthetic | cityscapes
//! height = 64
//! width = 64
//! classes = 4
//!
//! [train]
//! noise = "quant:2"       # none | max-only | quant:<n> | gauss:<snr_db>
//! seed = 1
//!
//! [eval]
//! classes = "default"     # default | all | exclude-background
//! ```
//!
//! Every key has a default (the full-scale training setup), so a file only lists what it
//! changes. Overrides name a key either as `section.key` or, when unambiguous, by its bare
//! name.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSpec, Source};
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::metrics::{EvalClasses, MeanMode};
use crate::nn::{Precision, Scale};
use crate::noise::NoiseSpec;
use crate::optim::AdamConfig;
use crate::pool::PoolPolicy;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub name: String,
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            name: "run".into(),
            out_dir: "runs".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub scale: Scale,
    pub precision: Precision,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            scale: Scale::Full,
            precision: Precision::F32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    Synthetic,
    Cityscapes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: SourceKind,
    /// Cityscapes root; unused for synthetic data.
    pub dir: PathBuf,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Synthetic split sizes.
    pub train_count: usize,
    pub val_count: usize,
    /// Seed of the synthetic scene generator, independent of the training seed.
    pub scene_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: SourceKind::Cityscapes,
            dir: "cityscapes".into(),
            height: 256,
            width: 512,
            classes: 20,
            train_count: 2975,
            val_count: 500,
            scene_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs_total: usize,
    pub epochs_constant_lr: usize,
    pub lr_initial: f64,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub noise: NoiseSpec,
    pub seed: u64,
    pub pool_capacity: usize,
    pub pool_policy: PoolPolicy,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self::from_config(&TrainConfig::default())
    }
}

impl TrainSection {
    fn from_config(c: &TrainConfig) -> Self {
        Self {
            epochs_total: c.epochs_total,
            epochs_constant_lr: c.epochs_constant_lr,
            lr_initial: c.lr_initial,
            batch_size: c.batch_size,
            adam_beta1: c.adam.beta1,
            adam_beta2: c.adam.beta2,
            adam_eps: c.adam.eps,
            weight_decay: c.adam.weight_decay,
            alpha: c.weights.alpha,
            beta: c.weights.beta,
            gamma: c.weights.gamma,
            noise: c.noise,
            seed: c.seed,
            pool_capacity: c.pool_capacity,
            pool_policy: c.pool_policy,
            checkpoint_every: c.checkpoint_every,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalClassChoice {
    /// Exclude background for Cityscapes, keep every class for synthetic scenes.
    Default,
    All,
    ExcludeBackground,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub classes: EvalClassChoice,
    pub mean_mode: MeanMode,
    /// Inject the training noise before reconstructing when measuring PSNR.
    pub noise_at_eval: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            classes: EvalClassChoice::Default,
            mean_mode: MeanMode::Strict,
            noise_at_eval: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    /// Desk-scale preset: tiny networks, 4 classes, 64x64 synthetic scenes, 32 training
    /// pairs, constant learning rate for 25 epochs (200 iterations).
    pub fn tiny() -> Self {
        let mut c = Self::default();
        c.model.scale = Scale::Tiny;
        c.data = DataSection {
            source: SourceKind::Synthetic,
            dir: PathBuf::new(),
            height: 64,
            width: 64,
            classes: 4,
            train_count: 32,
            val_count: 16,
            scene_seed: 0,
        };
        c.train.epochs_total = 25;
        c.train.epochs_constant_lr = 25;
        c.train.checkpoint_every = 5;
        c
    }

    /// Parses a config file and applies `(key, value)` overrides on top of it.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("config does not parse: {e}")))?;
        let schema = schema();
        let unknown = unknown_keys(&table, &schema);
        if !unknown.is_empty() {
            return Err(Error::Config(format!(
                "unknown config keys: {}",
                unknown.join(", ")
            )));
        }
        for (key, value) in overrides {
            apply_override(&mut table, &schema, key, value)?;
        }
        let config: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config does not serialise: {e}")))
    }

    /// Checks every constraint and reports all offending keys at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad: Vec<String> = Vec::new();
        if let Err(e) = self.dataset_spec().validate() {
            bad.push(format!("data: {e}"));
        }
        if self.model.scale == Scale::Tiny && self.data.classes > 7 {
            bad.push(format!(
                "data.classes: tiny networks support at most 7 classes, got {}",
                self.data.classes
            ));
        }
        if self.data.source == SourceKind::Synthetic && self.data.train_count == 0 {
            bad.push("data.train_count: must be at least 1".into());
        }
        if let Err(e) = self.train_config().validate() {
            bad.push(format!("train: {e}"));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs_total: t.epochs_total,
            epochs_constant_lr: t.epochs_constant_lr,
            lr_initial: t.lr_initial,
            batch_size: t.batch_size,
            adam: AdamConfig {
                beta1: t.adam_beta1,
                beta2: t.adam_beta2,
                eps: t.adam_eps,
                weight_decay: t.weight_decay,
            },
            weights: LossWeights {
                alpha: t.alpha,
                beta: t.beta,
                gamma: t.gamma,
            },
            noise: t.noise,
            seed: t.seed,
            scale: self.model.scale,
            precision: self.model.precision,
            pool_capacity: t.pool_capacity,
            pool_policy: t.pool_policy,
            checkpoint_every: t.checkpoint_every,
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        let d = &self.data;
        DatasetSpec {
            source: match d.source {
                SourceKind::Synthetic => Source::Synthetic {
                    train_count: d.train_count,
                    val_count: d.val_count,
                },
                SourceKind::Cityscapes => Source::Cityscapes { dir: d.dir.clone() },
            },
            height: d.height,
            width: d.width,
            classes: d.classes,
            seed: d.scene_seed,
        }
    }

    pub fn eval_classes(&self) -> EvalClasses {
        match self.eval.classes {
            EvalClassChoice::Default => self.dataset_spec().default_eval_classes(),
            EvalClassChoice::All => EvalClasses::All,
            EvalClassChoice::ExcludeBackground => EvalClasses::ExcludeBackground,
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.run.out_dir.join(&self.run.name)
    }
}

/// Section-to-keys map of the default config, which lists every valid key.
fn schema() -> toml::Table {
    toml::Table::try_from(ExperimentConfig::default()).expect("default config serialises")
}

fn unknown_keys(table: &toml::Table, schema: &toml::Table) -> Vec<String> {
    let mut out = Vec::new();
    for (section, value) in table {
        match (schema.get(section), value) {
            (Some(toml::Value::Table(known)), toml::Value::Table(given)) => {
                out.extend(
                    given
                        .keys()
                        .filter(|k| !known.contains_key(*k))
                        .map(|k| format!("{section}.{k}")),
                );
            }
            (Some(_), _) => out.push(format!("{section} (expected a [section])")),
            (None, _) => out.push(section.clone()),
        }
    }
    out
}

/// Resolves an override key to `(section, key)`.
fn resolve_key(schema: &toml::Table, key: &str) -> Result<(String, String)> {
    if let Some((section, name)) = key.split_once('.') {
        let known = schema
            .get(section)
            .and_then(|v| v.as_table())
            .is_some_and(|t| t.contains_key(name));
        if known {
            return Ok((section.into(), name.into()));
        }
        return Err(Error::Config(format!("unknown config key `{key}`")));
    }
    let owners: BTreeSet<&String> = schema
        .iter()
        .filter(|(_, v)| v.as_table().is_some_and(|t| t.contains_key(key)))
        .map(|(s, _)| s)
        .collect();
    match owners.len() {
        1 => Ok((owners.into_iter().next().unwrap().clone(), key.into())),
        0 => Err(Error::Config(format!("unknown config key `{key}`"))),
        _ => Err(Error::Config(format!(
            "config key `{key}` is ambiguous; use one of {}",
            owners
                .iter()
                .map(|s| format!("{s}.{key}"))
                .collect::<Vec<_>>()
                .join(", ")
        ))),
    }
}

/// Parses `raw` as the type the default config uses for that key.
fn typed_value(template: &toml::Value, key: &str, raw: &str) -> Result<toml::Value> {
    let bad = |what: &str| Error::Config(format!("`{key}` expects {what}, got `{raw}`"));
    Ok(match template {
        toml::Value::String(_) => toml::Value::String(raw.into()),
        toml::Value::Integer(_) => toml::Value::Integer(raw.parse().map_err(|_| bad("an integer"))?),
        toml::Value::Float(_) => toml::Value::Float(raw.parse().map_err(|_| bad("a number"))?),
        toml::Value::Boolean(_) => toml::Value::Boolean(raw.parse().map_err(|_| bad("true or false"))?),
        _ => return Err(bad("a scalar")),
    })
}

fn apply_override(table: &mut toml::Table, schema: &toml::Table, key: &str, raw: &str) -> Result<()> {
    let (section, name) = resolve_key(schema, key)?;
    let template = &schema[&section][&name];
    let value = typed_value(template, key, raw)?;
    let entry = table
        .entry(section.clone())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match entry {
        toml::Value::Table(t) => {
            t.insert(name, value);
            Ok(())
        }
        _ => Err(Error::Config(format!("`{section}` is not a section"))),
    }
}
