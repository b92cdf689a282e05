//! Run configuration: a flat `key = value` file with `#` comments.
//!
//! Every key is optional and falls back to its default. Unknown or repeated
//! keys are errors that carry the line number. [`RunConfig::echo`] renders
//! the complete resolved configuration in a canonical order, which is what
//! a run writes next to its outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::data::{DatabaseSource, SplitSpec};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::rvssdh::{Activation, ModelConfig, Variant};
use crate::train::TrainConfig;

/// Floating-point type used for training and inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(format!("expected f32 or f64, got `{s}`")),
        }
    }
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

/// Which feature extractor sits in front of the hash component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneChoice {
    /// ToyNet-lite for image datasets, none for feature files.
    Auto,
    ToynetLite,
    None,
}

impl FromStr for BackboneChoice {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "auto" => Ok(BackboneChoice::Auto),
            "toynet_lite" => Ok(BackboneChoice::ToynetLite),
            "none" => Ok(BackboneChoice::None),
            _ => Err(format!("expected auto, toynet_lite or none, got `{s}`")),
        }
    }
}

impl BackboneChoice {
    fn name(self) -> &'static str {
        match self {
            BackboneChoice::Auto => "auto",
            BackboneChoice::ToynetLite => "toynet_lite",
            BackboneChoice::None => "none",
        }
    }
}

/// Where samples come from: an IDX image/label pair or an RVF1 feature
/// file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DataSource {
    Idx { images: PathBuf, labels: PathBuf },
    Features(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub out_dir: PathBuf,

    pub variant: Variant,
    pub backbone: BackboneChoice,
    pub clusters: usize,
    pub bits: usize,
    pub d1: Option<usize>,
    pub d2: Option<usize>,
    pub transform: bool,
    pub alpha0: f64,
    pub activation: Activation,

    pub loss: LossConfig,
    pub train: TrainConfig,
    pub precision: Precision,

    pub train_fraction: f64,
    pub train_limit: Option<usize>,
    pub database_limit: Option<usize>,
    pub queries: usize,
    pub include_self: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            images: None,
            labels: None,
            features: None,
            out_dir: PathBuf::from("runs/default"),
            variant: Variant::RandomVlad,
            backbone: BackboneChoice::Auto,
            clusters: 8,
            bits: 32,
            d1: None,
            d2: None,
            transform: true,
            alpha0: 1.0,
            activation: Activation::Softmax,
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            precision: Precision::F32,
            train_fraction: 5.0 / 6.0,
            train_limit: None,
            database_limit: None,
            queries: 1000,
            include_self: false,
        }
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "images",
    "labels",
    "features",
    "out_dir",
    "variant",
    "backbone",
    "clusters",
    "bits",
    "d1",
    "d2",
    "transform",
    "alpha0",
    "activation",
    "loss_alpha",
    "loss_beta",
    "lambda",
    "p",
    "e3",
    "e3_weight",
    "epochs",
    "batch_size",
    "learning_rate",
    "momentum",
    "lr_decay",
    "seed",
    "freeze_backbone",
    "kmeans_samples",
    "calibrate_init",
    "dry_run",
    "precision",
    "train_fraction",
    "train_limit",
    "database_limit",
    "queries",
    "include_self",
];

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| format!("cannot parse `{v}`: {e}"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

/// `auto`/`none` map to `None`.
fn parse_opt(v: &str) -> std::result::Result<Option<usize>, String> {
    match v {
        "auto" | "none" => Ok(None),
        _ => parse(v).map(Some),
    }
}

fn parse_list(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(parse).collect()
}

fn opt_text(v: Option<usize>, none: &str) -> String {
    v.map_or(none.to_string(), |n| n.to_string())
}

impl RunConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let n = i + 1;
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {n}: expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Config(format!("line {n}: unknown key `{key}`")));
            }
            if seen.contains(&key) {
                return Err(Error::Config(format!("line {n}: key `{key}` given twice")));
            }
            seen.push(key);
            cfg.set(key, value).map_err(|e| Error::Config(format!("line {n}: key `{key}`: {e}")))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "images" => self.images = Some(PathBuf::from(v)),
            "labels" => self.labels = Some(PathBuf::from(v)),
            "features" => self.features = Some(PathBuf::from(v)),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "variant" => self.variant = v.parse().map_err(|e: Error| e.to_string())?,
            "backbone" => self.backbone = v.parse()?,
            "clusters" => self.clusters = parse(v)?,
            "bits" => self.bits = parse(v)?,
            "d1" => self.d1 = parse_opt(v)?,
            "d2" => self.d2 = parse_opt(v)?,
            "transform" => self.transform = parse_bool(v)?,
            "alpha0" => self.alpha0 = parse(v)?,
            "activation" => {
                self.activation = match v {
                    "softmax" => Activation::Softmax,
                    "sigmoid" => Activation::Sigmoid,
                    _ => return Err(format!("expected softmax or sigmoid, got `{v}`")),
                }
            }
            "loss_alpha" => self.loss.alpha = parse(v)?,
            "loss_beta" => self.loss.beta = parse(v)?,
            "lambda" => self.loss.lambda = parse(v)?,
            "p" => self.loss.p = parse(v)?,
            "e3" => self.loss.e3_enabled = parse_bool(v)?,
            "e3_weight" => self.loss.e3_weight = parse(v)?,
            "epochs" => self.train.epochs = parse(v)?,
            "batch_size" => self.train.batch_size = parse(v)?,
            "learning_rate" => self.train.learning_rate = parse(v)?,
            "momentum" => self.train.momentum = parse(v)?,
            "lr_decay" => self.train.lr_decay = parse_list(v)?,
            "seed" => self.train.seed = parse(v)?,
            "freeze_backbone" => self.train.freeze_backbone = parse_bool(v)?,
            "kmeans_samples" => self.train.kmeans_samples = parse(v)?,
            "calibrate_init" => self.train.calibrate_init = parse_bool(v)?,
            "dry_run" => self.train.dry_run = parse_bool(v)?,
            "precision" => self.precision = v.parse()?,
            "train_fraction" => self.train_fraction = parse(v)?,
            "train_limit" => self.train_limit = parse_opt(v)?,
            "database_limit" => self.database_limit = parse_opt(v)?,
            "queries" => self.queries = parse(v)?,
            "include_self" => self.include_self = parse_bool(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Value of one key in the form `set` accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".into(), |p| p.display().to_string());
        Some(match key {
            "images" => path(&self.images),
            "labels" => path(&self.labels),
            "features" => path(&self.features),
            "out_dir" => self.out_dir.display().to_string(),
            "variant" => self.variant.name().into(),
            "backbone" => self.backbone.name().into(),
            "clusters" => self.clusters.to_string(),
            "bits" => self.bits.to_string(),
            "d1" => opt_text(self.d1, "auto"),
            "d2" => opt_text(self.d2, "auto"),
            "transform" => self.transform.to_string(),
            "alpha0" => self.alpha0.to_string(),
            "activation" => match self.activation {
                Activation::Softmax => "softmax".into(),
                Activation::Sigmoid => "sigmoid".into(),
            },
            "loss_alpha" => self.loss.alpha.to_string(),
            "loss_beta" => self.loss.beta.to_string(),
            "lambda" => self.loss.lambda.to_string(),
            "p" => self.loss.p.to_string(),
            "e3" => self.loss.e3_enabled.to_string(),
            "e3_weight" => self.loss.e3_weight.to_string(),
            "epochs" => self.train.epochs.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "learning_rate" => self.train.learning_rate.to_string(),
            "momentum" => self.train.momentum.to_string(),
            "lr_decay" => self.train.lr_decay.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(","),
            "seed" => self.train.seed.to_string(),
            "freeze_backbone" => self.train.freeze_backbone.to_string(),
            "kmeans_samples" => self.train.kmeans_samples.to_string(),
            "calibrate_init" => self.train.calibrate_init.to_string(),
            "dry_run" => self.train.dry_run.to_string(),
            "precision" => self.precision.name().into(),
            "train_fraction" => self.train_fraction.to_string(),
            "train_limit" => opt_text(self.train_limit, "none"),
            "database_limit" => opt_text(self.database_limit, "none"),
            "queries" => self.queries.to_string(),
            "include_self" => self.include_self.to_string(),
            _ => return None,
        })
    }

    /// The resolved configuration, one `key = value` line per key. Parsing
    /// the echo gives back an equal config.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let v = self.get(k).unwrap_or_default();
            if matches!(*k, "images" | "labels" | "features") && v == "none" {
                let _ = writeln!(s, "# {k} unset");
                continue;
            }
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Checks everything that does not need the data.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.loss.validate()?;
        self.data_source()?;
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::Config(format!("train_fraction {} outside [0, 1]", self.train_fraction)));
        }
        Ok(())
    }

    pub fn data_source(&self) -> Result<DataSource> {
        match (&self.images, &self.labels, &self.features) {
            (Some(i), Some(l), None) => Ok(DataSource::Idx { images: i.clone(), labels: l.clone() }),
            (None, None, Some(f)) => Ok(DataSource::Features(f.clone())),
            (None, None, None) => Err(Error::Config("no data: set `images` and `labels`, or `features`".into())),
            (_, _, Some(_)) => Err(Error::Config("`features` excludes `images` and `labels`".into())),
            _ => Err(Error::Config("`images` and `labels` must be given together".into())),
        }
    }

    /// Model architecture for inputs of the given shape and class count.
    pub fn model_config(&self, input_shape: [usize; 3], classes: usize, images: bool) -> Result<ModelConfig> {
        let mut m = ModelConfig::new(self.variant, input_shape, classes);
        let backbone = match self.backbone {
            BackboneChoice::Auto => images,
            BackboneChoice::ToynetLite => true,
            BackboneChoice::None => false,
        };
        m.backbone = backbone.then(|| BackboneConfig::toynet_lite(input_shape[2]));
        m.clusters = self.clusters;
        m.bits = self.bits;
        m.d1 = self.d1;
        m.d2 = self.d2;
        m.transform = self.transform;
        m.alpha0 = self.alpha0;
        m.activation = self.activation;
        m.validate().map_err(|e| match e {
            Error::Invalid(m) | Error::Shape(m) => Error::Config(m),
            e => e,
        })?;
        Ok(m)
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            seed: self.train.seed,
            train_fraction: self.train_fraction,
            train_limit: self.train_limit,
            database_limit: self.database_limit,
            database: DatabaseSource::Validation,
            queries: self.queries,
        }
    }
}
