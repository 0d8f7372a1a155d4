//! Flat `key = value` run configuration with a validated key registry.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::autodiff::DType;
use crate::data::DataSource;
use crate::error::{Error, Result};
use crate::optimizer::{SamVariant, Schedule};
use crate::trainer::TrainConfig;

/// Which held-out set the trainer evaluates on.
#[derive(Clone, Debug, PartialEq)]
pub enum TestData {
    /// The generator's own held-out split (none for file sources).
    Auto,
    None,
    Source(DataSource),
}

impl FromStr for TestData {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(TestData::Auto),
            "none" => Ok(TestData::None),
            spec => Ok(TestData::Source(spec.parse()?)),
        }
    }
}

impl std::fmt::Display for TestData {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TestData::Auto => f.write_str("auto"),
            TestData::None => f.write_str("none"),
            TestData::Source(s) => write!(f, "{s}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    Step,
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(ScheduleKind::Constant),
            "step" => Ok(ScheduleKind::Step),
            "cosine" => Ok(ScheduleKind::Cosine),
            _ => Err(Error::Config(format!("unknown schedule `{s}` (constant|step|cosine)"))),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScheduleKind::Constant => "constant",
            ScheduleKind::Step => "step",
            ScheduleKind::Cosine => "cosine",
        })
    }
}

/// Everything a `train` invocation needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataSource,
    pub test_data: TestData,
    pub out: PathBuf,
    pub dtype: DType,
    pub schedule: ScheduleKind,
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            data: "toy:gaussians8".parse().expect("default data spec parses"),
            test_data: TestData::Auto,
            out: PathBuf::from("run"),
            dtype: DType::F32,
            schedule: ScheduleKind::Step,
            milestones: vec![60, 120, 180],
            decay_factor: 0.2,
        }
    }
}

fn parse<V: FromStr>(key: &str, v: &str) -> Result<V> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{v}` for `{key}`"))),
    }
}

fn parse_list<V: FromStr>(key: &str, v: &str) -> Result<Vec<V>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse(key, p)).collect()
}

fn join<V: Display>(v: &[V]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_dtype(key: &str, v: &str) -> Result<DType> {
    match v.trim() {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        _ => Err(Error::Config(format!("bad value `{v}` for `{key}` (f32|f64)"))),
    }
}

fn show_dtype(d: DType) -> String {
    match d {
        DType::F32 => "f32".into(),
        DType::F64 => "f64".into(),
    }
}

type Setter = fn(&mut RunConfig, &str, &str) -> Result<()>;
type Getter = fn(&RunConfig) -> String;

/// One registered configuration key.
pub struct Key {
    pub name: &'static str,
    pub help: &'static str,
    set: Setter,
    get: Getter,
}

macro_rules! key {
    ($name:literal, $help:literal, |$c:ident, $k:ident, $v:ident| $set:expr, |$g:ident| $get:expr) => {
        Key {
            name: $name,
            help: $help,
            set: |$c: &mut RunConfig, $k: &str, $v: &str| {
                $set;
                Ok(())
            },
            get: |$g: &RunConfig| $get,
        }
    };
}

/// Every key accepted in config files and as `--key value` flags.
pub static REGISTRY: &[Key] = &[
    key!("data", "training data spec, e.g. toy:gaussians8:n=4096 or idx:IMAGES:LABELS",
        |c, k, v| c.data = v.parse().map_err(|e: Error| Error::Config(format!("{k}: {e}")))?, |c| c.data.to_string()),
    key!("test_data", "held-out data spec, `auto` or `none`",
        |c, k, v| c.test_data = v.parse().map_err(|e: Error| Error::Config(format!("{k}: {e}")))?, |c| c.test_data.to_string()),
    key!("out", "run directory", |c, _k, v| c.out = PathBuf::from(v), |c| c.out.display().to_string()),
    key!("seed", "master seed", |c, k, v| c.train.seed = parse(k, v)?, |c| c.train.seed.to_string()),
    key!("dtype", "floating-point precision (f32|f64)", |c, k, v| c.dtype = parse_dtype(k, v)?, |c| show_dtype(c.dtype)),
    key!("epochs", "training epochs", |c, k, v| c.train.epochs = parse(k, v)?, |c| c.train.epochs.to_string()),
    key!("batch_size", "batch size of both branches", |c, k, v| c.train.batch_size = parse(k, v)?, |c| c.train.batch_size.to_string()),
    key!("lr", "base learning rate", |c, k, v| c.train.lr = parse(k, v)?, |c| c.train.lr.to_string()),
    key!("momentum", "SGD momentum", |c, k, v| c.train.momentum = parse(k, v)?, |c| c.train.momentum.to_string()),
    key!("schedule", "learning-rate schedule (constant|step|cosine)", |c, k, v| c.schedule = parse(k, v)?, |c| c.schedule.to_string()),
    key!("schedule.milestones", "step schedule milestone epochs, comma separated",
        |c, k, v| c.milestones = parse_list(k, v)?, |c| join(&c.milestones)),
    key!("schedule.factor", "step schedule decay factor", |c, k, v| c.decay_factor = parse(k, v)?, |c| c.decay_factor.to_string()),
    key!("sgld.k", "SGLD steps per training iteration", |c, k, v| c.train.sgld.steps = parse(k, v)?, |c| c.train.sgld.steps.to_string()),
    key!("sgld.alpha", "SGLD step size", |c, k, v| c.train.sgld.step_size = parse(k, v)?, |c| c.train.sgld.step_size.to_string()),
    key!("sgld.sigma", "SGLD noise scale", |c, k, v| c.train.sgld.noise = parse(k, v)?, |c| c.train.sgld.noise.to_string()),
    key!("sam.variant", "sharpness-aware variant (none|sam|asam)", |c, k, v| c.train.sam.variant = parse::<SamVariant>(k, v)?, |c| c.train.sam.variant.to_string()),
    key!("sam.rho", "perturbation radius", |c, k, v| c.train.sam.rho = parse(k, v)?, |c| c.train.sam.rho.to_string()),
    key!("sam.weight_decay", "L2 weight decay", |c, k, v| c.train.sam.weight_decay = parse(k, v)?, |c| c.train.sam.weight_decay.to_string()),
    key!("buffer.capacity", "replay buffer size (0 disables the buffer)",
        |c, k, v| c.train.buffer_capacity = parse(k, v)?, |c| c.train.buffer_capacity.to_string()),
    key!("buffer.reinit_prob", "probability a chain restarts from the init distribution",
        |c, k, v| c.train.reinit_prob = parse(k, v)?, |c| c.train.reinit_prob.to_string()),
    key!("gen_weight", "weight of the generative loss (0 gives a plain classifier)",
        |c, k, v| c.train.gen_weight = parse(k, v)?, |c| c.train.gen_weight.to_string()),
    key!("energy_l2", "energy magnitude regularizer", |c, k, v| c.train.energy_l2 = parse(k, v)?, |c| c.train.energy_l2.to_string()),
    key!("augment", "flip and pad-crop classification batches (image data)", |c, k, v| c.train.augment = parse_bool(k, v)?, |c| c.train.augment.to_string()),
    key!("augment.pad", "pad-crop padding in pixels", |c, k, v| c.train.augment_pad = parse(k, v)?, |c| c.train.augment_pad.to_string()),
    key!("augment.gen", "also augment the generative branch", |c, k, v| c.train.augment_gen = parse_bool(k, v)?, |c| c.train.augment_gen.to_string()),
    key!("model.hidden", "MLP hidden widths, comma separated", |c, k, v| c.train.hidden = parse_list(k, v)?, |c| join(&c.train.hidden)),
    key!("model.leaky_slope", "leaky ReLU slope (0 selects ReLU)", |c, k, v| c.train.leaky_slope = parse(k, v)?, |c| c.train.leaky_slope.to_string()),
    key!("model.input_scale", "flat inputs are divided by this inside the MLP",
        |c, k, v| c.train.input_scale = parse(k, v)?, |c| c.train.input_scale.to_string()),
    key!("checkpoint_every", "checkpoint cadence in epochs", |c, k, v| c.train.checkpoint_every = parse(k, v)?, |c| c.train.checkpoint_every.to_string()),
    key!("dump_samples", "buffer samples saved with each checkpoint", |c, k, v| c.train.dump_samples = parse(k, v)?, |c| c.train.dump_samples.to_string()),
    key!("divergence.energy_bound", "abort when |mean negative energy| exceeds this",
        |c, k, v| c.train.thresholds.energy_bound = parse(k, v)?, |c| c.train.thresholds.energy_bound.to_string()),
    key!("divergence.xent_bound", "abort when the cross-entropy exceeds this",
        |c, k, v| c.train.thresholds.xent_bound = parse(k, v)?, |c| c.train.thresholds.xent_bound.to_string()),
    key!("record_wall_time", "log per-step wall time (makes logs non-reproducible)",
        |c, k, v| c.train.record_wall_time = parse_bool(k, v)?, |c| c.train.record_wall_time.to_string()),
];

pub fn lookup(name: &str) -> Option<&'static Key> {
    REGISTRY.iter().find(|k| k.name == name)
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// a `#` after whitespace starts a trailing comment. Duplicate keys are rejected.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let mut line = raw;
        if let Some(pos) = line.find(" #").or_else(|| line.find("\t#")) {
            line = &line[..pos];
        }
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if lookup(k).is_none() {
            return Err(Error::Config(format!("line {}: unknown key `{k}`", i + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_text(&text)
}

impl RunConfig {
    /// Defaults, then `file` pairs, then `overrides`, in that order.
    pub fn resolve(file: &[(String, String)], overrides: &[(String, String)]) -> Result<Self> {
        let mut c = RunConfig::default();
        for (k, v) in file.iter().chain(overrides) {
            c.set(k, v)?;
        }
        c.finish()?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = lookup(key).ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        (k.set)(self, key, value)
    }

    /// Folds the schedule keys into the trainer config and validates it.
    fn finish(&mut self) -> Result<()> {
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return Err(Error::Config("schedule.factor must be positive".into()));
        }
        self.train.schedule = match self.schedule {
            ScheduleKind::Constant => Schedule::Constant,
            ScheduleKind::Step => Schedule::StepDecay {
                milestones: self.milestones.clone(),
                factor: self.decay_factor,
            },
            ScheduleKind::Cosine => Schedule::Cosine {
                total_epochs: self.train.epochs,
            },
        };
        self.train.validate().map_err(|e| match e {
            Error::InvalidArgument(m) => Error::Config(m),
            other => other,
        })
    }

    /// Every registered key with its resolved value.
    pub fn pairs(&self) -> BTreeMap<&'static str, String> {
        REGISTRY.iter().map(|k| (k.name, (k.get)(self))).collect()
    }

    /// The resolved configuration in config-file syntax.
    pub fn to_config_text(&self) -> String {
        let mut s = String::from("# resolved configuration; pass back with --config to repeat the run\n");
        for k in REGISTRY {
            s.push_str(&format!("{} = {}\n", k.name, (k.get)(self)));
        }
        s
    }
}
