//! Subcommand implementations. Each one writes only inside its output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{RunConfig, TestData};
use super::raster;
use crate::autodiff::{DType, Real, Tensor};
use crate::checkpoint;
use crate::data::{DataSource, Dataset};
use crate::error::{Error, Result};
use crate::eval::{self, AttackNorm, DirectionNorm, LandscapeConfig, OodMethod, PgdConfig};
use crate::model::LogitModel;
use crate::sampler::SgldConfig;
use crate::seeds::{self, SeedPlan};
use crate::trainer::{self, load_checkpoint, sample_fresh, Checkpoint};

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn checkpoint_dtype(path: &Path) -> Result<DType> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint::peek_dtype(&bytes)
}

/// Runs `$body` with `$t` bound to the element type stored in the checkpoint.
macro_rules! with_dtype {
    ($dtype:expr, $f:ident($($arg:expr),*)) => {
        match $dtype {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
        }
    };
}

/// Loads a dataset and checks it against the model's input shape and classes.
fn load_for<T: Real>(spec: &DataSource, model: &LogitModel<T>) -> Result<Dataset<T>> {
    let ds = spec.load::<T>()?;
    model.check_input(&ds.samples)?;
    if ds.meta.classes != model.classes() {
        return Err(Error::Shape {
            op: "dataset",
            detail: format!("checkpoint has {} classes, data has {}", model.classes(), ds.meta.classes),
        });
    }
    Ok(ds)
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub out: PathBuf,
    pub epochs: usize,
    pub test_accuracy: Option<f64>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    with_dtype!(cfg.dtype, train_typed(cfg))
}

fn train_typed<T: Real>(cfg: &RunConfig) -> Result<TrainSummary> {
    let train_ds = cfg.data.load::<T>()?;
    let test_src = match &cfg.test_data {
        TestData::Auto => cfg.data.default_test(),
        TestData::None => None,
        TestData::Source(s) => Some(s.clone()),
    };
    let test_ds = test_src.as_ref().map(|s| s.load::<T>()).transpose()?;
    ensure_dir(&cfg.out)?;
    write_text(&cfg.out.join("run.conf"), &cfg.to_config_text())?;
    let extra = serde_json::json!({
        "data": cfg.data.to_string(),
        "test_data": test_src.map(|s| s.to_string()),
        "dtype": cfg.pairs()["dtype"],
        "seed_plan": SeedPlan::from_master(cfg.train.seed),
        "resolved": cfg.pairs(),
    });
    let outcome = trainer::train(cfg.train.clone(), &train_ds, test_ds.as_ref(), Some(&cfg.out), &extra)?;
    Ok(TrainSummary {
        out: cfg.out.clone(),
        epochs: outcome.epochs.len(),
        test_accuracy: outcome.final_report.map(|r| r.accuracy),
        checkpoints: outcome.checkpoints,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Ranking {
    None,
    /// Lowest energy (highest unnormalized density) first.
    Px,
    /// Highest classifier confidence first.
    Pyx,
}

impl std::str::FromStr for Ranking {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ranking::None),
            "px" => Ok(Ranking::Px),
            "pyx" => Ok(Ranking::Pyx),
            _ => Err(Error::Config(format!("unknown ranking `{s}` (none|px|pyx)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SampleArgs {
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub n: usize,
    pub steps: usize,
    pub step_size: f64,
    pub noise: f64,
    pub class: Option<usize>,
    pub seed: u64,
    pub rank: Ranking,
}

#[derive(Clone, Debug, Serialize)]
pub struct SampleReport {
    pub checkpoint: PathBuf,
    pub n: usize,
    pub steps: usize,
    pub step_size: f64,
    pub noise: f64,
    pub class: Option<usize>,
    pub seed: u64,
    pub rank: Ranking,
    /// Per written sample, in output order.
    pub energy: Vec<f64>,
    pub predicted: Vec<usize>,
    /// `p(class|x)` for conditional sampling, otherwise the top softmax probability.
    pub confidence: Vec<f64>,
}

pub fn cmd_sample(a: &SampleArgs) -> Result<SampleReport> {
    with_dtype!(checkpoint_dtype(&a.checkpoint)?, sample_typed(a))
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn sample_typed<T: Real>(a: &SampleArgs) -> Result<SampleReport> {
    let Checkpoint { model, init, clamp } = load_checkpoint::<T>(&a.checkpoint)?;
    if let Some(c) = a.class {
        if c >= model.classes() {
            return Err(Error::Config(format!("class {c} out of range for {} classes", model.classes())));
        }
    }
    let sgld = SgldConfig {
        steps: a.steps,
        step_size: a.step_size,
        noise: a.noise,
        clamp,
    };
    sgld.validate().map_err(|e| Error::Config(e.to_string()))?;
    ensure_dir(&a.out)?;
    let mut rng = seeds::rng(SeedPlan::from_master(a.seed).sampler);
    let x = sample_fresh(&model, &init, a.n, &sgld, a.class, &mut rng)?;

    let (mut energy, mut predicted, mut confidence) = (Vec::new(), Vec::new(), Vec::new());
    if a.n > 0 {
        energy = eval::batched_energy(&model, &x)?.to_f64_vec();
        let logits = eval::batched_logits(&model, &x)?;
        predicted = eval::predictions(&logits);
        let k = logits.row_len();
        let flat = logits.to_f64_vec();
        for (i, &p) in predicted.iter().enumerate() {
            let probs = softmax_row(&flat[i * k..(i + 1) * k]);
            confidence.push(probs[a.class.unwrap_or(p)]);
        }
    }
    let mut order: Vec<usize> = (0..a.n).collect();
    match a.rank {
        Ranking::None => {}
        Ranking::Px => order.sort_by(|&i, &j| energy[i].total_cmp(&energy[j])),
        Ranking::Pyx => order.sort_by(|&i, &j| confidence[j].total_cmp(&confidence[i])),
    }
    let x = x.select_rows(&order);
    let pick = |v: &[f64]| order.iter().map(|&i| v[i]).collect::<Vec<f64>>();
    let energy = pick(&energy);
    let confidence = pick(&confidence);
    let predicted: Vec<usize> = order.iter().map(|&i| predicted[i]).collect();

    let labels = Tensor::from_vec(predicted.iter().map(|&p| T::lit(p as f64)).collect());
    let energies = Tensor::from_vec(energy.iter().map(|&e| T::lit(e)).collect());
    checkpoint::save(
        &a.out.join("samples.bin"),
        &[("samples".into(), x.clone()), ("energy".into(), energies), ("predicted".into(), labels)],
    )?;

    let shape = x.row_shape().to_vec();
    if let [c, h, w] = shape[..] {
        let dir = a.out.join("raster");
        ensure_dir(&dir)?;
        for i in 0..x.rows() {
            raster::write(&dir.join(format!("sample_{i:05}.{}", raster::extension(c))), x.row(i), [c, h, w], clamp)?;
        }
    } else {
        let mut csv = (1..=x.row_len()).map(|i| format!("x{i}")).collect::<Vec<_>>().join(",");
        csv.push_str(",energy,predicted\n");
        for i in 0..x.rows() {
            for v in x.row(i) {
                let _ = write!(csv, "{v},");
            }
            let _ = writeln!(csv, "{},{}", energy[i], predicted[i]);
        }
        write_text(&a.out.join("samples.csv"), &csv)?;
    }

    let report = SampleReport {
        checkpoint: a.checkpoint.clone(),
        n: a.n,
        steps: a.steps,
        step_size: a.step_size,
        noise: a.noise,
        class: a.class,
        seed: a.seed,
        rank: a.rank,
        energy,
        predicted,
        confidence,
    };
    eval::write_json(&a.out.join("samples.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: DataSource,
    pub out: PathBuf,
}

pub fn cmd_eval(a: &EvalArgs) -> Result<eval::EvalReport> {
    with_dtype!(checkpoint_dtype(&a.checkpoint)?, eval_typed(a))
}

fn eval_typed<T: Real>(a: &EvalArgs) -> Result<eval::EvalReport> {
    let ck = load_checkpoint::<T>(&a.checkpoint)?;
    let ds = load_for(&a.data, &ck.model)?;
    let report = eval::evaluate_model(&ck.model, &ds)?;
    ensure_dir(&a.out)?;
    eval::write_json(&a.out.join("eval.json"), &report)?;
    write_text(&a.out.join("reliability.csv"), &report.reliability.to_csv())?;
    Ok(report)
}

/// Out-of-distribution set: another data spec, or midpoints of in-set pairs.
#[derive(Clone, Debug, PartialEq)]
pub enum OodSource {
    Interp,
    Data(DataSource),
}

impl std::str::FromStr for OodSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interp" => Ok(OodSource::Interp),
            spec => Ok(OodSource::Data(spec.parse()?)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct OodArgs {
    pub checkpoint: PathBuf,
    pub in_data: DataSource,
    pub out_data: OodSource,
    pub method: OodMethod,
    /// Cap on samples taken from each set.
    pub n: usize,
    pub bins: usize,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Clone, Debug, Serialize)]
pub struct OodSummary {
    pub method: OodMethod,
    pub auroc: f64,
    pub n_in: usize,
    pub n_out: usize,
}

pub fn cmd_ood(a: &OodArgs) -> Result<OodSummary> {
    with_dtype!(checkpoint_dtype(&a.checkpoint)?, ood_typed(a))
}

fn ood_typed<T: Real>(a: &OodArgs) -> Result<OodSummary> {
    let ck = load_checkpoint::<T>(&a.checkpoint)?;
    let ds_in = load_for(&a.in_data, &ck.model)?.head(a.n);
    let x_out = match &a.out_data {
        OodSource::Interp => {
            let mut rng = seeds::rng(SeedPlan::from_master(a.seed).eval);
            eval::interp_ood(&ds_in, a.n.min(ds_in.len()), &mut rng)?
        }
        OodSource::Data(spec) => {
            let ds = spec.load::<T>()?.head(a.n);
            ck.model.check_input(&ds.samples)?;
            ds.samples
        }
    };
    let report = eval::ood_report(&ck.model, &ds_in.samples, &x_out, a.method)?;
    ensure_dir(&a.out)?;
    let mut csv = String::from("set,score\n");
    for s in &report.scores_in {
        let _ = writeln!(csv, "in,{s}");
    }
    for s in &report.scores_out {
        let _ = writeln!(csv, "out,{s}");
    }
    write_text(&a.out.join("scores.csv"), &csv)?;
    write_text(&a.out.join("hist_in.csv"), &eval::histogram_csv(&eval::histogram(&report.scores_in, a.bins)))?;
    write_text(&a.out.join("hist_out.csv"), &eval::histogram_csv(&eval::histogram(&report.scores_out, a.bins)))?;
    let summary = OodSummary {
        method: a.method,
        auroc: report.auroc,
        n_in: report.scores_in.len(),
        n_out: report.scores_out.len(),
    };
    eval::write_json(&a.out.join("ood.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug)]
pub struct AttackArgs {
    pub checkpoint: PathBuf,
    pub data: DataSource,
    pub out: PathBuf,
    pub norm: AttackNorm,
    pub eps: Vec<f64>,
    pub steps: usize,
    pub step_size: Option<f64>,
    pub random_start: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AttackReport {
    pub norm: AttackNorm,
    pub clean_accuracy: f64,
    pub points: Vec<eval::RobustnessPoint>,
}

pub fn cmd_attack(a: &AttackArgs) -> Result<AttackReport> {
    with_dtype!(checkpoint_dtype(&a.checkpoint)?, attack_typed(a))
}

fn attack_typed<T: Real>(a: &AttackArgs) -> Result<AttackReport> {
    if a.eps.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
        return Err(Error::Config("attack radii must be finite and non-negative".into()));
    }
    let ck = load_checkpoint::<T>(&a.checkpoint)?;
    let ds = load_for(&a.data, &ck.model)?;
    let clean_accuracy = eval::accuracy(&ck.model, &ds)?;
    let mut rng = seeds::rng(SeedPlan::from_master(a.seed).attack);
    let mut points = Vec::with_capacity(a.eps.len());
    for &eps in &a.eps {
        let cfg = PgdConfig {
            norm: a.norm,
            eps,
            steps: a.steps,
            step_size: a.step_size,
            random_start: a.random_start,
        };
        points.push(eval::robust_accuracy(&ck.model, &ds, &cfg, &mut rng)?);
    }
    ensure_dir(&a.out)?;
    let mut csv = String::from("eps,accuracy,max_distance\n");
    for p in &points {
        let _ = writeln!(csv, "{},{},{}", p.eps, p.accuracy, p.max_distance);
    }
    write_text(&a.out.join("attack.csv"), &csv)?;
    let report = AttackReport {
        norm: a.norm,
        clean_accuracy,
        points,
    };
    eval::write_json(&a.out.join("attack.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct LandscapeArgs {
    pub checkpoint: PathBuf,
    pub data: DataSource,
    pub out: PathBuf,
    pub directions: usize,
    pub points: usize,
    pub lo: f64,
    pub hi: f64,
    pub normalization: DirectionNorm,
    pub seed: u64,
    /// Data rows the energy is summed over.
    pub n: usize,
}

pub fn cmd_landscape(a: &LandscapeArgs) -> Result<eval::LandscapeSlice> {
    with_dtype!(checkpoint_dtype(&a.checkpoint)?, landscape_typed(a))
}

fn landscape_typed<T: Real>(a: &LandscapeArgs) -> Result<eval::LandscapeSlice> {
    if !(1..=2).contains(&a.directions) {
        return Err(Error::Config("landscape directions must be 1 or 2".into()));
    }
    if a.points == 0 || !(a.lo <= a.hi) {
        return Err(Error::Config("landscape grid needs at least one point and lo <= hi".into()));
    }
    let mut ck = load_checkpoint::<T>(&a.checkpoint)?;
    let ds = load_for(&a.data, &ck.model)?.head(a.n);
    let cfg = LandscapeConfig {
        directions: a.directions,
        grid: LandscapeConfig::linspace(a.lo, a.hi, a.points),
        normalization: a.normalization,
        seed: a.seed,
    };
    let slice = eval::landscape_slice(&mut ck.model, &ds.samples, &cfg)?;
    ensure_dir(&a.out)?;
    write_text(&a.out.join("landscape.csv"), &slice.to_csv())?;
    eval::write_json(&a.out.join("landscape.json"), &slice)?;
    Ok(slice)
}
