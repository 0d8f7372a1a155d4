//! The hybrid training loop: classification on augmented batches, a
//! contrastive energy loss on raw batches against SGLD samples, and a
//! sharpness-aware parameter update.

use std::collections::VecDeque;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Graph, ParamVars, ParameterSet, Real, Tensor, Var};
use crate::checkpoint;
use crate::data::{AugmentationPipeline, ClampRange, DataKind, Dataset, DualBatch, DualLoader};
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{Activation, Architecture, LogitModel, Mode, ModelConfig};
use crate::optimizer::{sharpness_aware_step, LossEval, OptState, SamConfig, Schedule};
use crate::sampler::{fit_informative_init, sgld_chain, InitDistribution, ReplayBuffer, SgldConfig, DEFAULT_VARIANCE_FLOOR};
use crate::seeds::{self, SeedPlan};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceThresholds {
    /// Abort once `|mean E(x⁻)|` exceeds this.
    pub energy_bound: f64,
    /// Abort once the cross-entropy exceeds this.
    pub xent_bound: f64,
}

impl Default for DivergenceThresholds {
    fn default() -> Self {
        DivergenceThresholds {
            energy_bound: 1e3,
            xent_bound: 1e3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgld: SgldConfig,
    pub sam: SamConfig,
    pub lr: f64,
    pub momentum: f64,
    pub schedule: Schedule,
    /// Probability γ that a chain restarts from the init distribution.
    pub reinit_prob: f64,
    /// Zero disables the buffer: every chain starts fresh.
    pub buffer_capacity: usize,
    pub gen_weight: f64,
    pub energy_l2: f64,
    /// Image data only: flip + pad-crop on the classification branch.
    pub augment: bool,
    pub augment_pad: usize,
    /// Ablation: also augment the generative branch.
    pub augment_gen: bool,
    /// Hidden widths of the MLP used for flat data.
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
    /// Flat inputs are divided by this inside the network.
    pub input_scale: f64,
    /// Checkpoint every this many epochs (the final epoch is always saved).
    pub checkpoint_every: usize,
    pub seed: u64,
    pub thresholds: DivergenceThresholds,
    /// Keep per-step wall time in the metrics log (breaks bit-identical logs).
    pub record_wall_time: bool,
    /// Buffer samples written to `samples_/` at each checkpoint.
    pub dump_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 64,
            sgld: SgldConfig::default(),
            sam: SamConfig::default(),
            lr: 0.1,
            momentum: 0.9,
            schedule: Schedule::step_decay_default(),
            reinit_prob: 0.05,
            buffer_capacity: 10_000,
            gen_weight: 1.0,
            energy_l2: 0.0,
            augment: true,
            augment_pad: 2,
            augment_gen: false,
            hidden: vec![128, 128],
            leaky_slope: 0.2,
            input_scale: 1.0,
            checkpoint_every: 10,
            seed: 1,
            thresholds: DivergenceThresholds::default(),
            record_wall_time: false,
            dump_samples: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        for (name, v) in [("gen_weight", self.gen_weight), ("energy_l2", self.energy_l2), ("lr", self.lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.reinit_prob) {
            return bad(format!("reinit probability must lie in [0, 1], got {}", self.reinit_prob));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint cadence must be positive".into());
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return bad("leaky slope must lie in [0, 1)".into());
        }
        self.sam.validate()?;
        self.sgld.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Architecture chosen for a dataset: an MLP on flat data, a small CNN on images.
    pub fn model_config<T: Real>(&self, ds: &Dataset<T>) -> ModelConfig {
        let mut cfg = match ds.meta.kind {
            DataKind::Toy2d => ModelConfig::toy_mlp(ds.samples.row_len(), ds.meta.classes),
            DataKind::Image { channels, height, width } => ModelConfig::small_cnn(channels, height, width, ds.meta.classes),
        };
        if let Architecture::Mlp { hidden } = &mut cfg.arch {
            hidden.clone_from(&self.hidden);
        }
        if ds.meta.kind == DataKind::Toy2d {
            cfg.input_scale = self.input_scale;
        }
        if self.leaky_slope > 0.0 {
            cfg.activation = Activation::LeakyRelu { slope: self.leaky_slope };
        }
        cfg
    }

    pub fn pipeline<T: Real>(&self, ds: &Dataset<T>) -> AugmentationPipeline {
        match ds.meta.kind {
            DataKind::Image { .. } if self.augment => AugmentationPipeline::flip_and_crop(self.augment_pad, ds.meta.clamp.lo),
            _ => AugmentationPipeline::identity(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    pub xent: f64,
    pub energy_pos: f64,
    pub energy_neg: f64,
    pub gen_loss: f64,
    pub total_loss: f64,
    pub perturbed_loss: Option<f64>,
    pub grad_norm: f64,
    pub lr: f64,
    /// Chains restarted from the init distribution this step.
    pub fresh_chains: usize,
    pub zero_gradient: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

/// `mean(e⁺) − mean(e⁻) + l2·(mean(e⁺²) + mean(e⁻²))`.
pub fn generative_loss(e_pos: &[f64], e_neg: &[f64], l2_weight: f64) -> Result<f64> {
    if e_pos.len() != e_neg.len() || e_pos.is_empty() {
        return Err(Error::shape("generative_loss", format!("{} vs {} energies", e_pos.len(), e_neg.len())));
    }
    let n = e_pos.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>() / n;
    let mut l = mean(e_pos) - mean(e_neg);
    if l2_weight != 0.0 {
        l += l2_weight * (sq(e_pos) + sq(e_neg));
    }
    Ok(l)
}

/// Graph form of [`generative_loss`] over `[b]` energy vectors.
pub fn generative_loss_graph<T: Real>(g: &mut Graph<T>, e_pos: Var, e_neg: Var, l2_weight: f64) -> Result<Var> {
    if g.shape(e_pos)? != g.shape(e_neg)? {
        return Err(Error::shape("generative_loss", "energy vectors differ in length"));
    }
    let mp = g.mean(e_pos)?;
    let mn = g.mean(e_neg)?;
    let mut l = g.sub(mp, mn)?;
    if l2_weight != 0.0 {
        let sp = g.square(e_pos)?;
        let sn = g.square(e_neg)?;
        let a = g.mean(sp)?;
        let b = g.mean(sn)?;
        let reg = g.add(a, b)?;
        let reg = g.scale(reg, T::lit(l2_weight))?;
        l = g.add(l, reg)?;
    }
    Ok(l)
}

/// Decides whether a step's metrics call for aborting the run.
pub fn divergence_guard(m: &StepMetrics, t: &DivergenceThresholds) -> std::result::Result<(), String> {
    let values = [
        ("cross-entropy", m.xent),
        ("E(x+)", m.energy_pos),
        ("E(x-)", m.energy_neg),
        ("generative loss", m.gen_loss),
        ("total loss", m.total_loss),
        ("perturbed loss", m.perturbed_loss.unwrap_or(0.0)),
        ("gradient norm", m.grad_norm),
    ];
    if let Some((name, _)) = values.iter().find(|(_, v)| !v.is_finite()) {
        return Err(format!("non-finite {name}"));
    }
    if m.energy_neg.abs() > t.energy_bound {
        return Err(format!("energy blow-up: E(x-) = {}", m.energy_neg));
    }
    if m.xent > t.xent_bound {
        return Err(format!("cross-entropy blow-up: {}", m.xent));
    }
    Ok(())
}

struct PassAux<T> {
    stats: Vec<(String, BatchStats<T>)>,
    xent: f64,
    e_pos: f64,
    e_neg: f64,
    gen_loss: f64,
}

/// Everything that evolves during training.
pub struct TrainState<T> {
    pub config: TrainConfig,
    pub model: LogitModel<T>,
    pub init: InitDistribution<T>,
    pub buffer: Option<ReplayBuffer<T>>,
    pub opt: OptState<T>,
    pub step: u64,
    pub epoch: usize,
    sampler_rng: ChaCha8Rng,
}

impl<T: Real> TrainState<T> {
    pub fn new(config: TrainConfig, train: &Dataset<T>) -> Result<Self> {
        config.validate()?;
        train.validate()?;
        let plan = SeedPlan::from_master(config.seed);
        let model = LogitModel::new(config.model_config(train), &mut seeds::rng(plan.model_init))?;
        let init = fit_informative_init(train, train.meta.classes, DEFAULT_VARIANCE_FLOOR)?;
        let buffer = if config.buffer_capacity > 0 {
            Some(ReplayBuffer::new(
                config.buffer_capacity,
                train.sample_shape(),
                config.reinit_prob,
                train.meta.clamp,
                plan.buffer,
            )?)
        } else {
            None
        };
        let opt = OptState::new(&model.params, config.lr, config.momentum, config.schedule.clone())?;
        let mut config = config;
        config.sgld.clamp = train.meta.clamp;
        Ok(TrainState {
            config,
            model,
            init,
            buffer,
            opt,
            step: 0,
            epoch: 0,
            sampler_rng: seeds::rng(plan.sampler),
        })
    }

    /// Chain starts (buffer or init), run through SGLD at the current parameters.
    fn negatives(&mut self, n: usize) -> Result<(Tensor<T>, usize)> {
        let (starts, fresh) = match &self.buffer {
            Some(buf) => {
                let d = buf.draw(&self.init, n, &mut self.sampler_rng)?;
                (d.samples, d.fresh)
            }
            None => (self.init.draw(n, &mut self.sampler_rng), n),
        };
        let x = sgld_chain(&self.model, &starts, &self.config.sgld, &mut self.sampler_rng, None)?;
        Ok((x, fresh))
    }

    /// One update on a dual batch.
    pub fn training_step(&mut self, batch: &DualBatch<T>) -> Result<StepMetrics> {
        let started = Instant::now();
        let use_gen = self.config.gen_weight > 0.0;
        let (x_neg, fresh) = if use_gen {
            let (x, f) = self.negatives(batch.gen_x.rows()).map_err(|e| self.at_step(e))?;
            (Some(x), f)
        } else {
            (None, 0)
        };

        let gen_weight = self.config.gen_weight;
        let l2 = self.config.energy_l2;
        let mut params = std::mem::take(&mut self.model.params);
        let model = &self.model;
        let loss_fn = |p: &ParameterSet<T>| -> Result<LossEval<T, PassAux<T>>> {
            let mut g = Graph::new();
            let pv = ParamVars::record(&mut g, p, true);
            let xc = g.constant(batch.clf_x.clone());
            let fwd = model.forward_graph(&mut g, &pv, xc, Mode::Train)?;
            let xent = g.softmax_cross_entropy(fwd.logits, &batch.clf_y)?;
            let mut aux = PassAux {
                stats: fwd.batch_stats,
                xent: g.value(xent)?.item()?.as_f64(),
                e_pos: 0.0,
                e_neg: 0.0,
                gen_loss: 0.0,
            };
            let total = match &x_neg {
                Some(xn) => {
                    let xp = g.constant(batch.gen_x.clone());
                    let xn = g.constant(xn.clone());
                    let ep = model.energy_graph(&mut g, &pv, xp)?;
                    let en = model.energy_graph(&mut g, &pv, xn)?;
                    let lg = generative_loss_graph(&mut g, ep, en, l2)?;
                    aux.e_pos = g.value(ep)?.sum_f64() / batch.gen_x.rows() as f64;
                    aux.e_neg = g.value(en)?.sum_f64() / batch.gen_x.rows() as f64;
                    aux.gen_loss = g.value(lg)?.item()?.as_f64();
                    let weighted = g.scale(lg, T::lit(gen_weight))?;
                    g.add(xent, weighted)?
                }
                None => xent,
            };
            let loss = g.value(total)?.item()?.as_f64();
            let grads = pv.gradients(&g, total)?;
            Ok(LossEval { loss, grads, aux })
        };
        let outcome = sharpness_aware_step(&mut params, loss_fn, &self.config.sam, &mut self.opt, self.epoch);
        self.model.params = params;
        let outcome = outcome.map_err(|e| self.at_step(e))?;
        self.model.apply_batch_stats(&outcome.aux.stats)?;
        if let (Some(buf), Some(xn)) = (&mut self.buffer, &x_neg) {
            buf.push(xn)?;
        }
        let aux = outcome.aux;
        let metrics = StepMetrics {
            step: self.step,
            epoch: self.epoch,
            xent: aux.xent,
            energy_pos: aux.e_pos,
            energy_neg: aux.e_neg,
            gen_loss: aux.gen_loss,
            total_loss: outcome.report.loss,
            perturbed_loss: outcome.report.perturbed_loss,
            grad_norm: outcome.report.grad_norm,
            lr: outcome.report.lr,
            fresh_chains: fresh,
            zero_gradient: outcome.report.zero_gradient,
            wall_time: self.config.record_wall_time.then(|| started.elapsed().as_secs_f64()),
        };
        self.step += 1;
        Ok(metrics)
    }

    fn at_step(&self, e: Error) -> Error {
        match e {
            Error::Divergence { reason, .. } => Error::Divergence { step: self.step, reason },
            Error::NonFinite(what) => Error::Divergence {
                step: self.step,
                reason: format!("non-finite {what}"),
            },
            other => other,
        }
    }

    /// Model, init distribution and epoch counter as checkpoint entries.
    pub fn checkpoint_entries(&self) -> Vec<(String, Tensor<T>)> {
        let mut e = self.model.to_entries();
        e.extend(self.init.to_entries());
        e.push(("train.epoch".into(), Tensor::scalar(T::lit(self.epoch as f64))));
        let c = self.config.sgld.clamp;
        e.push(("train.clamp".into(), Tensor::from_vec(vec![T::lit(c.lo), T::lit(c.hi)])));
        e
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_xent: f64,
    pub mean_energy_pos: f64,
    pub mean_energy_neg: f64,
    pub test_accuracy: Option<f64>,
    pub buffer_fill: usize,
}

/// What a completed run leaves behind.
pub struct TrainOutcome<T> {
    pub state: TrainState<T>,
    pub epochs: Vec<EpochSummary>,
    pub checkpoints: Vec<PathBuf>,
    pub final_report: Option<eval::EvalReport>,
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogRow<'a> {
    Step(&'a StepMetrics),
    Epoch(&'a EpochSummary),
}

struct RunDir {
    root: PathBuf,
    metrics: BufWriter<File>,
}

impl RunDir {
    fn create(root: &Path, config: &TrainConfig, extra: &serde_json::Value) -> Result<Self> {
        for sub in ["", "ckpt_", "samples_"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let mut echo = serde_json::to_value(config).map_err(|e| Error::format("json", e.to_string()))?;
        if let (Some(obj), Some(more)) = (echo.as_object_mut(), extra.as_object()) {
            obj.extend(more.clone());
        }
        eval::write_json(&root.join("config.json"), &echo)?;
        let path = root.join("metrics.jsonl");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(RunDir {
            root: root.to_path_buf(),
            metrics: BufWriter::new(file),
        })
    }

    fn log(&mut self, row: &LogRow) -> Result<()> {
        let line = serde_json::to_string(row).map_err(|e| Error::format("json", e.to_string()))?;
        let path = self.root.join("metrics.jsonl");
        writeln!(self.metrics, "{line}").map_err(|e| Error::io(&path, e))
    }

    fn flush(&mut self) -> Result<()> {
        let path = self.root.join("metrics.jsonl");
        self.metrics.flush().map_err(|e| Error::io(&path, e))
    }
}

/// Runs the configured number of epochs.
///
/// With `run_dir`, writes `config.json` (plus `extra` keys), `metrics.jsonl`,
/// checkpoints under `ckpt_/`, buffer sample dumps under `samples_/` and a
/// final `eval.json`. On divergence the partial artifacts are kept,
/// `divergence.json` records the recent energy trace, and the error is returned.
pub fn train<T: Real>(
    config: TrainConfig,
    train_ds: &Dataset<T>,
    test_ds: Option<&Dataset<T>>,
    run_dir: Option<&Path>,
    extra: &serde_json::Value,
) -> Result<TrainOutcome<T>> {
    if let Some(test) = test_ds {
        if test.sample_shape() != train_ds.sample_shape() || test.meta.classes != train_ds.meta.classes {
            return Err(Error::invalid("train and test sets differ in sample shape or class count"));
        }
    }
    let mut state = TrainState::new(config, train_ds)?;
    let cfg = state.config.clone();
    let plan = SeedPlan::from_master(cfg.seed);
    let batch = cfg.batch_size.min(train_ds.len());
    let mut loader = DualLoader::new(train_ds.len(), batch, plan.loader_clf, plan.loader_gen)?;
    loader.augment_gen = cfg.augment_gen;
    let pipeline = cfg.pipeline(train_ds);
    let mut dir = run_dir.map(|p| RunDir::create(p, &cfg, extra)).transpose()?;
    let mut trace: VecDeque<(u64, f64, f64)> = VecDeque::with_capacity(64);
    let mut epochs = Vec::new();
    let mut checkpoints = Vec::new();

    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let (mut xent, mut ep, mut en, mut steps) = (0.0, 0.0, 0.0, 0usize);
        while let Some(b) = loader.next(train_ds, &pipeline)? {
            let result = state.training_step(&b).and_then(|m| match divergence_guard(&m, &cfg.thresholds) {
                Ok(()) => Ok(m),
                Err(reason) => Err(Error::Divergence { step: m.step, reason }),
            });
            let m = match result {
                Ok(m) => m,
                Err(e @ Error::Divergence { .. }) => {
                    if let Some(d) = &mut dir {
                        d.flush()?;
                        write_divergence(&d.root, &state, &e, &trace)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if trace.len() == 64 {
                trace.pop_front();
            }
            trace.push_back((m.step, m.energy_pos, m.energy_neg));
            xent += m.xent;
            ep += m.energy_pos;
            en += m.energy_neg;
            steps += 1;
            if let Some(d) = &mut dir {
                d.log(&LogRow::Step(&m))?;
            }
        }
        let summary = EpochSummary {
            epoch,
            mean_xent: xent / steps as f64,
            mean_energy_pos: ep / steps as f64,
            mean_energy_neg: en / steps as f64,
            test_accuracy: test_ds.map(|t| eval::accuracy(&state.model, t)).transpose()?,
            buffer_fill: state.buffer.as_ref().map_or(0, |b| b.fill()),
        };
        let last = epoch + 1 == cfg.epochs;
        if let Some(d) = &mut dir {
            d.log(&LogRow::Epoch(&summary))?;
            if (epoch + 1) % cfg.checkpoint_every == 0 || last {
                let path = d.root.join("ckpt_").join(checkpoint_name(epoch + 1));
                checkpoint::save(&path, &state.checkpoint_entries())?;
                checkpoints.push(path);
                if let Some(buf) = &state.buffer {
                    let n = cfg.dump_samples.min(buf.fill());
                    let idx: Vec<usize> = (0..n).collect();
                    let dump = vec![("samples".to_string(), buf.contents().select_rows(&idx))];
                    checkpoint::save(&d.root.join("samples_").join(format!("buffer_{:04}.bin", epoch + 1)), &dump)?;
                }
            }
        }
        epochs.push(summary);
    }

    let final_report = test_ds.map(|t| eval::evaluate_model(&state.model, t)).transpose()?;
    if let Some(d) = &mut dir {
        d.flush()?;
        if let Some(r) = &final_report {
            eval::write_json(&d.root.join("eval.json"), r)?;
        }
    }
    Ok(TrainOutcome {
        state,
        epochs,
        checkpoints,
        final_report,
    })
}

fn write_divergence<T: Real>(root: &Path, state: &TrainState<T>, e: &Error, trace: &VecDeque<(u64, f64, f64)>) -> Result<()> {
    let snapshot = root.join("ckpt_").join("diverged.ckpt");
    checkpoint::save(&snapshot, &state.checkpoint_entries())?;
    let record = serde_json::json!({
        "error": e.to_string(),
        "step": state.step,
        "epoch": state.epoch,
        "snapshot": snapshot.display().to_string(),
        "trace": trace.iter().map(|(s, p, n)| serde_json::json!({"step": s, "energy_pos": p, "energy_neg": n})).collect::<Vec<_>>(),
    });
    eval::write_json(&root.join("divergence.json"), &record)
}

/// Everything needed to evaluate or sample from a trained model.
pub struct Checkpoint<T> {
    pub model: LogitModel<T>,
    pub init: InitDistribution<T>,
    /// Data range the model was trained on; SGLD chains stay inside it.
    pub clamp: ClampRange,
}

impl<T: Real> Checkpoint<T> {
    pub fn from_entries(entries: &[(String, Tensor<T>)]) -> Result<Self> {
        let clamp = match entries.iter().find(|(n, _)| n == "train.clamp") {
            Some((_, t)) if t.numel() == 2 => ClampRange::new(t.data()[0].as_f64(), t.data()[1].as_f64())?,
            Some(_) => return Err(Error::format("checkpoint", "bad clamp entry")),
            None => ClampRange::UNIT,
        };
        Ok(Checkpoint {
            model: LogitModel::from_entries(entries)?,
            init: InitDistribution::from_entries(entries)?,
            clamp,
        })
    }
}

/// Reads a checkpoint written by [`train`].
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    Checkpoint::from_entries(&checkpoint::load::<T>(path)?)
}

/// Fresh SGLD samples: informative-init starts, `steps` updates each.
pub fn sample_fresh<T: Real>(
    model: &LogitModel<T>,
    init: &InitDistribution<T>,
    n: usize,
    sgld: &SgldConfig,
    class: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    let starts = match class {
        Some(c) => init.draw_class(c, n, rng)?,
        None => init.draw(n, rng),
    };
    if n == 0 {
        return Ok(starts);
    }
    let mut out = Vec::with_capacity(starts.numel());
    for chunk in (0..n).collect::<Vec<_>>().chunks(eval::EVAL_CHUNK) {
        let part = sgld_chain(model, &starts.select_rows(chunk), sgld, rng, class)?;
        out.extend_from_slice(part.data());
    }
    Tensor::new(starts.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_toy, ToyKind};
    use crate::optimizer::SamVariant;

    fn metrics() -> StepMetrics {
        StepMetrics {
            step: 0,
            epoch: 0,
            xent: 0.5,
            energy_pos: -1.0,
            energy_neg: -2.0,
            gen_loss: 1.0,
            total_loss: 1.5,
            perturbed_loss: Some(1.6),
            grad_norm: 1.0,
            lr: 0.1,
            fresh_chains: 0,
            zero_gradient: false,
            wall_time: None,
        }
    }

    #[test]
    fn generative_loss_examples() {
        assert_eq!(generative_loss(&[1.0, 2.0], &[1.0, 2.0], 0.0).unwrap(), 0.0);
        assert_eq!(generative_loss(&[-1.0], &[-3.0], 0.0).unwrap(), 2.0);
        assert!((generative_loss(&[1.0], &[-1.0], 0.1).unwrap() - 2.2).abs() < 1e-15);
        assert!(generative_loss(&[1.0], &[], 0.0).is_err());
    }

    #[test]
    fn graph_loss_matches_tensor_loss() {
        let mut g = Graph::<f64>::new();
        let p = g.leaf(Tensor::from_vec(vec![0.3, -1.2, 2.0]));
        let n = g.leaf(Tensor::from_vec(vec![-0.7, 0.1, 1.5]));
        let l = generative_loss_graph(&mut g, p, n, 0.1).unwrap();
        let want = generative_loss(&[0.3, -1.2, 2.0], &[-0.7, 0.1, 1.5], 0.1).unwrap();
        assert!((g.value(l).unwrap().item().unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn divergence_guard_rules() {
        let t = DivergenceThresholds::default();
        assert!(divergence_guard(&metrics(), &t).is_ok());
        let mut m = metrics();
        m.total_loss = f64::NAN;
        assert!(divergence_guard(&m, &t).unwrap_err().contains("non-finite"));
        let mut m = metrics();
        m.energy_neg = -1e6;
        assert!(divergence_guard(&m, &t).unwrap_err().contains("energy blow-up"));
    }

    #[test]
    fn defaults_follow_reference_settings() {
        let c = TrainConfig::default();
        assert_eq!(c.sgld.steps, 5);
        assert_eq!(c.sgld.step_size, 1.0);
        assert_eq!(c.sgld.noise, 0.0);
        assert_eq!(c.buffer_capacity, 10_000);
        assert_eq!(c.reinit_prob, 0.05);
        assert_eq!(c.sam.rho, 0.2);
        assert_eq!(c.sam.variant, SamVariant::Sam);
        assert_eq!(c.epochs, 200);
        assert_eq!(c.lr, 0.1);
    }

    #[test]
    fn short_run_keeps_buffer_in_range() {
        let ds: Dataset<f32> = synth_toy(ToyKind::Gaussians8, 256, 0.1, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            hidden: vec![16],
            buffer_capacity: 100,
            ..TrainConfig::default()
        };
        let out = train(cfg, &ds, Some(&ds), None, &serde_json::Value::Null).unwrap();
        let buf = out.state.buffer.as_ref().unwrap();
        assert_eq!(buf.fill(), (buf.pushed() as usize).min(100));
        assert!(ds.meta.clamp.contains_all(buf.contents().data()));
        assert_eq!(out.epochs.len(), 2);
    }
}
