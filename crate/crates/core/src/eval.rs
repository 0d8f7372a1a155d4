//! Evaluation suite: accuracy, calibration, OOD detection, PGD robustness,
//! energy-landscape slices, feature Fréchet distance and mode coverage.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamVars, ParameterSet, Real, Tensor};
use crate::data::{ClampRange, Dataset};
use crate::error::{Error, Result};
use crate::model::{LogitModel, Mode};
use crate::seeds;

/// Rows per forward pass when scoring large sets.
pub const EVAL_CHUNK: usize = 1024;

fn chunked<T: Real>(x: &Tensor<T>, mut f: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>) -> Result<Tensor<T>> {
    let n = x.rows();
    let mut rows: Vec<T> = Vec::new();
    let mut row_shape = None;
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let out = f(&x.select_rows(&idx))?;
        row_shape.get_or_insert_with(|| out.row_shape().to_vec());
        rows.extend_from_slice(out.data());
    }
    let mut shape = vec![n];
    shape.extend(row_shape.unwrap_or_default());
    Tensor::new(shape, rows)
}

/// Eval-mode logits, computed in chunks.
pub fn batched_logits<T: Real>(model: &LogitModel<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = chunked(x, |c| model.logits(c))?;
    if x.rows() == 0 {
        out = Tensor::zeros(&[0, model.classes()]);
    }
    Ok(out)
}

/// Penultimate-layer features, computed in chunks.
pub fn batched_features<T: Real>(model: &LogitModel<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    chunked(x, |c| model.penultimate_features(c))
}

/// Marginal energies, computed in chunks.
pub fn batched_energy<T: Real>(model: &LogitModel<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    chunked(x, |c| model.energy(c))
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Row-wise predicted class; ties go to the lowest index.
pub fn predictions<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    (0..logits.rows()).map(|i| argmax(logits.row(i))).collect()
}

fn softmax_row<T: Real>(row: &[T]) -> Vec<f64> {
    let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v.as_f64() - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn accuracy_from_logits<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    if logits.rows() != labels.len() {
        return Err(Error::shape("accuracy", format!("{} rows, {} labels", logits.rows(), labels.len())));
    }
    let hits = predictions(logits).iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn accuracy<T: Real>(model: &LogitModel<T>, ds: &Dataset<T>) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    accuracy_from_logits(&batched_logits(model, &ds.samples)?, &ds.labels)
}

/// Max softmax probability and correctness for every sample.
pub fn confidences<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(Vec<f64>, Vec<bool>)> {
    if logits.rows() != labels.len() {
        return Err(Error::shape("confidences", format!("{} rows, {} labels", logits.rows(), labels.len())));
    }
    Ok((0..labels.len())
        .map(|i| {
            let p = softmax_row(logits.row(i));
            let pred = argmax(logits.row(i));
            (p[pred], pred == labels[i])
        })
        .unzip())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    /// `bins + 1` equally spaced edges from 0 to 1.
    pub edges: Vec<f64>,
    pub mean_confidence: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub counts: Vec<usize>,
    pub ece: f64,
}

impl ReliabilityReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count,mean_confidence,accuracy\n");
        for i in 0..self.counts.len() {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                self.edges[i], self.edges[i + 1], self.counts[i], self.mean_confidence[i], self.accuracy[i]
            );
        }
        s
    }
}

pub const DEFAULT_ECE_BINS: usize = 20;

/// Bin `i` covers `[i/B, (i+1)/B)`; the last bin also holds 1.0.
fn bin_of(c: f64, edges: &[f64]) -> usize {
    let bins = edges.len() - 1;
    let mut k = ((c * bins as f64) as usize).min(bins - 1);
    while k > 0 && c < edges[k] {
        k -= 1;
    }
    while k + 1 < bins && c >= edges[k + 1] {
        k += 1;
    }
    k
}

/// Expected calibration error over equal-width confidence bins.
pub fn ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<ReliabilityReport> {
    if confidences.len() != correct.len() {
        return Err(Error::shape("ece", format!("{} confidences, {} outcomes", confidences.len(), correct.len())));
    }
    if bins == 0 {
        return Err(Error::invalid("ECE needs at least one bin"));
    }
    if let Some(bad) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::invalid(format!("confidence {} outside [0, 1]", bad)));
    }
    let edges: Vec<f64> = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    let mut conf_sum = vec![0.0; bins];
    let mut hit_sum = vec![0.0; bins];
    let mut counts = vec![0usize; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = bin_of(c, &edges);
        conf_sum[b] += c;
        hit_sum[b] += if ok { 1.0 } else { 0.0 };
        counts[b] += 1;
    }
    let n = confidences.len() as f64;
    let mut mean_confidence = vec![0.0; bins];
    let mut accuracy = vec![0.0; bins];
    let mut total = 0.0;
    for b in 0..bins {
        if counts[b] == 0 {
            continue;
        }
        mean_confidence[b] = conf_sum[b] / counts[b] as f64;
        accuracy[b] = hit_sum[b] / counts[b] as f64;
        total += counts[b] as f64 / n * (accuracy[b] - mean_confidence[b]).abs();
    }
    Ok(ReliabilityReport {
        edges,
        mean_confidence,
        accuracy,
        counts,
        ece: total,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OodMethod {
    /// `logsumexp(f(x)) = -E(x)`.
    Density,
    /// `max_y p(y|x)`.
    MaxProb,
}

impl FromStr for OodMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "density" => Ok(OodMethod::Density),
            "maxprob" => Ok(OodMethod::MaxProb),
            _ => Err(Error::Config(format!("unknown OOD score `{}`", s))),
        }
    }
}

/// Higher scores mean "more in-distribution".
pub fn ood_scores<T: Real>(model: &LogitModel<T>, x: &Tensor<T>, method: OodMethod) -> Result<Vec<f64>> {
    model.check_input(x)?;
    match method {
        OodMethod::Density => Ok(batched_energy(model, x)?.data().iter().map(|e| -e.as_f64()).collect()),
        OodMethod::MaxProb => {
            let logits = batched_logits(model, x)?;
            Ok((0..logits.rows())
                .map(|i| softmax_row(logits.row(i)).into_iter().fold(0.0, f64::max))
                .collect())
        }
    }
}

/// `P(in > out) + ½ P(in = out)` from midranks.
pub fn auroc(scores_in: &[f64], scores_out: &[f64]) -> Result<f64> {
    if scores_in.is_empty() || scores_out.is_empty() {
        return Err(Error::invalid("AUROC needs both score sets nonempty"));
    }
    if scores_in.iter().chain(scores_out).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("OOD score"));
    }
    let mut all: Vec<(f64, bool)> = scores_in
        .iter()
        .map(|&s| (s, true))
        .chain(scores_out.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the midrank of a tie group spanning 1-based positions start+1..=end
    // is start + 1 + end, an integer.
    let mut twice_rank_sum: u128 = 0;
    let mut start = 0;
    while start < all.len() {
        let mut end = start + 1;
        while end < all.len() && all[end].0 == all[start].0 {
            end += 1;
        }
        let twice_mid = (start + 1 + end) as u128;
        let members = all[start..end].iter().filter(|(_, is_in)| *is_in).count() as u128;
        twice_rank_sum += twice_mid * members;
        start = end;
    }
    let (ni, no) = (scores_in.len() as u128, scores_out.len() as u128);
    let twice_u = twice_rank_sum - ni * (ni + 1);
    Ok(twice_u as f64 / (2 * ni * no) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub method: OodMethod,
    pub scores_in: Vec<f64>,
    pub scores_out: Vec<f64>,
    pub auroc: f64,
}

pub fn ood_report<T: Real>(model: &LogitModel<T>, x_in: &Tensor<T>, x_out: &Tensor<T>, method: OodMethod) -> Result<OodReport> {
    let scores_in = ood_scores(model, x_in, method)?;
    let scores_out = ood_scores(model, x_out, method)?;
    let auroc = auroc(&scores_in, &scores_out)?;
    Ok(OodReport {
        method,
        scores_in,
        scores_out,
        auroc,
    })
}

/// Midpoints `½(xᵢ + xⱼ)` of uniformly drawn pairs with `i ≠ j`.
pub fn interp_ood<T: Real, R: Rng + ?Sized>(ds: &Dataset<T>, n: usize, rng: &mut R) -> Result<Tensor<T>> {
    if ds.len() < 2 {
        return Err(Error::invalid("interpolation needs at least two samples"));
    }
    let half = T::lit(0.5);
    let mut data = Vec::with_capacity(n * ds.samples.row_len());
    for _ in 0..n {
        let i = rng.random_range(0..ds.len());
        let mut j = rng.random_range(0..ds.len() - 1);
        if j >= i {
            j += 1;
        }
        data.extend(ds.samples.row(i).iter().zip(ds.samples.row(j)).map(|(&a, &b)| half * (a + b)));
    }
    let mut shape = vec![n];
    shape.extend_from_slice(ds.sample_shape());
    Tensor::new(shape, data)
}

/// Equal-width histogram as `(lo, hi, count)` rows.
pub fn histogram(values: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for v in finite {
        counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + i as f64 * width, lo + (i + 1) as f64 * width, c))
        .collect()
}

pub fn histogram_csv(rows: &[(f64, f64, usize)]) -> String {
    let mut s = String::from("lo,hi,count\n");
    for (lo, hi, c) in rows {
        let _ = writeln!(s, "{lo},{hi},{c}");
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackNorm {
    Linf,
    L2,
}

impl FromStr for AttackNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linf" => Ok(AttackNorm::Linf),
            "l2" => Ok(AttackNorm::L2),
            _ => Err(Error::Config(format!("unknown attack norm `{}`", s))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    pub norm: AttackNorm,
    pub eps: f64,
    pub steps: usize,
    /// Defaults to `2.5·ε/steps`.
    pub step_size: Option<f64>,
    pub random_start: bool,
}

impl PgdConfig {
    pub fn new(norm: AttackNorm, eps: f64) -> Self {
        PgdConfig {
            norm,
            eps,
            steps: 40,
            step_size: None,
            random_start: true,
        }
    }

    pub fn effective_step(&self) -> f64 {
        self.step_size.unwrap_or(2.5 * self.eps / self.steps.max(1) as f64)
    }
}

/// Cross-entropy gradient with respect to the inputs, eval mode.
pub fn input_xent_grad<T: Real>(model: &LogitModel<T>, x: &Tensor<T>, y: &[usize]) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let pv = ParamVars::record(&mut g, &model.params, false);
    let xv = g.leaf(x.clone());
    let fwd = model.forward_graph(&mut g, &pv, xv, Mode::Eval)?;
    let loss = g.softmax_cross_entropy(fwd.logits, y)?;
    let grad = g.gradient(loss, &[xv])?.remove(0);
    if !grad.all_finite() {
        return Err(Error::NonFinite("attack gradient"));
    }
    Ok(grad)
}

fn l2_row<T: Real>(v: &[T]) -> f64 {
    v.iter().map(|a| a.as_f64() * a.as_f64()).sum::<f64>().sqrt()
}

/// Largest deviation of `adv` from `x` in the attack norm, measured in `T`
/// arithmetic for L∞ and in `f64` over `T` differences for L2.
pub fn attack_distance<T: Real>(x: &[T], adv: &[T], norm: AttackNorm) -> f64 {
    match norm {
        AttackNorm::Linf => x.iter().zip(adv).map(|(&a, &b)| (b - a).abs().as_f64()).fold(0.0, f64::max),
        AttackNorm::L2 => x.iter().zip(adv).map(|(&a, &b)| (b - a).as_f64().powi(2)).sum::<f64>().sqrt(),
    }
}

/// Places `candidate` inside both the ε-ball around `x` and the clamp range.
/// Float rounding can push `x + δ` a hair outside the ball, so the offset is
/// shrunk until the constraint holds exactly.
fn project_row<T: Real>(x: &[T], candidate: &mut [T], eps: f64, norm: AttackNorm, clamp: ClampRange) {
    let (lo, hi) = clamp.bounds::<T>();
    let eps_t = T::lit(eps);
    let mut delta: Vec<T> = x.iter().zip(candidate.iter()).map(|(&a, &c)| c - a).collect();
    match norm {
        AttackNorm::Linf => {
            for d in &mut delta {
                *d = d.max(-eps_t).min(eps_t);
            }
        }
        AttackNorm::L2 => {
            let n = l2_row(&delta);
            if n > eps {
                let s = T::lit(eps / n);
                for d in &mut delta {
                    *d *= s;
                }
            }
        }
    }
    loop {
        for ((c, &a), &d) in candidate.iter_mut().zip(x).zip(&delta) {
            *c = (a + d).max(lo).min(hi);
        }
        if attack_distance(x, candidate, norm) <= eps {
            return;
        }
        let shrink = T::lit(0.999);
        for d in &mut delta {
            *d *= shrink;
        }
    }
}

/// Projected gradient ascent on the cross-entropy inside an ε-ball.
pub fn pgd_attack<T: Real, R: Rng + ?Sized>(
    model: &LogitModel<T>,
    x: &Tensor<T>,
    y: &[usize],
    cfg: &PgdConfig,
    clamp: ClampRange,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if !(cfg.eps >= 0.0 && cfg.eps.is_finite()) {
        return Err(Error::invalid("attack radius must be finite and non-negative"));
    }
    if !clamp.contains_all(x.data()) {
        return Err(Error::invalid("attack inputs lie outside the clamp range"));
    }
    if x.rows() != y.len() {
        return Err(Error::shape("pgd_attack", format!("{} rows, {} labels", x.rows(), y.len())));
    }
    if cfg.eps == 0.0 || x.rows() == 0 {
        return Ok(x.clone());
    }
    let len = x.row_len();
    let mut adv = x.clone();
    if cfg.random_start {
        for i in 0..x.rows() {
            let row = adv.row_mut(i);
            match cfg.norm {
                AttackNorm::Linf => {
                    for v in row.iter_mut() {
                        *v += T::lit(rng.random_range(-cfg.eps..=cfg.eps));
                    }
                }
                AttackNorm::L2 => {
                    let dir: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
                    let n = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-12);
                    let r = cfg.eps * rng.random::<f64>();
                    for (v, d) in row.iter_mut().zip(&dir) {
                        *v += T::lit(r * d / n);
                    }
                }
            }
            project_row(x.row(i), adv.row_mut(i), cfg.eps, cfg.norm, clamp);
        }
    }
    let step = cfg.effective_step();
    for _ in 0..cfg.steps {
        let grad = input_xent_grad(model, &adv, y)?;
        for i in 0..x.rows() {
            let g = grad.row(i);
            let row = adv.row_mut(i);
            match cfg.norm {
                AttackNorm::Linf => {
                    for (v, &gv) in row.iter_mut().zip(g) {
                        if gv > T::zero() {
                            *v += T::lit(step);
                        } else if gv < T::zero() {
                            *v -= T::lit(step);
                        }
                    }
                }
                AttackNorm::L2 => {
                    let n = l2_row(g);
                    if n > 0.0 {
                        for (v, &gv) in row.iter_mut().zip(g) {
                            *v += T::lit(step * gv.as_f64() / n);
                        }
                    }
                }
            }
            project_row(x.row(i), adv.row_mut(i), cfg.eps, cfg.norm, clamp);
        }
    }
    Ok(adv)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessPoint {
    pub eps: f64,
    pub accuracy: f64,
    /// Largest observed perturbation in the attack norm.
    pub max_distance: f64,
}

/// Accuracy on PGD-perturbed inputs.
pub fn robust_accuracy<T: Real, R: Rng + ?Sized>(model: &LogitModel<T>, ds: &Dataset<T>, cfg: &PgdConfig, rng: &mut R) -> Result<RobustnessPoint> {
    let mut hits = 0usize;
    let mut max_distance: f64 = 0.0;
    for start in (0..ds.len()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(ds.len())).collect();
        let part = ds.subset(&idx);
        let adv = pgd_attack(model, &part.samples, &part.labels, cfg, ds.meta.clamp, rng)?;
        for i in 0..adv.rows() {
            max_distance = max_distance.max(attack_distance(part.samples.row(i), adv.row(i), cfg.norm));
        }
        let preds = predictions(&model.logits(&adv)?);
        hits += preds.iter().zip(&part.labels).filter(|(p, y)| p == y).count();
    }
    if ds.is_empty() {
        return Err(Error::invalid("robust accuracy of an empty set"));
    }
    Ok(RobustnessPoint {
        eps: cfg.eps,
        accuracy: hits as f64 / ds.len() as f64,
        max_distance,
    })
}

/// A parameterized scalar energy over a data batch, for landscape probing.
pub trait EnergyLandscape<T: Real> {
    fn landscape_params(&self) -> &ParameterSet<T>;
    fn landscape_params_mut(&mut self) -> &mut ParameterSet<T>;
    /// `Σ_x E_θ(x)` at the current parameters.
    fn total_energy(&self, x: &Tensor<T>) -> Result<f64>;
}

impl<T: Real> EnergyLandscape<T> for LogitModel<T> {
    fn landscape_params(&self) -> &ParameterSet<T> {
        &self.params
    }

    fn landscape_params_mut(&mut self) -> &mut ParameterSet<T> {
        &mut self.params
    }

    fn total_energy(&self, x: &Tensor<T>) -> Result<f64> {
        Ok(batched_energy(self, x)?.sum_f64())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirectionNorm {
    /// Rescale each output-unit slice to the norm of the matching parameter slice.
    Filter,
    None,
}

impl FromStr for DirectionNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "filter" => Ok(DirectionNorm::Filter),
            "none" => Ok(DirectionNorm::None),
            _ => Err(Error::Config(format!("unknown direction normalization `{}`", s))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeConfig {
    /// 1 or 2.
    pub directions: usize,
    /// Offsets along each direction; a 2D slice uses their Cartesian square.
    pub grid: Vec<f64>,
    pub normalization: DirectionNorm,
    pub seed: u64,
}

impl LandscapeConfig {
    /// `points` evenly spaced offsets on `[lo, hi]`.
    pub fn linspace(lo: f64, hi: f64, points: usize) -> Vec<f64> {
        if points < 2 {
            return vec![lo];
        }
        (0..points)
            .map(|i| {
                let t = i as f64 / (points - 1) as f64;
                let v = lo + (hi - lo) * t;
                if v.abs() < 1e-12 * (hi - lo).abs() {
                    0.0
                } else {
                    v
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapePoint {
    pub a: f64,
    pub b: Option<f64>,
    /// `None` when the energy was not finite.
    pub energy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeSlice {
    pub direction_seeds: Vec<u64>,
    pub normalization: DirectionNorm,
    pub points: Vec<LandscapePoint>,
    /// Energy at the unperturbed parameters.
    pub center: f64,
}

impl LandscapeSlice {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("a,b,energy\n");
        for p in &self.points {
            let b = p.b.map(|v| v.to_string()).unwrap_or_default();
            let e = p.energy.map(|v| v.to_string()).unwrap_or_else(|| "nan".into());
            let _ = writeln!(s, "{},{},{}", p.a, b, e);
        }
        s
    }
}

/// Gaussian direction for every parameter tensor. With filter
/// normalization, each output-unit slice (column of a `[in, out]` matrix,
/// leading slice of higher-rank kernels) is rescaled to the norm of the
/// parameter slice, and rank-0/1 tensors (biases, norm scales) get no
/// direction at all.
pub fn landscape_direction<T: Real>(params: &ParameterSet<T>, norm: DirectionNorm, seed: u64) -> ParameterSet<T> {
    let mut rng = seeds::rng(seed);
    params.map(|_, p| {
        let mut d: Vec<f64> = (0..p.numel()).map(|_| rng.sample(StandardNormal)).collect();
        if norm == DirectionNorm::Filter {
            let shape = p.shape();
            if shape.len() <= 1 {
                d.iter_mut().for_each(|v| *v = 0.0);
            } else {
                let pv = p.to_f64_vec();
                let slices: Vec<Vec<usize>> = if shape.len() == 2 {
                    (0..shape[1]).map(|j| (0..shape[0]).map(|i| i * shape[1] + j).collect()).collect()
                } else {
                    let per = p.numel() / shape[0];
                    (0..shape[0]).map(|o| (o * per..(o + 1) * per).collect()).collect()
                };
                for idx in slices {
                    let pn = idx.iter().map(|&i| pv[i] * pv[i]).sum::<f64>().sqrt();
                    let dn = idx.iter().map(|&i| d[i] * d[i]).sum::<f64>().sqrt();
                    let s = if dn > 0.0 { pn / dn } else { 0.0 };
                    for i in idx {
                        d[i] *= s;
                    }
                }
            }
        }
        Tensor::new(p.shape().to_vec(), d.into_iter().map(T::lit).collect()).expect("shape")
    })
}

/// Evaluates `Σ_x E(θ + a·d₁ [+ b·d₂])` over the grid and restores θ exactly.
pub fn landscape_slice<T: Real, M: EnergyLandscape<T> + ?Sized>(model: &mut M, x: &Tensor<T>, cfg: &LandscapeConfig) -> Result<LandscapeSlice> {
    if !(1..=2).contains(&cfg.directions) {
        return Err(Error::invalid("landscape slices use one or two directions"));
    }
    if !cfg.grid.contains(&0.0) {
        return Err(Error::invalid("landscape grid must contain offset 0"));
    }
    let seeds: Vec<u64> = (0..cfg.directions as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    let dirs: Vec<ParameterSet<T>> = seeds
        .iter()
        .map(|&s| landscape_direction(model.landscape_params(), cfg.normalization, s))
        .collect();
    let center = model.total_energy(x)?;
    let saved = model.landscape_params().clone();
    let mut offsets: Vec<(f64, Option<f64>)> = Vec::new();
    for &a in &cfg.grid {
        if cfg.directions == 1 {
            offsets.push((a, None));
        } else {
            offsets.extend(cfg.grid.iter().map(|&b| (a, Some(b))));
        }
    }
    let mut points = Vec::with_capacity(offsets.len());
    let mut failure = None;
    for (a, b) in offsets {
        let energy = if a == 0.0 && b.unwrap_or(0.0) == 0.0 {
            center
        } else {
            let p = model.landscape_params_mut();
            if let Err(e) = p.axpy(T::lit(a), &dirs[0]) {
                failure = Some(e);
                break;
            }
            if let Some(b) = b {
                if let Err(e) = p.axpy(T::lit(b), &dirs[1]) {
                    failure = Some(e);
                    break;
                }
            }
            let e = model.total_energy(x);
            *model.landscape_params_mut() = saved.clone();
            match e {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => f64::NAN,
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        };
        points.push(LandscapePoint {
            a,
            b,
            energy: energy.is_finite().then_some(energy),
        });
    }
    *model.landscape_params_mut() = saved;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(LandscapeSlice {
        direction_seeds: seeds,
        normalization: cfg.normalization,
        points,
        center,
    })
}

fn mean_cov(rows: &Tensor<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, f) = (rows.rows(), rows.row_len());
    let m = DMatrix::from_row_slice(n, f, rows.data());
    let mean = DVector::from_iterator(f, (0..f).map(|j| m.column(j).sum() / n as f64));
    let mut centered = m;
    for j in 0..f {
        let mu = mean[j];
        centered.column_mut(j).iter_mut().for_each(|v| *v -= mu);
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mean, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

pub const FRECHET_RIDGE: f64 = 1e-6;

/// Fréchet distance between Gaussian fits of two `[n, F]` feature sets.
///
/// Both covariances get `+1e-6·I`; `tr (Σ₁Σ₂)^{1/2}` is evaluated as the
/// trace of the square root of the symmetric `Σ₁^{1/2} Σ₂ Σ₁^{1/2}`, with
/// negative eigenvalues clipped to zero.
pub fn frechet_distance(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    if a.rank() != 2 || b.rank() != 2 || a.row_len() != b.row_len() {
        return Err(Error::shape("frechet_distance", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let f = a.row_len();
    if a.rows() < f + 1 || b.rows() < f + 1 {
        return Err(Error::invalid(format!("need at least {} samples per set for {} features", f + 1, f)));
    }
    if !a.all_finite() || !b.all_finite() {
        return Err(Error::NonFinite("features"));
    }
    let (m1, mut s1) = mean_cov(a);
    let (m2, mut s2) = mean_cov(b);
    let ridge = DMatrix::identity(f, f) * FRECHET_RIDGE;
    s1 += &ridge;
    s2 += &ridge;
    let r1 = sym_sqrt(&s1);
    let inner = &r1 * &s2 * &r1;
    let sym = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(sym).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = (m1 - m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

/// Fréchet distance between penultimate features of two sample sets.
pub fn feature_frechet<T: Real>(model: &LogitModel<T>, real: &Tensor<T>, generated: &Tensor<T>) -> Result<f64> {
    let fa = batched_features(model, real)?.cast::<f64>();
    let fb = batched_features(model, generated)?.cast::<f64>();
    frechet_distance(&fa, &fb)
}

/// Number of centers with at least one sample within `radius` (Euclidean).
pub fn mode_coverage<T: Real>(samples: &Tensor<T>, centers: &[Vec<f64>], radius: f64) -> Result<usize> {
    if !(radius > 0.0) {
        return Err(Error::invalid("coverage radius must be positive"));
    }
    let dim = samples.row_len();
    if centers.iter().any(|c| c.len() != dim) {
        return Err(Error::shape("mode_coverage", "center and sample dimensions differ"));
    }
    let r2 = radius * radius;
    Ok(centers
        .iter()
        .filter(|c| {
            (0..samples.rows()).any(|i| {
                samples.row(i).iter().zip(c.iter()).map(|(s, c)| (s.as_f64() - c).powi(2)).sum::<f64>() <= r2
            })
        })
        .count())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub accuracy: f64,
    pub nll: f64,
    pub ece: f64,
    pub mean_energy: f64,
    pub reliability: ReliabilityReport,
}

/// Accuracy, NLL, calibration and mean energy on one labeled set.
pub fn evaluate_model<T: Real>(model: &LogitModel<T>, ds: &Dataset<T>) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::invalid("evaluation of an empty set"));
    }
    let logits = batched_logits(model, &ds.samples)?;
    let (conf, correct) = confidences(&logits, &ds.labels)?;
    let reliability = ece(&conf, &correct, DEFAULT_ECE_BINS)?;
    let nll = (0..ds.len())
        .map(|i| -softmax_row(logits.row(i))[ds.labels[i]].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / ds.len() as f64;
    let mean_energy = batched_energy(model, &ds.samples)?.sum_f64() / ds.len() as f64;
    Ok(EvalReport {
        samples: ds.len(),
        accuracy: accuracy_from_logits(&logits, &ds.labels)?,
        nll,
        ece: reliability.ece,
        mean_energy,
        reliability,
    })
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format("json", e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::rng;

    #[test]
    fn ece_examples() {
        let r = ece(&[1.0; 5], &[true; 5], 20).unwrap();
        assert_eq!(r.ece, 0.0);
        let r = ece(&[0.9, 0.8, 0.7, 0.6], &[true, true, false, false], 1).unwrap();
        assert!((r.ece - 0.25).abs() < 1e-15);
        assert!(ece(&[0.5], &[true, false], 20).is_err());
        assert!(ece(&[1.5], &[true], 20).is_err());
    }

    #[test]
    fn bins_follow_edges_exactly() {
        let edges: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        for (i, &e) in edges.iter().enumerate().take(20) {
            assert_eq!(bin_of(e, &edges), i);
        }
        assert_eq!(bin_of(1.0, &edges), 19);
        assert_eq!(bin_of(0.0, &edges), 0);
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[3.0, 4.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0, 2.0], &[2.0, 1.0]).unwrap(), 0.5);
        assert_eq!(auroc(&[2.0, 0.0], &[1.0]).unwrap(), 0.5);
        assert!(auroc(&[], &[1.0]).is_err());
        assert!(auroc(&[f64::NAN], &[1.0]).is_err());
    }

    #[test]
    fn histogram_counts_everything() {
        let h = histogram(&[0.0, 0.5, 1.0, 1.0, f64::NAN], 4);
        assert_eq!(h.iter().map(|r| r.2).sum::<usize>(), 4);
        assert_eq!(h[3].2, 2);
    }

    #[test]
    fn linspace_hits_zero() {
        let g = LandscapeConfig::linspace(-1.0, 1.0, 41);
        assert_eq!(g.len(), 41);
        assert_eq!(g[20], 0.0);
    }

    #[test]
    fn projection_respects_ball_exactly() {
        let mut r = rng(3);
        for norm in [AttackNorm::Linf, AttackNorm::L2] {
            for _ in 0..2000 {
                let x: Vec<f32> = (0..5).map(|_| r.random_range(-1.0f32..=1.0)).collect();
                let mut c: Vec<f32> = (0..5).map(|_| r.random_range(-2.0f32..=2.0)).collect();
                let eps = r.random_range(1e-4..0.5);
                project_row(&x, &mut c, eps, norm, ClampRange::UNIT);
                assert!(attack_distance(&x, &c, norm) <= eps);
                assert!(ClampRange::UNIT.contains_all(&c));
            }
        }
    }

    #[test]
    fn frechet_closed_forms() {
        let mut r = rng(9);
        let a: Vec<f64> = (0..400 * 3).map(|_| r.sample(StandardNormal)).collect();
        let x = Tensor::new(vec![400, 3], a.clone()).unwrap();
        assert!(frechet_distance(&x, &x).unwrap() < 1e-6);
        let shift = [0.5, -1.0, 2.0];
        let y = Tensor::new(vec![400, 3], a.iter().enumerate().map(|(i, v)| v + shift[i % 3]).collect()).unwrap();
        let d = frechet_distance(&x, &y).unwrap();
        assert!((d - 5.25).abs() < 1e-6, "{d}");
        assert!(frechet_distance(&x.select_rows(&[0, 1, 2]), &x).is_err());
    }

    #[test]
    fn coverage_examples() {
        let centers = crate::data::gaussians8_centers().into_iter().map(|c| c.to_vec()).collect::<Vec<_>>();
        let at: Vec<f64> = centers.iter().flatten().copied().collect();
        let s = Tensor::new(vec![8, 2], at).unwrap();
        assert_eq!(mode_coverage(&s, &centers, 0.1).unwrap(), 8);
        let far = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert_eq!(mode_coverage(&far, &centers, 0.5).unwrap(), 0);
        assert!(mode_coverage(&far, &centers, 0.0).is_err());
    }
}
