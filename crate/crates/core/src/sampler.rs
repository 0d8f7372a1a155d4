//! SGLD chains over input space, the replay buffer that warm-starts them, and
//! the informative (per-class Gaussian) initial distribution.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor};
use crate::data::{ClampRange, Dataset};
use crate::error::{Error, Result};
use crate::model::LogitModel;
use crate::seeds;

/// Anything that exposes per-sample energies and their input gradients.
pub trait EnergyFunction<T: Real> {
    /// Returns `(energies [batch], ∂E/∂x)`; with `class`, the conditional energy.
    fn energy_and_input_grad(&self, x: &Tensor<T>, class: Option<usize>) -> Result<(Tensor<T>, Tensor<T>)>;
}

impl<T: Real> EnergyFunction<T> for LogitModel<T> {
    fn energy_and_input_grad(&self, x: &Tensor<T>, class: Option<usize>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.energy_input_grad(x, class)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgldConfig {
    /// Number of update steps K.
    pub steps: usize,
    /// Gradient step size α.
    pub step_size: f64,
    /// Noise scale σ.
    pub noise: f64,
    pub clamp: ClampRange,
}

impl Default for SgldConfig {
    fn default() -> Self {
        SgldConfig {
            steps: 5,
            step_size: 1.0,
            noise: 0.0,
            clamp: ClampRange::UNIT,
        }
    }
}

impl SgldConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size >= 0.0) || !(self.noise >= 0.0) {
            return Err(Error::invalid("SGLD step size and noise must be non-negative"));
        }
        self.clamp.validate()
    }
}

/// Runs `x_t = clamp(x_{t-1} - α ∂E/∂x + σ ε)` for K steps.
///
/// The returned tensor carries no graph history, so gradients never flow
/// back through the chain.
pub fn sgld_chain<T: Real, E: EnergyFunction<T> + ?Sized, R: Rng + ?Sized>(
    energy: &E,
    x0: &Tensor<T>,
    cfg: &SgldConfig,
    rng: &mut R,
    class: Option<usize>,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    if !cfg.clamp.contains_all(x0.data()) {
        return Err(Error::invalid("chain start lies outside the clamp range"));
    }
    let (lo, hi) = cfg.clamp.bounds::<T>();
    let alpha = T::lit(cfg.step_size);
    let sigma = T::lit(cfg.noise);
    let mut x = x0.clone();
    for step in 0..cfg.steps {
        let (_, grad) = energy.energy_and_input_grad(&x, class)?;
        if !grad.all_finite() {
            return Err(Error::Divergence {
                step: step as u64,
                reason: "non-finite energy gradient in SGLD".into(),
            });
        }
        for (v, &g) in x.data_mut().iter_mut().zip(grad.data()) {
            let mut next = *v - alpha * g;
            if cfg.noise > 0.0 {
                let n: f64 = rng.sample(StandardNormal);
                next += sigma * T::lit(n);
            }
            *v = next.max(lo).min(hi);
        }
    }
    Ok(x)
}

/// Per-class diagonal Gaussian used to start fresh chains.
#[derive(Clone, Debug, PartialEq)]
pub struct InitDistribution<T> {
    /// `[classes, sample...]`
    pub means: Tensor<T>,
    /// `[classes, sample...]`, every entry ≥ `floor`.
    pub variances: Tensor<T>,
    pub floor: f64,
    pub clamp: ClampRange,
}

pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-4;

/// Fits per-class empirical means and (floored) diagonal variances.
pub fn fit_informative_init<T: Real>(dataset: &Dataset<T>, class_count: usize, floor: f64) -> Result<InitDistribution<T>> {
    if !(floor > 0.0) {
        return Err(Error::invalid("variance floor must be positive"));
    }
    let d = dataset.samples.row_len();
    let mut sum = vec![0.0f64; class_count * d];
    let mut sq = vec![0.0f64; class_count * d];
    let mut count = vec![0usize; class_count];
    for (i, &y) in dataset.labels.iter().enumerate() {
        if y >= class_count {
            return Err(Error::invalid(format!("label {} out of range for {} classes", y, class_count)));
        }
        count[y] += 1;
        for (j, &v) in dataset.samples.row(i).iter().enumerate() {
            sum[y * d + j] += v.as_f64();
        }
    }
    if let Some(empty) = count.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!("class {} has no samples", empty)));
    }
    let mean: Vec<f64> = sum
        .iter()
        .enumerate()
        .map(|(k, &s)| s / count[k / d] as f64)
        .collect();
    for (i, &y) in dataset.labels.iter().enumerate() {
        for (j, &v) in dataset.samples.row(i).iter().enumerate() {
            let dv = v.as_f64() - mean[y * d + j];
            sq[y * d + j] += dv * dv;
        }
    }
    let var: Vec<f64> = sq
        .iter()
        .enumerate()
        .map(|(k, &s)| (s / count[k / d] as f64).max(floor))
        .collect();
    let mut shape = vec![class_count];
    shape.extend_from_slice(dataset.samples.row_shape());
    Ok(InitDistribution {
        means: Tensor::from_f64(&shape, &mean)?,
        variances: Tensor::from_f64(&shape, &var)?,
        floor,
        clamp: dataset.meta.clamp,
    })
}

impl<T: Real> InitDistribution<T> {
    pub fn classes(&self) -> usize {
        self.means.rows()
    }

    pub fn sample_shape(&self) -> &[usize] {
        self.means.row_shape()
    }

    fn draw_into<R: Rng + ?Sized>(&self, class: usize, rng: &mut R, out: &mut Vec<T>) {
        let (lo, hi) = self.clamp.bounds::<T>();
        for (&m, &v) in self.means.row(class).iter().zip(self.variances.row(class)) {
            let n: f64 = rng.sample(StandardNormal);
            let x = m + v.sqrt() * T::lit(n);
            out.push(x.max(lo).min(hi));
        }
    }

    fn batch(&self, rows: usize, data: Vec<T>) -> Tensor<T> {
        let mut shape = vec![rows];
        shape.extend_from_slice(self.sample_shape());
        Tensor::new(shape, data).expect("init batch shape")
    }

    /// Draws `n` samples, each from a uniformly chosen class; returns the classes too.
    pub fn draw_labeled<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Tensor<T>, Vec<usize>) {
        let mut data = Vec::with_capacity(n * self.means.row_len());
        let mut classes = Vec::with_capacity(n);
        for _ in 0..n {
            let c = rng.random_range(0..self.classes());
            self.draw_into(c, rng, &mut data);
            classes.push(c);
        }
        (self.batch(n, data), classes)
    }

    pub fn draw<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor<T> {
        self.draw_labeled(n, rng).0
    }

    /// Draws `n` samples from one class's Gaussian.
    pub fn draw_class<R: Rng + ?Sized>(&self, class: usize, n: usize, rng: &mut R) -> Result<Tensor<T>> {
        if class >= self.classes() {
            return Err(Error::invalid(format!("class {} out of range for {} classes", class, self.classes())));
        }
        let mut data = Vec::with_capacity(n * self.means.row_len());
        for _ in 0..n {
            self.draw_into(class, rng, &mut data);
        }
        Ok(self.batch(n, data))
    }

    pub fn to_entries(&self) -> Vec<(String, Tensor<T>)> {
        vec![
            ("init.mean".into(), self.means.clone()),
            ("init.var".into(), self.variances.clone()),
            ("init.floor".into(), Tensor::from_vec(vec![T::lit(self.floor)])),
            ("init.clamp".into(), Tensor::from_vec(vec![T::lit(self.clamp.lo), T::lit(self.clamp.hi)])),
        ]
    }

    pub fn from_entries(entries: &[(String, Tensor<T>)]) -> Result<Self> {
        let find = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::format("checkpoint", format!("missing entry `{}`", name)))
        };
        let means = find("init.mean")?;
        let variances = find("init.var")?;
        if means.shape() != variances.shape() || means.rank() < 2 {
            return Err(Error::format("checkpoint", "init mean/variance shapes disagree"));
        }
        let floor = find("init.floor")?.to_f64_vec();
        let clamp = find("init.clamp")?.to_f64_vec();
        if floor.len() != 1 || clamp.len() != 2 {
            return Err(Error::format("checkpoint", "bad init metadata"));
        }
        let clamp = ClampRange::new(clamp[0], clamp[1])?;
        Ok(InitDistribution {
            means,
            variances,
            floor: floor[0],
            clamp,
        })
    }
}

/// Chain starts drawn from the buffer, with how many came from the init distribution.
pub struct BufferDraw<T> {
    pub samples: Tensor<T>,
    pub fresh: usize,
}

/// Fixed-capacity store of past chain endpoints.
#[derive(Clone, Debug)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    sample_shape: Vec<usize>,
    data: Vec<T>,
    fill: usize,
    pushed: u64,
    /// Probability γ of reinitializing a chain from the init distribution.
    pub reinit_prob: f64,
    pub clamp: ClampRange,
    rng: ChaCha8Rng,
}

impl<T: Real> ReplayBuffer<T> {
    /// `seed` drives the slot choice once the buffer is full.
    pub fn new(capacity: usize, sample_shape: &[usize], reinit_prob: f64, clamp: ClampRange, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("buffer capacity must be positive"));
        }
        if !(0.0..=1.0).contains(&reinit_prob) {
            return Err(Error::invalid("reinitialization probability must lie in [0, 1]"));
        }
        clamp.validate()?;
        Ok(ReplayBuffer {
            capacity,
            sample_shape: sample_shape.to_vec(),
            data: Vec::new(),
            fill: 0,
            pushed: 0,
            reinit_prob,
            clamp,
            rng: seeds::rng(seed),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn fill(&self) -> usize {
        self.fill
    }

    pub fn pushed(&self) -> u64 {
        self.pushed
    }

    fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn slot(&self, i: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    /// All stored samples as one `[fill, sample...]` tensor.
    pub fn contents(&self) -> Tensor<T> {
        let mut shape = vec![self.fill];
        shape.extend_from_slice(&self.sample_shape);
        Tensor::new(shape, self.data.clone()).expect("buffer shape")
    }

    /// Draws `n` chain starts: each independently from a uniformly random slot
    /// with probability `1 - γ`, otherwise from `init`. An empty buffer always
    /// draws from `init`.
    pub fn draw<R: Rng + ?Sized>(&self, init: &InitDistribution<T>, n: usize, rng: &mut R) -> Result<BufferDraw<T>> {
        if init.sample_shape() != self.sample_shape.as_slice() {
            return Err(Error::shape("buffer_draw", "init distribution and buffer sample shapes differ"));
        }
        let mut data = Vec::with_capacity(n * self.sample_len());
        let mut fresh = 0;
        for _ in 0..n {
            let reuse = self.fill > 0 && rng.random::<f64>() >= self.reinit_prob;
            if reuse {
                let slot = rng.random_range(0..self.fill);
                data.extend_from_slice(self.slot(slot));
            } else {
                let c = rng.random_range(0..init.classes());
                init.draw_into(c, rng, &mut data);
                fresh += 1;
            }
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&self.sample_shape);
        Ok(BufferDraw {
            samples: Tensor::new(shape, data)?,
            fresh,
        })
    }

    /// Appends samples until full, then overwrites uniformly random slots.
    /// Returns the slot written for each sample.
    pub fn push(&mut self, samples: &Tensor<T>) -> Result<Vec<usize>> {
        if samples.row_shape() != self.sample_shape.as_slice() {
            return Err(Error::shape(
                "buffer_push",
                format!("rows {:?}, buffer holds {:?}", samples.row_shape(), self.sample_shape),
            ));
        }
        if !self.clamp.contains_all(samples.data()) {
            return Err(Error::invalid("pushed samples lie outside the clamp range"));
        }
        let len = self.sample_len();
        let mut slots = Vec::with_capacity(samples.rows());
        for i in 0..samples.rows() {
            let row = samples.row(i);
            let slot = if self.fill < self.capacity {
                self.data.extend_from_slice(row);
                self.fill += 1;
                self.fill - 1
            } else {
                let s = self.rng.random_range(0..self.capacity);
                self.data[s * len..(s + 1) * len].copy_from_slice(row);
                s
            };
            slots.push(slot);
            self.pushed += 1;
        }
        Ok(slots)
    }
}
