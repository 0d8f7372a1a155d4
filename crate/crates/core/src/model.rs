//! Classifier networks whose logits define the energy.
//!
//! For logits `f(x)`, the marginal energy is `E(x) = -logsumexp_y f(x)[y]` and
//! the class-conditional energy is `-f(x)[y]`. The partition function is never
//! computed; every density score is relative.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Graph, ParamVars, ParameterSet, Real, Tensor, Var};
use crate::error::{Error, Result};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum InputKind {
    Flat { dim: usize },
    Image { channels: usize, height: usize, width: usize },
}

impl InputKind {
    /// Shape of a single sample (no batch axis).
    pub fn sample_shape(&self) -> Vec<usize> {
        match *self {
            InputKind::Flat { dim } => vec![dim],
            InputKind::Image { channels, height, width } => vec![channels, height, width],
        }
    }

    pub fn numel(&self) -> usize {
        self.sample_shape().iter().product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Architecture {
    /// Dense layers of the given widths, then the class layer.
    Mlp { hidden: Vec<usize> },
    /// Two 3×3 conv blocks (conv, norm, activation, 2×2 average pool), one
    /// hidden dense layer, then the class layer.
    Cnn { channels: [usize; 2], dense: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    None,
    BatchNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input: InputKind,
    pub arch: Architecture,
    pub classes: usize,
    pub norm: NormMode,
    pub activation: Activation,
    /// Inputs are divided by this before the first layer.
    pub input_scale: f64,
}

impl ModelConfig {
    /// `dim → 128 → 128 → classes` MLP for 2D toy densities.
    pub fn toy_mlp(dim: usize, classes: usize) -> Self {
        ModelConfig {
            input: InputKind::Flat { dim },
            arch: Architecture::Mlp { hidden: vec![128, 128] },
            classes,
            norm: NormMode::None,
            activation: Activation::Relu,
            input_scale: 1.0,
        }
    }

    /// Small CNN for images up to 32×32, without normalization layers.
    pub fn small_cnn(channels: usize, height: usize, width: usize, classes: usize) -> Self {
        ModelConfig {
            input: InputKind::Image { channels, height, width },
            arch: Architecture::Cnn { channels: [16, 32], dense: 64 },
            classes,
            norm: NormMode::None,
            activation: Activation::Relu,
            input_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("class count must be at least 2"));
        }
        if self.input.sample_shape().contains(&0) {
            return Err(Error::invalid("input extents must be positive"));
        }
        match &self.arch {
            Architecture::Mlp { hidden } => {
                if hidden.contains(&0) {
                    return Err(Error::invalid("layer widths must be positive"));
                }
            }
            Architecture::Cnn { channels, dense } => {
                if channels.contains(&0) || *dense == 0 {
                    return Err(Error::invalid("layer widths must be positive"));
                }
                match self.input {
                    InputKind::Image { height, width, .. } if height % 4 == 0 && width % 4 == 0 => {}
                    _ => return Err(Error::invalid("CNN needs image input with sides divisible by 4")),
                }
            }
        }
        if !(self.input_scale > 0.0 && self.input_scale.is_finite()) {
            return Err(Error::invalid("input scale must be positive"));
        }
        if let Activation::LeakyRelu { slope } = self.activation {
            if !(0.0..1.0).contains(&slope) {
                return Err(Error::invalid("leaky-relu slope must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    /// Width of the penultimate (feature) layer, if any.
    pub fn feature_dim(&self) -> Option<usize> {
        match &self.arch {
            Architecture::Mlp { hidden } => hidden.last().copied(),
            Architecture::Cnn { dense, .. } => Some(*dense),
        }
    }
}

/// Graph outputs of one forward pass.
pub struct Forward<T> {
    pub logits: Var,
    /// Penultimate activations; `None` for a model without hidden layers.
    pub features: Option<Var>,
    /// Training-mode batch statistics per norm layer.
    pub batch_stats: Vec<(String, BatchStats<T>)>,
}

/// A classifier `f(x)` with trainable parameters and batch-norm state.
#[derive(Clone, Debug)]
pub struct LogitModel<T> {
    pub config: ModelConfig,
    pub params: ParameterSet<T>,
    pub norm_state: ParameterSet<T>,
}

fn kaiming_uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

impl<T: Real> LogitModel<T> {
    /// Kaiming-uniform weights, zero biases, unit norm scales.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterSet::new();
        let mut norm_state = ParameterSet::new();
        let bn = config.norm == NormMode::BatchNorm;
        let mut add_norm = |params: &mut ParameterSet<T>, idx: usize, width: usize| -> Result<()> {
            if bn {
                params.insert(format!("bn{idx}.weight"), Tensor::full(&[width], T::one()))?;
                params.insert(format!("bn{idx}.bias"), Tensor::zeros(&[width]))?;
                norm_state.insert(format!("bn{idx}.running_mean"), Tensor::zeros(&[width]))?;
                norm_state.insert(format!("bn{idx}.running_var"), Tensor::full(&[width], T::one()))?;
            }
            Ok(())
        };
        match &config.arch {
            Architecture::Mlp { hidden } => {
                let mut fan_in = config.input.numel();
                for (i, &w) in hidden.iter().enumerate() {
                    params.insert(format!("fc{i}.weight"), kaiming_uniform(rng, &[fan_in, w], fan_in))?;
                    params.insert(format!("fc{i}.bias"), Tensor::zeros(&[w]))?;
                    add_norm(&mut params, i, w)?;
                    fan_in = w;
                }
                let i = hidden.len();
                params.insert(format!("fc{i}.weight"), kaiming_uniform(rng, &[fan_in, config.classes], fan_in))?;
                params.insert(format!("fc{i}.bias"), Tensor::zeros(&[config.classes]))?;
            }
            Architecture::Cnn { channels, dense } => {
                let InputKind::Image { channels: c_in, height, width } = config.input else {
                    unreachable!("validated")
                };
                let mut prev = c_in;
                for (i, &c) in channels.iter().enumerate() {
                    let fan_in = prev * 9;
                    params.insert(format!("conv{i}.weight"), kaiming_uniform(rng, &[c, prev, 3, 3], fan_in))?;
                    params.insert(format!("conv{i}.bias"), Tensor::zeros(&[c]))?;
                    add_norm(&mut params, i, c)?;
                    prev = c;
                }
                let flat = prev * (height / 4) * (width / 4);
                params.insert("fc0.weight", kaiming_uniform(rng, &[flat, *dense], flat))?;
                params.insert("fc0.bias", Tensor::zeros(&[*dense]))?;
                params.insert("fc1.weight", kaiming_uniform(rng, &[*dense, config.classes], *dense))?;
                params.insert("fc1.bias", Tensor::zeros(&[config.classes]))?;
            }
        }
        Ok(LogitModel {
            config,
            params,
            norm_state,
        })
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn sample_shape(&self) -> Vec<usize> {
        self.config.input.sample_shape()
    }

    /// Name of the class layer's weight; zeroing it and its bias makes every logit 0.
    pub fn output_layer(&self) -> (String, String) {
        let i = match &self.config.arch {
            Architecture::Mlp { hidden } => hidden.len(),
            Architecture::Cnn { .. } => 1,
        };
        (format!("fc{i}.weight"), format!("fc{i}.bias"))
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let want = self.sample_shape();
        if x.rank() != want.len() + 1 || x.row_shape() != want.as_slice() {
            return Err(Error::shape(
                "model input",
                format!("expected [batch, {:?}], got {:?}", want, x.shape()),
            ));
        }
        Ok(())
    }

    fn activate(&self, g: &mut Graph<T>, h: Var) -> Result<Var> {
        match self.config.activation {
            Activation::Relu => g.relu(h),
            Activation::LeakyRelu { slope } => g.leaky_relu(h, T::lit(slope)),
        }
    }

    fn normalize(
        &self,
        g: &mut Graph<T>,
        pv: &ParamVars,
        h: Var,
        idx: usize,
        mode: Mode,
        stats: &mut Vec<(String, BatchStats<T>)>,
    ) -> Result<Var> {
        if self.config.norm == NormMode::None {
            return Ok(h);
        }
        let gamma = pv.get(&format!("bn{idx}.weight"))?;
        let beta = pv.get(&format!("bn{idx}.bias"))?;
        match mode {
            Mode::Train => {
                let (out, s) = g.batch_norm_train(h, gamma, beta, T::lit(BN_EPS))?;
                stats.push((format!("bn{idx}"), s));
                Ok(out)
            }
            Mode::Eval => {
                let mean = self.norm_state.require(&format!("bn{idx}.running_mean"))?;
                let var = self.norm_state.require(&format!("bn{idx}.running_var"))?;
                g.batch_norm_eval(h, gamma, beta, mean.data(), var.data(), T::lit(BN_EPS))
            }
        }
    }

    fn dense(&self, g: &mut Graph<T>, pv: &ParamVars, h: Var, idx: usize) -> Result<Var> {
        let w = pv.get(&format!("fc{idx}.weight"))?;
        let b = pv.get(&format!("fc{idx}.bias"))?;
        let z = g.matmul(h, w)?;
        g.bias_add(z, b, 1)
    }

    /// Records the forward pass into `g` using parameter handles `pv`.
    pub fn forward_graph(&self, g: &mut Graph<T>, pv: &ParamVars, x: Var, mode: Mode) -> Result<Forward<T>> {
        self.check_input(g.value(x)?)?;
        let mut stats = Vec::new();
        let mut features = None;
        let x = if self.config.input_scale != 1.0 {
            g.scale(x, T::lit(1.0 / self.config.input_scale))?
        } else {
            x
        };
        let logits = match &self.config.arch {
            Architecture::Mlp { hidden } => {
                let mut h = g.flatten(x)?;
                for i in 0..hidden.len() {
                    h = self.dense(g, pv, h, i)?;
                    h = self.normalize(g, pv, h, i, mode, &mut stats)?;
                    h = self.activate(g, h)?;
                }
                if !hidden.is_empty() {
                    features = Some(h);
                }
                self.dense(g, pv, h, hidden.len())?
            }
            Architecture::Cnn { .. } => {
                let mut h = x;
                for i in 0..2 {
                    let w = pv.get(&format!("conv{i}.weight"))?;
                    let b = pv.get(&format!("conv{i}.bias"))?;
                    h = g.conv2d(h, w, 1)?;
                    h = g.bias_add(h, b, 1)?;
                    h = self.normalize(g, pv, h, i, mode, &mut stats)?;
                    h = self.activate(g, h)?;
                    h = g.avg_pool2(h)?;
                }
                h = g.flatten(h)?;
                h = self.dense(g, pv, h, 0)?;
                h = self.activate(g, h)?;
                features = Some(h);
                self.dense(g, pv, h, 1)?
            }
        };
        Ok(Forward {
            logits,
            features,
            batch_stats: stats,
        })
    }

    /// Per-sample energy `-logsumexp(f(x))` recorded into `g` (eval-mode norm).
    pub fn energy_graph(&self, g: &mut Graph<T>, pv: &ParamVars, x: Var) -> Result<Var> {
        let fwd = self.forward_graph(g, pv, x, Mode::Eval)?;
        let lse = g.logsumexp(fwd.logits, 1)?;
        g.neg(lse)
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn apply_batch_stats(&mut self, stats: &[(String, BatchStats<T>)]) -> Result<()> {
        let m = T::lit(BN_MOMENTUM);
        let keep = T::one() - m;
        for (layer, s) in stats {
            let mean = self
                .norm_state
                .get_mut(&format!("{layer}.running_mean"))
                .ok_or_else(|| Error::invalid(format!("unknown norm layer `{layer}`")))?;
            for (r, &b) in mean.data_mut().iter_mut().zip(&s.mean) {
                *r = keep * *r + m * b;
            }
            let var = self
                .norm_state
                .get_mut(&format!("{layer}.running_var"))
                .ok_or_else(|| Error::invalid(format!("unknown norm layer `{layer}`")))?;
            for (r, &b) in var.data_mut().iter_mut().zip(&s.var) {
                *r = keep * *r + m * b;
            }
        }
        Ok(())
    }

    fn eval_graph(&self, x: &Tensor<T>) -> Result<(Graph<T>, Forward<T>)> {
        let mut g = Graph::new();
        let pv = ParamVars::record(&mut g, &self.params, false);
        let xv = g.constant(x.clone());
        let fwd = self.forward_graph(&mut g, &pv, xv, Mode::Eval)?;
        Ok((g, fwd))
    }

    /// Eval-mode logits `[batch, classes]`. Pure: does not touch norm state.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (g, fwd) = self.eval_graph(x)?;
        Ok(g.value(fwd.logits)?.clone())
    }

    /// Logits in either mode; train mode folds batch statistics into the running state.
    pub fn forward_logits(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if mode == Mode::Eval {
            return self.logits(x);
        }
        let mut g = Graph::new();
        let pv = ParamVars::record(&mut g, &self.params, false);
        let xv = g.constant(x.clone());
        let fwd = self.forward_graph(&mut g, &pv, xv, Mode::Train)?;
        self.apply_batch_stats(&fwd.batch_stats)?;
        Ok(g.value(fwd.logits)?.clone())
    }

    /// Per-sample marginal energy `-logsumexp_y f(x)[y]`.
    pub fn energy(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (mut g, fwd) = self.eval_graph(x)?;
        let lse = g.logsumexp(fwd.logits, 1)?;
        let e = g.neg(lse)?;
        Ok(g.value(e)?.clone())
    }

    /// Per-sample class-conditional energy `-f(x)[y]`.
    pub fn conditional_energy(&self, x: &Tensor<T>, class: usize) -> Result<Tensor<T>> {
        if class >= self.classes() {
            return Err(Error::invalid(format!("class {} out of range for {} classes", class, self.classes())));
        }
        let logits = self.logits(x)?;
        let c = self.classes();
        Ok(Tensor::from_vec((0..logits.rows()).map(|i| -logits.data()[i * c + class]).collect()))
    }

    /// Activations feeding the class layer, eval mode.
    pub fn penultimate_features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (g, fwd) = self.eval_graph(x)?;
        let f = fwd
            .features
            .ok_or_else(|| Error::invalid("model has no hidden layer"))?;
        Ok(g.value(f)?.clone())
    }

    /// Per-sample energies and `∂E/∂x` (or `∂(-f(x)[class])/∂x`), eval mode.
    ///
    /// Samples do not interact, so the gradient of the summed energy gives
    /// each sample's own input gradient.
    pub fn energy_input_grad(&self, x: &Tensor<T>, class: Option<usize>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let pv = ParamVars::record(&mut g, &self.params, false);
        let xv = g.leaf(x.clone());
        let fwd = self.forward_graph(&mut g, &pv, xv, Mode::Eval)?;
        let e = match class {
            None => {
                let lse = g.logsumexp(fwd.logits, 1)?;
                g.neg(lse)?
            }
            Some(c) => {
                if c >= self.classes() {
                    return Err(Error::invalid(format!("class {} out of range for {} classes", c, self.classes())));
                }
                let picked = g.gather(fwd.logits, &vec![c; x.rows()])?;
                g.neg(picked)?
            }
        };
        let total = g.sum(e)?;
        let grad = g.gradient(total, &[xv])?.remove(0);
        Ok((g.value(e)?.clone(), grad))
    }

    /// Checkpoint entries: parameters, norm state and architecture metadata.
    pub fn to_entries(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = Vec::new();
        let lit = |v: &[f64]| Tensor::from_vec(v.iter().map(|&x| T::lit(x)).collect());
        let input: Vec<f64> = self.sample_shape().iter().map(|&d| d as f64).collect();
        out.push(("meta.input".into(), lit(&input)));
        let norm = if self.config.norm == NormMode::BatchNorm { 1.0 } else { 0.0 };
        let mut arch = vec![0.0, self.classes() as f64, norm];
        match &self.config.arch {
            Architecture::Mlp { hidden } => arch.extend(hidden.iter().map(|&h| h as f64)),
            Architecture::Cnn { channels, dense } => {
                arch[0] = 1.0;
                arch.extend([channels[0] as f64, channels[1] as f64, *dense as f64]);
            }
        }
        out.push(("meta.arch".into(), lit(&arch)));
        let act = match self.config.activation {
            Activation::Relu => vec![0.0, 0.0],
            Activation::LeakyRelu { slope } => vec![1.0, slope],
        };
        out.push(("meta.activation".into(), lit(&act)));
        out.push(("meta.input_scale".into(), Tensor::scalar(T::lit(self.config.input_scale))));
        out.extend(self.params.iter().map(|(n, t)| (n.to_string(), t.clone())));
        out.extend(self.norm_state.iter().map(|(n, t)| (n.to_string(), t.clone())));
        out
    }

    /// Rebuilds a model from checkpoint entries; unrelated entries are ignored.
    pub fn from_entries(entries: &[(String, Tensor<T>)]) -> Result<Self> {
        let find = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::format("checkpoint", format!("missing entry `{}`", name)))
        };
        let ints = |t: &Tensor<T>| t.data().iter().map(|v| v.as_f64() as usize).collect::<Vec<_>>();
        let input = ints(find("meta.input")?);
        let arch_meta = find("meta.arch")?.to_f64_vec();
        let act_meta = find("meta.activation")?.to_f64_vec();
        if arch_meta.len() < 3 || act_meta.len() != 2 {
            return Err(Error::format("checkpoint", "bad model metadata"));
        }
        let input = match input.as_slice() {
            [dim] => InputKind::Flat { dim: *dim },
            [c, h, w] => InputKind::Image { channels: *c, height: *h, width: *w },
            _ => return Err(Error::format("checkpoint", "bad input metadata")),
        };
        let rest: Vec<usize> = arch_meta[3..].iter().map(|&v| v as usize).collect();
        let arch = match (arch_meta[0] as usize, rest.as_slice()) {
            (0, hidden) => Architecture::Mlp { hidden: hidden.to_vec() },
            (1, [c0, c1, d]) => Architecture::Cnn { channels: [*c0, *c1], dense: *d },
            _ => return Err(Error::format("checkpoint", "bad architecture metadata")),
        };
        let config = ModelConfig {
            input,
            arch,
            classes: arch_meta[1] as usize,
            norm: if arch_meta[2] != 0.0 { NormMode::BatchNorm } else { NormMode::None },
            activation: if act_meta[0] == 0.0 {
                Activation::Relu
            } else {
                Activation::LeakyRelu { slope: act_meta[1] }
            },
            input_scale: match entries.iter().find(|(n, _)| n == "meta.input_scale") {
                Some((_, t)) => t.item()?.as_f64(),
                None => 1.0,
            },
        };
        // build a template for names and shapes, then fill values
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = LogitModel::<T>::new(config, &mut rng)?;
        for set in [&mut model.params, &mut model.norm_state] {
            for (name, t) in set.iter_mut() {
                let stored = find(name)?;
                if stored.shape() != t.shape() {
                    return Err(Error::format(
                        "checkpoint",
                        format!("`{}` has shape {:?}, expected {:?}", name, stored.shape(), t.shape()),
                    ));
                }
                *t = stored.clone();
            }
        }
        Ok(model)
    }
}
