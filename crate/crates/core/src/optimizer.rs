//! SGD with momentum and the sharpness-aware (SAM / ASAM) two-pass step.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParameterSet, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamVariant {
    None,
    Sam,
    Asam,
}

impl FromStr for SamVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(SamVariant::None),
            "sam" => Ok(SamVariant::Sam),
            "asam" => Ok(SamVariant::Asam),
            _ => Err(Error::Config(format!("unknown SAM variant `{}`", s))),
        }
    }
}

impl fmt::Display for SamVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamVariant::None => "none",
            SamVariant::Sam => "sam",
            SamVariant::Asam => "asam",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamConfig {
    pub variant: SamVariant,
    pub rho: f64,
    pub weight_decay: f64,
}

impl Default for SamConfig {
    fn default() -> Self {
        SamConfig {
            variant: SamVariant::Sam,
            rho: 0.2,
            weight_decay: 0.0,
        }
    }
}

impl SamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variant != SamVariant::None && !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::Config(format!("sam.rho must be positive, got {}", self.rho)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay must be non-negative, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Multiply by `factor` at each milestone epoch.
    StepDecay { milestones: Vec<usize>, factor: f64 },
    /// Half-cosine from the base rate at epoch 0 to 0 at `total_epochs`.
    Cosine { total_epochs: usize },
}

impl Schedule {
    pub fn step_decay_default() -> Self {
        Schedule::StepDecay {
            milestones: vec![60, 120, 180],
            factor: 0.2,
        }
    }

    pub fn lr(&self, base: f64, epoch: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::StepDecay { milestones, factor } => {
                let passed = milestones.iter().filter(|&&m| epoch >= m).count();
                base * factor.powi(passed as i32)
            }
            Schedule::Cosine { total_epochs } => {
                let t = (epoch.min(*total_epochs) as f64) / (*total_epochs).max(1) as f64;
                base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Momentum buffers and learning-rate schedule for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<T> {
    pub momentum: f64,
    pub base_lr: f64,
    pub schedule: Schedule,
    buffers: ParameterSet<T>,
}

impl<T: Real> OptState<T> {
    pub fn new(params: &ParameterSet<T>, base_lr: f64, momentum: f64, schedule: Schedule) -> Result<Self> {
        if !(base_lr >= 0.0) || !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("invalid lr {} or momentum {}", base_lr, momentum)));
        }
        if let Schedule::StepDecay { factor, .. } = schedule {
            if !(factor > 0.0 && factor <= 1.0) {
                return Err(Error::Config("step-decay factor must lie in (0, 1]".into()));
            }
        }
        Ok(OptState {
            momentum,
            base_lr,
            schedule,
            buffers: params.zeros_like(),
        })
    }

    pub fn buffers(&self) -> &ParameterSet<T> {
        &self.buffers
    }

    /// `buf = μ·buf + g; θ -= lr·buf`, entry by entry.
    pub fn apply(&mut self, params: &mut ParameterSet<T>, grads: &ParameterSet<T>, lr: f64) -> Result<()> {
        params.check_aligned(grads)?;
        params.check_aligned(&self.buffers)?;
        let (mu, lr) = (T::lit(self.momentum), T::lit(lr));
        for (((_, p), (_, g)), (_, b)) in params.iter_mut().zip(grads.iter()).zip(self.buffers.iter_mut()) {
            for ((pv, &gv), bv) in p.data_mut().iter_mut().zip(g.data()).zip(b.data_mut()) {
                *bv = mu * *bv + gv;
                *pv -= lr * *bv;
            }
        }
        Ok(())
    }
}

pub fn schedule_lr<T: Real>(opt: &OptState<T>, epoch: usize) -> f64 {
    opt.schedule.lr(opt.base_lr, epoch)
}

/// `ρ·g/‖g‖` with the norm taken over every entry jointly. An all-zero
/// gradient yields a zero perturbation and `true` in the second slot.
pub fn sam_perturbation<T: Real>(grads: &ParameterSet<T>, rho: f64) -> Result<(ParameterSet<T>, bool)> {
    if grads.is_empty() {
        return Err(Error::invalid("SAM perturbation needs at least one gradient"));
    }
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm"));
    }
    if norm == 0.0 {
        return Ok((grads.zeros_like(), true));
    }
    let scale = rho / norm;
    Ok((grads.map(|_, g| g.map(|v| T::lit(v.as_f64() * scale))), false))
}

/// Elementwise `ρ·|θ|·sign(g)`, with `sign(0) = 0`.
pub fn asam_perturbation<T: Real>(params: &ParameterSet<T>, grads: &ParameterSet<T>, rho: f64) -> Result<ParameterSet<T>> {
    params.check_aligned(grads)?;
    let rho = T::lit(rho);
    let entries = params
        .iter()
        .zip(grads.iter())
        .map(|((name, p), (_, g))| {
            let data = p
                .data()
                .iter()
                .zip(g.data())
                .map(|(&pv, &gv)| {
                    if gv > T::zero() {
                        rho * pv.abs()
                    } else if gv < T::zero() {
                        -(rho * pv.abs())
                    } else {
                        T::zero()
                    }
                })
                .collect();
            Ok((name.to_string(), Tensor::new(p.shape().to_vec(), data)?))
        })
        .collect::<Result<Vec<_>>>()?;
    ParameterSet::from_entries(entries)
}

/// What a loss closure reports for one parameter setting.
pub struct LossEval<T, A> {
    pub loss: f64,
    pub grads: ParameterSet<T>,
    pub aux: A,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// Loss at θ.
    pub loss: f64,
    /// Loss at θ + ε̂ (absent when the variant is `none`).
    pub perturbed_loss: Option<f64>,
    /// Norm of the gradient used for the update, before weight decay.
    pub grad_norm: f64,
    pub perturbation_norm: f64,
    /// The clean gradient was exactly zero so no perturbation was applied.
    pub zero_gradient: bool,
    pub lr: f64,
}

/// Result of one sharpness-aware step; `aux` comes from the clean pass.
pub struct StepOutcome<A> {
    pub report: StepReport,
    pub aux: A,
    pub perturbed_aux: Option<A>,
}

/// One minimax update:
///
/// 1. evaluate the loss and gradient at θ;
/// 2. form ε̂ for the configured variant;
/// 3. evaluate again at θ + ε̂;
/// 4. restore θ and take a momentum step with `g + 2λθ`.
///
/// With variant `none` the second pass is skipped and the clean gradient is used.
pub fn sharpness_aware_step<T, A, F>(
    params: &mut ParameterSet<T>,
    mut loss_fn: F,
    cfg: &SamConfig,
    opt: &mut OptState<T>,
    epoch: usize,
) -> Result<StepOutcome<A>>
where
    T: Real,
    F: FnMut(&ParameterSet<T>) -> Result<LossEval<T, A>>,
{
    cfg.validate()?;
    let clean = loss_fn(params)?;
    if !clean.loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    clean.grads.check_aligned(params)?;

    let (grads, perturbed_loss, perturbed_aux, perturbation_norm, zero_gradient) = match cfg.variant {
        SamVariant::None => (clean.grads, None, None, 0.0, false),
        SamVariant::Sam | SamVariant::Asam => {
            let (eps, zero) = match cfg.variant {
                SamVariant::Sam => sam_perturbation(&clean.grads, cfg.rho)?,
                _ => (asam_perturbation(params, &clean.grads, cfg.rho)?, false),
            };
            let saved = params.clone();
            params.axpy(T::one(), &eps)?;
            let second = loss_fn(params);
            *params = saved;
            let second = second?;
            if !second.loss.is_finite() {
                return Err(Error::NonFinite("perturbed loss"));
            }
            second.grads.check_aligned(params)?;
            (second.grads, Some(second.loss), Some(second.aux), eps.global_norm(), zero)
        }
    };
    let grad_norm = grads.global_norm();
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    let update = if cfg.weight_decay > 0.0 {
        let mut g = grads;
        g.axpy(T::lit(2.0 * cfg.weight_decay), params)?;
        g
    } else {
        grads
    };
    let lr = schedule_lr(opt, epoch);
    opt.apply(params, &update, lr)?;
    Ok(StepOutcome {
        report: StepReport {
            loss: clean.loss,
            perturbed_loss,
            grad_norm,
            perturbation_norm,
            zero_gradient,
            lr,
        },
        aux: clean.aux,
        perturbed_aux,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(values: &[(&str, Vec<f64>)]) -> ParameterSet<f64> {
        ParameterSet::from_entries(values.iter().map(|(n, v)| (n.to_string(), Tensor::from_vec(v.clone()))).collect()).unwrap()
    }

    /// L(θ) = ½‖θ‖², ∇L = θ.
    fn quadratic(p: &ParameterSet<f64>) -> Result<LossEval<f64, ()>> {
        Ok(LossEval {
            loss: 0.5 * p.global_norm().powi(2),
            grads: p.clone(),
            aux: (),
        })
    }

    #[test]
    fn sam_perturbation_examples() {
        let (e, zero) = sam_perturbation(&set(&[("g", vec![3.0, 4.0])]), 1.0).unwrap();
        assert!(!zero);
        let v = e.get("g").unwrap().data();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);

        let (e, zero) = sam_perturbation(&set(&[("g", vec![0.0, 0.0])]), 1.0).unwrap();
        assert!(zero);
        assert_eq!(e.global_norm(), 0.0);
        assert!(sam_perturbation(&ParameterSet::<f64>::new(), 1.0).is_err());
    }

    #[test]
    fn asam_perturbation_examples() {
        let e = asam_perturbation(&set(&[("w", vec![2.0, -1.0, 0.0, 5.0])]), &set(&[("w", vec![0.5, -3.0, 7.0, 0.0])]), 1.0).unwrap();
        assert_eq!(e.get("w").unwrap().data(), &[2.0, -1.0, 0.0, 0.0]);
        assert!(asam_perturbation(&set(&[("w", vec![1.0])]), &set(&[("v", vec![1.0])]), 1.0).is_err());
    }

    #[test]
    fn schedules() {
        let s = Schedule::step_decay_default();
        assert!((s.lr(0.1, 130) - 0.004).abs() < 1e-15);
        assert_eq!(s.lr(0.1, 59), 0.1);
        let c = Schedule::Cosine { total_epochs: 200 };
        assert_eq!(c.lr(0.1, 0), 0.1);
        assert!(c.lr(0.1, 200).abs() < 1e-15);
        for sched in [s, c] {
            for e in 0..250 {
                assert!(sched.lr(0.1, e + 1) <= sched.lr(0.1, e));
            }
        }
    }

    #[test]
    fn quadratic_sam_gradient_matches_hand_derivation() {
        // ∇L(θ + ρθ/‖θ‖) = θ(1 + ρ/‖θ‖); with μ = 0 and lr = 1 the update is exactly that.
        let theta = vec![0.3, -1.2, 2.0];
        let norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rho = 0.2;
        let mut p = set(&[("w", theta.clone())]);
        let mut opt = OptState::new(&p, 1.0, 0.0, Schedule::Constant).unwrap();
        let cfg = SamConfig {
            variant: SamVariant::Sam,
            rho,
            weight_decay: 0.0,
        };
        let out = sharpness_aware_step(&mut p, quadratic, &cfg, &mut opt, 0).unwrap();
        for (after, before) in p.get("w").unwrap().data().iter().zip(&theta) {
            let g = before * (1.0 + rho / norm);
            assert!((before - after - g).abs() < 1e-14);
        }
        assert!((out.report.perturbation_norm - rho).abs() < 1e-12);
        assert!((out.report.perturbed_loss.unwrap() - 0.5 * (norm + rho).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn zero_stays_fixed_under_weight_decay() {
        let mut p = set(&[("w", vec![0.0, 0.0])]);
        let mut opt = OptState::new(&p, 0.1, 0.9, Schedule::Constant).unwrap();
        let cfg = SamConfig {
            variant: SamVariant::Sam,
            rho: 0.2,
            weight_decay: 0.5,
        };
        for _ in 0..3 {
            let out = sharpness_aware_step(&mut p, quadratic, &cfg, &mut opt, 0).unwrap();
            assert!(out.report.zero_gradient);
        }
        assert_eq!(p.get("w").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn none_variant_is_plain_momentum_sgd() {
        let mut p = set(&[("a", vec![1.0, -2.0]), ("b", vec![0.5])]);
        let mut manual = p.clone();
        let mut buf = p.zeros_like();
        let mut opt = OptState::new(&p, 0.1, 0.9, Schedule::Constant).unwrap();
        let cfg = SamConfig {
            variant: SamVariant::None,
            rho: 0.0,
            weight_decay: 0.0,
        };
        for _ in 0..5 {
            sharpness_aware_step(&mut p, quadratic, &cfg, &mut opt, 0).unwrap();
            let g = manual.clone();
            for ((_, m), ((_, b), (_, gv))) in manual.iter_mut().zip(buf.iter_mut().zip(g.iter())) {
                for ((mv, bv), &gg) in m.data_mut().iter_mut().zip(b.data_mut()).zip(gv.data()) {
                    *bv = 0.9 * *bv + gg;
                    *mv -= 0.1 * *bv;
                }
            }
        }
        assert_eq!(p, manual);
    }

    #[test]
    fn params_restored_bit_exactly_between_passes() {
        let p0 = set(&[("w", vec![0.1, 0.7, -0.3])]);
        let mut p = p0.clone();
        let mut opt = OptState::new(&p, 0.0, 0.0, Schedule::Constant).unwrap();
        for variant in [SamVariant::Sam, SamVariant::Asam] {
            let cfg = SamConfig {
                variant,
                rho: 0.37,
                weight_decay: 0.0,
            };
            sharpness_aware_step(&mut p, quadratic, &cfg, &mut opt, 0).unwrap();
            assert_eq!(p, p0);
        }
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut p = set(&[("w", vec![1.0])]);
        let mut opt = OptState::new(&p, 0.1, 0.9, Schedule::Constant).unwrap();
        let bad = |p: &ParameterSet<f64>| -> Result<LossEval<f64, ()>> {
            Ok(LossEval {
                loss: f64::NAN,
                grads: p.clone(),
                aux: (),
            })
        };
        assert!(matches!(
            sharpness_aware_step(&mut p, bad, &SamConfig::default(), &mut opt, 0),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(SamConfig {
            variant: SamVariant::Sam,
            rho: 0.0,
            weight_decay: 0.0
        }
        .validate()
        .is_err());
        assert!(SamConfig {
            variant: SamVariant::None,
            rho: 0.0,
            weight_decay: 0.0
        }
        .validate()
        .is_ok());
        assert_eq!("ASAM".parse::<SamVariant>().unwrap(), SamVariant::Asam);
    }
}
