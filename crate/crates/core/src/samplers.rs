//! Parameter update rules and the stochastic posterior gradient.
//!
//! Every rule is written for descent on the negative log-posterior `U(θ)`:
//!
//! | rule    | update |
//! |---------|--------|
//! | SGD     | `θ ← θ − η g` |
//! | RMSprop | `v ← β₁v + (1−β₁)g²`, `θ ← θ − η g / (λ + √v)` |
//! | SGLD    | `θ ← θ − η g + √(2η) ξ` |
//! | pSGLD   | `v ← β₁v + (1−β₁)g²`, `G⁻¹ = 1/(λ + √v)`, `θ ← θ − (η/2) G⁻¹ g + √(η G⁻¹) ξ` |
//!
//! with `ξ ~ N(0, I)`. The pSGLD drift carries a minus sign because `g` is the
//! gradient of a quantity being minimised. The `Γ(θ)` correction term of the
//! full preconditioned dynamics is not included.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::models::{weight_noise_mask, WeightNoise};
use crate::numerics::SeededRng;
use crate::params::FlatParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Algorithm {
    Sgd,
    Rmsprop,
    Sgld,
    Psgld,
}

impl Algorithm {
    /// Whether the rule injects Langevin noise (and so produces samples).
    pub fn is_sampler(self) -> bool {
        matches!(self, Algorithm::Sgld | Algorithm::Psgld)
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Sgd => "sgd",
            Algorithm::Rmsprop => "rmsprop",
            Algorithm::Sgld => "sgld",
            Algorithm::Psgld => "psgld",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Algorithm::Sgd),
            "rmsprop" => Ok(Algorithm::Rmsprop),
            "sgld" => Ok(Algorithm::Sgld),
            "psgld" => Ok(Algorithm::Psgld),
            other => Err(Error::invalid(format!("unknown algorithm `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepSchedule {
    Constant(f64),
    /// `η_t = a (b + t)^(−γ)`.
    Polynomial { a: f64, b: f64, gamma: f64 },
}

impl StepSchedule {
    pub fn at(&self, t: u64) -> f64 {
        match *self {
            StepSchedule::Constant(eta) => eta,
            StepSchedule::Polynomial { a, b, gamma } => a * (b + t as f64).powf(-gamma),
        }
    }

    fn check(&self) -> Result<()> {
        let ok = match *self {
            StepSchedule::Constant(eta) => eta > 0.0 && eta.is_finite(),
            StepSchedule::Polynomial { a, b, gamma } => a > 0.0 && b > 0.0 && gamma >= 0.0 && a.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid step-size schedule {self:?}")))
        }
    }
}

/// Preconditioner used by pSGLD.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Preconditioner {
    #[default]
    Rmsprop,
    /// `G⁻¹ = I`; pSGLD then coincides with SGLD at step size `η/2`.
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HyperParams {
    pub step_size: StepSchedule,
    /// Minibatch size `M` (nominal; the actual size of a short final batch is
    /// passed separately to [`posterior_grad`]).
    pub batch_size: usize,
    /// Number of data items `N`.
    pub dataset_size: usize,
    pub beta1: f64,
    pub lambda: f64,
    pub prior_variance: f64,
    /// Norm cap on the raw likelihood-gradient sum, applied before scaling.
    pub clip_norm: Option<f64>,
    /// Langevin noise on/off (off turns SGLD into SGD and pSGLD into a
    /// half-step RMSprop).
    pub noise: bool,
    /// pSGLD: accumulate `v` once from the first gradient before updating.
    pub prewarm: bool,
    pub preconditioner: Preconditioner,
}

impl HyperParams {
    /// `η = 1e-3`, `λ = 1e-8`, `β₁ = 0.99`, `σ² = 1`.
    pub fn new(batch_size: usize, dataset_size: usize) -> Self {
        Self {
            step_size: StepSchedule::Constant(1e-3),
            batch_size,
            dataset_size,
            beta1: 0.99,
            lambda: 1e-8,
            prior_variance: 1.0,
            clip_norm: None,
            noise: true,
            prewarm: true,
            preconditioner: Preconditioner::Rmsprop,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.step_size.check()?;
        if !(self.beta1 > 0.0 && self.beta1 < 1.0) {
            return Err(Error::invalid(format!("beta1 must lie in (0, 1), got {}", self.beta1)));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::invalid(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.prior_variance > 0.0) {
            return Err(Error::invalid(format!("prior variance must be positive, got {}", self.prior_variance)));
        }
        if self.batch_size == 0 || self.batch_size > self.dataset_size {
            return Err(Error::invalid(format!(
                "need 1 <= batch size <= dataset size, got M={} N={}",
                self.batch_size, self.dataset_size
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::invalid(format!("clip norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Per-parameter second-moment accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerState {
    pub v: Vec<f64>,
    pub step: u64,
}

impl SamplerState {
    pub fn new(num_params: usize) -> Self {
        Self {
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.v.len() != n {
            return Err(Error::shape("SamplerState", n, self.v.len()));
        }
        Ok(())
    }

    /// `v ← β₁v + (1−β₁)g²`.
    pub fn accumulate(&mut self, g: &[f64], beta1: f64) {
        for (v, &gi) in self.v.iter_mut().zip(g) {
            *v = beta1 * *v + (1.0 - beta1) * gi * gi;
        }
    }
}

/// Stochastic gradient of the negative log-posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct GradEstimate {
    pub grad: FlatParams,
    /// Number of data items behind the likelihood term.
    pub batch_size: usize,
    /// Norm of the raw likelihood sum before any clipping.
    pub raw_norm: f64,
}

/// `θ/σ² + (N/M)·Σ_batch ∇(−log p(dᵢ|θ))`. The prior term is not rescaled.
pub fn posterior_grad(
    raw_loglik_grad_sum: &FlatParams,
    theta: &FlatParams,
    hp: &HyperParams,
    batch_size_actual: usize,
) -> Result<GradEstimate> {
    if batch_size_actual == 0 {
        return Err(Error::invalid("minibatch must contain at least one item"));
    }
    raw_loglik_grad_sum.check_layout(theta, "posterior_grad")?;
    raw_loglik_grad_sum.ensure_finite("likelihood gradient")?;
    theta.ensure_finite("parameters")?;
    let raw_norm = raw_loglik_grad_sum.l2_norm();
    let clip = match hp.clip_norm {
        Some(c) if raw_norm > c => c / raw_norm,
        _ => 1.0,
    };
    let scale = hp.dataset_size as f64 / batch_size_actual as f64 * clip;
    let inv_var = 1.0 / hp.prior_variance;
    let values = theta
        .values()
        .iter()
        .zip(raw_loglik_grad_sum.values())
        .map(|(&t, &g)| t * inv_var + scale * g)
        .collect();
    Ok(GradEstimate {
        grad: FlatParams::new(theta.index().clone(), values)?,
        batch_size: batch_size_actual,
        raw_norm,
    })
}

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("step size must be positive, got {eta}")))
    }
}

fn check_len(theta: &[f64], g: &[f64]) -> Result<()> {
    if theta.len() != g.len() {
        return Err(Error::shape("update", theta.len(), g.len()));
    }
    Ok(())
}

/// `θ ← θ − η g`.
pub fn sgd_step(theta: &mut [f64], g: &[f64], eta: f64) -> Result<()> {
    check_eta(eta)?;
    check_len(theta, g)?;
    for (t, &gi) in theta.iter_mut().zip(g) {
        *t -= eta * gi;
    }
    Ok(())
}

/// `θ ← θ − η g + √(2η) ξ`; one standard normal per coordinate, in order.
pub fn sgld_step(theta: &mut [f64], g: &[f64], eta: f64, rng: &mut SeededRng) -> Result<()> {
    check_eta(eta)?;
    check_len(theta, g)?;
    let std = (2.0 * eta).sqrt();
    for (t, &gi) in theta.iter_mut().zip(g) {
        let xi = rng.normal();
        *t = *t - eta * gi + std * xi;
    }
    Ok(())
}

/// RMSprop with the step size taken from the schedule at `state.step`.
pub fn rmsprop_step(theta: &mut [f64], g: &[f64], state: &mut SamplerState, hp: &HyperParams) -> Result<()> {
    let eta = hp.step_size.at(state.step);
    check_eta(eta)?;
    check_len(theta, g)?;
    state.check(theta.len())?;
    state.accumulate(g, hp.beta1);
    for ((t, &gi), &v) in theta.iter_mut().zip(g).zip(&state.v) {
        *t -= eta * gi / (hp.lambda + v.sqrt());
    }
    state.step += 1;
    Ok(())
}

/// Preconditioned SGLD. With `hp.noise` off no normals are drawn.
pub fn psgld_step(
    theta: &mut [f64],
    g: &[f64],
    state: &mut SamplerState,
    hp: &HyperParams,
    rng: &mut SeededRng,
) -> Result<()> {
    let eta = hp.step_size.at(state.step);
    check_eta(eta)?;
    check_len(theta, g)?;
    state.check(theta.len())?;
    if hp.preconditioner == Preconditioner::Rmsprop {
        if state.step == 0 && hp.prewarm {
            state.accumulate(g, hp.beta1);
        }
        state.accumulate(g, hp.beta1);
    }
    let half = eta / 2.0;
    for (i, (t, &gi)) in theta.iter_mut().zip(g).enumerate() {
        let ginv = match hp.preconditioner {
            Preconditioner::Rmsprop => 1.0 / (hp.lambda + state.v[i].sqrt()),
            Preconditioner::Identity => 1.0,
        };
        let drift = half * ginv * gi;
        if hp.noise {
            let xi = rng.normal();
            *t = *t - drift + (eta * ginv).sqrt() * xi;
        } else {
            *t -= drift;
        }
    }
    state.step += 1;
    Ok(())
}

/// Multiplies every coordinate by an independent mean-one mask; returns the
/// noisy parameters and the mask.
pub fn apply_weight_noise(
    theta: &FlatParams,
    noise: WeightNoise,
    keep: f64,
    rng: &mut SeededRng,
) -> Result<(FlatParams, Vec<f64>)> {
    let mask = weight_noise_mask(rng, 1, theta.len(), noise, keep)?.into_vec();
    let values = theta.values().iter().zip(&mask).map(|(t, m)| m * t).collect();
    Ok((FlatParams::new(theta.index().clone(), values)?, mask))
}

/// An update rule plus the state it owns.
#[derive(Clone, Debug, PartialEq)]
pub struct Sampler {
    pub algorithm: Algorithm,
    pub hp: HyperParams,
    pub state: SamplerState,
}

impl Sampler {
    pub fn new(algorithm: Algorithm, hp: HyperParams, num_params: usize) -> Result<Self> {
        hp.validate()?;
        Ok(Self {
            algorithm,
            hp,
            state: SamplerState::new(num_params),
        })
    }

    pub fn current_step_size(&self) -> f64 {
        self.hp.step_size.at(self.state.step)
    }

    pub fn step(&mut self, theta: &mut FlatParams, g: &GradEstimate, rng: &mut SeededRng) -> Result<()> {
        theta.check_layout(&g.grad, "Sampler::step")?;
        let gv = g.grad.values();
        let th = theta.values_mut();
        match self.algorithm {
            Algorithm::Sgd => {
                sgd_step(th, gv, self.hp.step_size.at(self.state.step))?;
                self.state.step += 1;
            }
            Algorithm::Sgld => {
                let eta = self.hp.step_size.at(self.state.step);
                if self.hp.noise {
                    sgld_step(th, gv, eta, rng)?;
                } else {
                    sgd_step(th, gv, eta)?;
                }
                self.state.step += 1;
            }
            Algorithm::Rmsprop => rmsprop_step(th, gv, &mut self.state, &self.hp)?,
            Algorithm::Psgld => psgld_step(th, gv, &mut self.state, &self.hp, rng)?,
        }
        theta.ensure_finite("updated parameters")
    }
}
