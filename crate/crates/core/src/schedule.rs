//! Variance-preserving noise schedules and the DDIM / ancestral update rules.
//!
//! Index convention: `t = T` is (nearly) pure noise and `t = 0` is data. The
//! schedule stores `T + 1` coefficient pairs with `alpha² + sigma² = 1`.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{CounterRng, Domain};
use crate::tensor::{Latent, NoisePred};

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;
const LINEAR_BETA_START: f64 = 1e-4;
const LINEAR_BETA_END: f64 = 0.02;
const LINEAR_TRAIN_STEPS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[serde(alias = "cosine")]
    VariancePreservingCosine,
    #[serde(alias = "linear")]
    VariancePreservingLinear,
}

impl ScheduleKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScheduleKind::VariancePreservingCosine => "variance_preserving_cosine",
            ScheduleKind::VariancePreservingLinear => "variance_preserving_linear",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    steps: usize,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

/// Unnormalised cosine signal level `cos²(((t/T) + s)/(1 + s) · π/2)`.
pub fn cosine_alpha_bar_raw(t: usize, steps: usize) -> f64 {
    let u = ((t as f64 / steps as f64) + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
    (u * FRAC_PI_2).cos().powi(2)
}

pub fn make_schedule(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Parameter(format!(
            "schedule needs at least 2 steps, got {steps}"
        )));
    }
    let alpha_bar = match kind {
        ScheduleKind::VariancePreservingCosine => cosine_alpha_bar(steps),
        ScheduleKind::VariancePreservingLinear => linear_alpha_bar(steps),
    };
    let alpha = alpha_bar.iter().map(|a| a.sqrt()).collect();
    let sigma = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
    Ok(NoiseSchedule {
        kind,
        steps,
        alpha,
        sigma,
    })
}

// Normalised so that t = 0 is exactly data; per-step betas are capped at MAX_BETA,
// which only ever binds at the pure-noise end.
fn cosine_alpha_bar(steps: usize) -> Vec<f64> {
    let f0 = cosine_alpha_bar_raw(0, steps);
    let mut out = Vec::with_capacity(steps + 1);
    out.push(1.0);
    for t in 1..=steps {
        let direct = cosine_alpha_bar_raw(t, steps) / f0;
        let floor = out[t - 1] * (1.0 - MAX_BETA);
        out.push(direct.max(floor));
    }
    out
}

// DDPM linear betas on a fine training grid, subsampled at T + 1 evenly spaced points.
fn linear_alpha_bar(steps: usize) -> Vec<f64> {
    let n = steps.max(LINEAR_TRAIN_STEPS);
    let rescale = LINEAR_TRAIN_STEPS as f64 / n as f64;
    let mut cumulative = Vec::with_capacity(n + 1);
    cumulative.push(1.0);
    for j in 1..=n {
        let frac = (j - 1) as f64 / (n - 1) as f64;
        let beta = (LINEAR_BETA_START + frac * (LINEAR_BETA_END - LINEAR_BETA_START)) * rescale;
        let prev = cumulative[j - 1];
        cumulative.push(prev * (1.0 - beta));
    }
    (0..=steps)
        .map(|t| cumulative[((t * n) as f64 / steps as f64).round() as usize])
        .collect()
}

impl NoiseSchedule {
    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of denoising steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    /// Forward process sample `alpha[t]·x0 + sigma[t]·noise`.
    pub fn noise_to(&self, x0: &Latent, noise: &Latent, t: usize) -> Result<Latent> {
        let (a, s) = (self.alpha[t], self.sigma[t]);
        x0.zip_map(noise, |x, e| a * x + s * e)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SamplerMode {
    #[default]
    Ddim,
    /// Ancestral sampling; `eta = 1` is DDPM.
    AncestralDdpm { eta: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerState {
    pub x: Latent,
    pub t: usize,
    pub rng_seed: u64,
}

impl SamplerState {
    pub fn new(x: Latent, t: usize, rng_seed: u64) -> Self {
        Self { x, t, rng_seed }
    }
}

/// Initial latent `x_T` for a given seed.
pub fn initial_noise(shape: &[usize], seed: u64) -> Latent {
    let n = shape.iter().product();
    let data = CounterRng::new(seed, Domain::InitialNoise, 0).normals(n);
    Latent::new(shape.to_vec(), data).expect("gaussian draws are finite")
}

pub fn scheduler_step(
    state: &SamplerState,
    eps: &NoisePred,
    sched: &NoiseSchedule,
    mode: SamplerMode,
) -> Result<SamplerState> {
    let t = state.t;
    if t == 0 {
        return Err(Error::TerminalState);
    }
    if t > sched.steps {
        return Err(Error::Parameter(format!(
            "timestep {t} exceeds schedule length {}",
            sched.steps
        )));
    }
    state.x.check_same_shape(eps)?;

    let (a_t, s_t) = (sched.alpha[t], sched.sigma[t]);
    let (a_p, s_p) = (sched.alpha[t - 1], sched.sigma[t - 1]);
    let x0_hat = state.x.zip_map(eps, |x, e| (x - s_t * e) / a_t)?;

    let x = match mode {
        SamplerMode::Ddim => x0_hat.zip_map(eps, |x0, e| a_p * x0 + s_p * e)?,
        SamplerMode::AncestralDdpm { eta } => {
            let (ab_t, ab_p) = (a_t * a_t, a_p * a_p);
            let noise_std = if s_t > 0.0 {
                eta * ((1.0 - ab_p) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_p).max(0.0).sqrt()
            } else {
                0.0
            };
            let dir = (1.0 - ab_p - noise_std * noise_std).max(0.0).sqrt();
            let rng = CounterRng::new(state.rng_seed, Domain::Ancestral, t as u64);
            let mut out = x0_hat.zip_map(eps, |x0, e| a_p * x0 + dir * e)?;
            if noise_std > 0.0 {
                let z = Latent::new(out.shape().to_vec(), rng.normals(out.len()))?;
                out = out.zip_map(&z, |v, n| v + noise_std * n)?;
            }
            out
        }
    };
    if !x.is_finite() {
        return Err(Error::Parameter(format!(
            "scheduler step at t = {t} produced non-finite values"
        )));
    }
    Ok(SamplerState {
        x,
        t: t - 1,
        rng_seed: state.rng_seed,
    })
}
