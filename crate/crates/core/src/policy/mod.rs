//! Inference-time caching policies and their shared step driver.

mod baselines;
mod hybrid;
mod tao;
mod window;

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::backends::{DenoiserBackend, Stream};
use crate::error::{Error, Result};
use crate::schedule::{scheduler_step, NoiseSchedule, SamplerMode, SamplerState};
use crate::tensor::{Delta, Latent, NoisePred};
use crate::trace::{Trace, TraceMeta, TraceRecord};

pub use baselines::{find_threshold_for_budget, magnitude_forward, residual_forward, MagnitudeRule, ResidualRule};
pub use hybrid::hybrid_forward;
pub use tao::{tao_window_residual_forward, taocache_forward};
pub use window::{
    max_skippable, select_window, select_window_columns, window_scores, Provenance, SkipPlan, WindowParams, WindowScore,
};

/// Everything a policy needs to drive the sampler.
#[derive(Clone, Copy)]
pub struct Sampling<'a> {
    pub backend: &'a dyn DenoiserBackend,
    pub sched: &'a NoiseSchedule,
    pub mode: SamplerMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepAction {
    Computed,
    /// Forced model call inside a skip window or guard band.
    Refreshed,
    /// Delta extrapolated from calibrated norm ratios.
    Extrapolated,
    /// Cached output-minus-input residual reused.
    ResidualReuse,
    /// Last computed prediction held unchanged.
    Held,
}

impl StepAction {
    pub fn is_skip(self) -> bool {
        matches!(
            self,
            StepAction::Extrapolated | StepAction::ResidualReuse | StepAction::Held
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StepAction::Computed => "computed",
            StepAction::Refreshed => "refreshed",
            StepAction::Extrapolated => "extrapolated",
            StepAction::ResidualReuse => "residual_reuse",
            StepAction::Held => "held",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepLog {
    pub t: usize,
    pub action: StepAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRunReport {
    pub policy: String,
    pub steps: usize,
    pub x0: Latent,
    pub model_calls: usize,
    pub skipped: usize,
    pub log: Vec<StepLog>,
    /// Guided noise prediction fed to the scheduler, in step order `t = T..=1`.
    #[serde(skip)]
    pub eps_history: Vec<NoisePred>,
    #[serde(skip)]
    pub duration: Duration,
}

impl PolicyRunReport {
    pub fn skip_fraction(&self) -> f64 {
        self.skipped as f64 / self.steps as f64
    }

    /// The scheduler's noise inputs as a guided-stream trace.
    pub fn eps_trace(&self, model_id: &str, seed: u64) -> Result<Trace> {
        let shape = self.x0.shape().to_vec();
        let mut meta = TraceMeta::new(model_id, self.steps as u32, shape, &[Stream::Guided]);
        meta.seed = seed;
        let mut trace = Trace::new(meta);
        for (entry, eps) in self.log.iter().zip(&self.eps_history) {
            trace.records.push(TraceRecord {
                t: entry.t as u32,
                stream: Stream::Guided,
                eps: eps.to_f32(),
                latent: None,
            });
        }
        trace.validate()?;
        Ok(trace)
    }
}

/// Step-by-step sampler state shared by every policy.
struct Run<'a> {
    ctx: Sampling<'a>,
    state: SamplerState,
    log: Vec<StepLog>,
    eps_history: Vec<NoisePred>,
    calls: usize,
    skipped: usize,
    /// Running `(ε̂_{t+1}, Δ_{t+1})`, whether computed or extrapolated.
    last_eps: Option<NoisePred>,
    last_delta: Option<Delta>,
    /// Input and output of the most recent real model call.
    last_computed: Option<(Latent, NoisePred)>,
    /// Sampler input of the previous step.
    prev_input: Option<Latent>,
    started: Instant,
}

impl<'a> Run<'a> {
    fn new(ctx: Sampling<'a>, x_t: Latent, seed: u64) -> Result<Self> {
        if x_t.shape() != ctx.backend.shape() {
            return Err(Error::Shape {
                left: x_t.shape().to_vec(),
                right: ctx.backend.shape().to_vec(),
            });
        }
        Ok(Self {
            ctx,
            state: SamplerState::new(x_t, ctx.sched.steps(), seed),
            log: Vec::with_capacity(ctx.sched.steps()),
            eps_history: Vec::with_capacity(ctx.sched.steps()),
            calls: 0,
            skipped: 0,
            last_eps: None,
            last_delta: None,
            last_computed: None,
            prev_input: None,
            started: Instant::now(),
        })
    }

    fn t(&self) -> usize {
        self.state.t
    }

    fn done(&self) -> bool {
        self.state.t == 0
    }

    fn compute(&mut self) -> Result<NoisePred> {
        self.calls += 1;
        let eps = self.ctx.backend.predict(&self.state.x, self.state.t, Stream::Guided)?;
        self.last_computed = Some((self.state.x.clone(), eps.clone()));
        Ok(eps)
    }

    /// `ε̂_t = x_t + (ε̂_c − x_c)` from the last computed step `c`.
    fn residual_reuse(&self) -> Result<Option<NoisePred>> {
        let Some((x_c, eps_c)) = &self.last_computed else {
            return Ok(None);
        };
        let residual = eps_c.sub(x_c)?;
        Ok(Some(self.state.x.add(&residual)?))
    }

    /// Relative L1 change of the sampler input since the previous step.
    fn input_change(&self) -> Option<f64> {
        let prev = self.prev_input.as_ref()?;
        let denom = prev.norm_l1();
        let diff = self.state.x.sub(prev).ok()?.norm_l1();
        Some(if denom > 0.0 { diff / denom } else { f64::INFINITY })
    }

    fn advance(&mut self, eps: NoisePred, action: StepAction, delta_override: Option<Delta>) -> Result<()> {
        let delta = match delta_override {
            Some(d) => Some(d),
            None => match &self.last_eps {
                Some(prev) => Some(eps.sub(prev)?),
                None => None,
            },
        };
        let t = self.state.t;
        let next = scheduler_step(&self.state, &eps, self.ctx.sched, self.ctx.mode)?;
        self.prev_input = Some(std::mem::replace(&mut self.state, next).x);
        if action.is_skip() {
            self.skipped += 1;
        }
        self.log.push(StepLog { t, action });
        self.eps_history.push(eps.clone());
        self.last_eps = Some(eps);
        self.last_delta = delta;
        Ok(())
    }

    fn finish(self, policy: &str) -> PolicyRunReport {
        PolicyRunReport {
            policy: policy.to_string(),
            steps: self.ctx.sched.steps(),
            x0: self.state.x,
            model_calls: self.calls,
            skipped: self.skipped,
            log: self.log,
            eps_history: self.eps_history,
            duration: self.started.elapsed(),
        }
    }
}

/// Always-compute policy; equivalent to plain sampling.
pub fn full_forward(ctx: Sampling<'_>, x_t: Latent, seed: u64) -> Result<PolicyRunReport> {
    let mut run = Run::new(ctx, x_t, seed)?;
    while !run.done() {
        let eps = run.compute()?;
        run.advance(eps, StepAction::Computed, None)?;
    }
    Ok(run.finish("full"))
}
