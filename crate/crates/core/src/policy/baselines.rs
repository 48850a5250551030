//! Simplified residual-threshold and magnitude-rule baselines.
//!
//! Neither applies the timestep-embedding rescaling of the original methods;
//! they reproduce the skip geometry, not the exact heuristics.

use serde::{Deserialize, Serialize};

use super::{PolicyRunReport, Run, Sampling, StepAction};
use crate::backends::Stream;
use crate::calibration::CalibrationTable;
use crate::error::{Error, Result};
use crate::tensor::Latent;

/// Skip while the accumulated relative L1 input change stays below a threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResidualRule {
    pub rel_l1_thresh: f64,
    pub max_consecutive: usize,
    /// Total skip budget; `None` is unbounded.
    pub max_skips: Option<usize>,
}

impl Default for ResidualRule {
    fn default() -> Self {
        Self {
            rel_l1_thresh: 0.1,
            max_consecutive: 3,
            max_skips: None,
        }
    }
}

/// Tracks the residual policy's accumulator across steps.
#[derive(Debug, Default)]
pub(super) struct ResidualState {
    accumulated: f64,
    consecutive: usize,
    skipped: usize,
}

impl ResidualState {
    /// Decides and performs the current step. `last_step` forces a model call.
    pub(super) fn step(&mut self, run: &mut Run<'_>, rule: &ResidualRule, last_step: bool) -> Result<()> {
        let change = run.input_change();
        let budget_left = rule.max_skips.is_none_or(|m| self.skipped < m);
        if let Some(c) = change {
            self.accumulated += c;
        }
        let may_skip = change.is_some()
            && !last_step
            && budget_left
            && self.consecutive < rule.max_consecutive
            && self.accumulated < rule.rel_l1_thresh;
        if may_skip {
            if let Some(eps) = run.residual_reuse()? {
                self.consecutive += 1;
                self.skipped += 1;
                return run.advance(eps, StepAction::ResidualReuse, None);
            }
        }
        self.accumulated = 0.0;
        self.consecutive = 0;
        let eps = run.compute()?;
        run.advance(eps, StepAction::Computed, None)
    }
}

pub fn residual_forward(ctx: Sampling<'_>, x_t: Latent, seed: u64, rule: &ResidualRule) -> Result<PolicyRunReport> {
    let mut run = Run::new(ctx, x_t, seed)?;
    let mut state = ResidualState::default();
    while !run.done() {
        let last = run.t() == 1;
        state.step(&mut run, rule, last)?;
    }
    Ok(run.finish("residual"))
}

/// Skip while the running product of calibrated norm ratios stays near one,
/// holding the last computed prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MagnitudeRule {
    pub mag_thresh: f64,
    pub max_consecutive: usize,
    pub max_skips: Option<usize>,
    pub stream: Stream,
}

impl Default for MagnitudeRule {
    fn default() -> Self {
        Self {
            mag_thresh: 0.05,
            max_consecutive: 3,
            max_skips: None,
            stream: Stream::Guided,
        }
    }
}

pub fn magnitude_forward(
    ctx: Sampling<'_>,
    x_t: Latent,
    seed: u64,
    table: &CalibrationTable,
    rule: &MagnitudeRule,
) -> Result<PolicyRunReport> {
    if table.steps() != ctx.sched.steps() {
        return Err(Error::PlanInvalid(format!(
            "table has T = {}, sampler has T = {}",
            table.steps(),
            ctx.sched.steps()
        )));
    }
    let ratios = table
        .stream(rule.stream)
        .ok_or_else(|| Error::Parameter(format!("table has no {} stream", rule.stream)))?;
    let mut run = Run::new(ctx, x_t, seed)?;
    let mut product = 1.0;
    let mut consecutive = 0;
    let mut skipped = 0;
    while !run.done() {
        let t = run.t();
        let candidate = ratios.c_ratio(t).map(|r| product * r);
        let held = run.last_computed.as_ref().map(|(_, eps)| eps.clone());
        let skip = match (candidate, &held) {
            (Some(p), Some(_)) => {
                (p - 1.0).abs() < rule.mag_thresh
                    && consecutive < rule.max_consecutive
                    && rule.max_skips.is_none_or(|m| skipped < m)
            }
            _ => false,
        };
        if skip {
            product = candidate.expect("checked above");
            consecutive += 1;
            skipped += 1;
            run.advance(held.expect("checked above"), StepAction::Held, None)?;
        } else {
            product = 1.0;
            consecutive = 0;
            let eps = run.compute()?;
            run.advance(eps, StepAction::Computed, None)?;
        }
    }
    Ok(run.finish("magnitude"))
}

/// Smallest threshold (to bisection precision) at which `eval` reaches `budget` skips.
///
/// `eval` must cap its skips at `budget`, so any large enough threshold hits it exactly.
pub fn find_threshold_for_budget(budget: usize, mut eval: impl FnMut(f64) -> Result<usize>) -> Result<f64> {
    if budget == 0 {
        return Ok(0.0);
    }
    let mut hi = 1e-3;
    while eval(hi)? < budget {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::Parameter(format!(
                "skip budget {budget} unreachable at any threshold"
            )));
        }
    }
    let mut lo = 0.0;
    for _ in 0..48 {
        let mid = 0.5 * (lo + hi);
        if eval(mid)? >= budget {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}
