use super::{PolicyRunReport, Run, Sampling, SkipPlan, StepAction};
use crate::calibration::{CalibrationTable, StreamTable};
use crate::error::{Error, Result};
use crate::tensor::{extrapolate, Latent};

#[derive(Clone, Copy, PartialEq, Eq)]
pub(super) enum SkipFill {
    /// `Δ̃_t = C_ratio[t] · Δ̃_{t+1}`, `ε̂_t = ε̂_{t+1} + Δ̃_t`.
    DeltaExtrapolation,
    /// `ε̂_t = x_t + (ε̂_c − x_c)` from the last computed step.
    ResidualReuse,
}

pub(super) fn stream_table<'t>(table: &'t CalibrationTable, plan: &SkipPlan) -> Result<&'t StreamTable> {
    if table.steps() != plan.steps {
        return Err(Error::PlanInvalid(format!(
            "table has T = {}, plan has T = {}",
            table.steps(),
            plan.steps
        )));
    }
    table
        .stream(plan.stream)
        .ok_or_else(|| Error::PlanInvalid(format!("table has no {} stream", plan.stream)))
}

/// One step of window-driven caching at the run's current `t`.
pub(super) fn window_step(
    run: &mut Run<'_>,
    table: Option<&StreamTable>,
    plan: &SkipPlan,
    fill: SkipFill,
) -> Result<()> {
    let t = run.t();
    if !plan.skips(t) {
        let eps = run.compute()?;
        let action = if plan.is_refresh(t) {
            StepAction::Refreshed
        } else {
            StepAction::Computed
        };
        return run.advance(eps, action, None);
    }
    match fill {
        SkipFill::DeltaExtrapolation => {
            let (Some(prev_eps), Some(prev_delta)) = (&run.last_eps, &run.last_delta) else {
                return Err(Error::PlanInvalid(format!("skip at t = {t} has no previous delta")));
            };
            let ratio = table
                .and_then(|tb| tb.c_ratio(t))
                .ok_or_else(|| Error::PlanInvalid(format!("no calibrated ratio at t = {t}")))?;
            let d = extrapolate(prev_delta, ratio)?;
            let eps = prev_eps.add(&d)?;
            run.advance(eps, StepAction::Extrapolated, Some(d))
        }
        SkipFill::ResidualReuse => {
            let eps = run
                .residual_reuse()?
                .ok_or_else(|| Error::PlanInvalid(format!("skip at t = {t} has no cached residual")))?;
            run.advance(eps, StepAction::ResidualReuse, None)
        }
    }
}

/// Samples with the plan's window filled by calibrated delta extrapolation.
pub fn taocache_forward(
    ctx: Sampling<'_>,
    x_t: Latent,
    seed: u64,
    table: &CalibrationTable,
    plan: &SkipPlan,
) -> Result<PolicyRunReport> {
    plan.check_against(ctx.sched.steps())?;
    let stream = stream_table(table, plan)?;
    let mut run = Run::new(ctx, x_t, seed)?;
    while !run.done() {
        window_step(&mut run, Some(stream), plan, SkipFill::DeltaExtrapolation)?;
    }
    Ok(run.finish("taocache"))
}

/// Same skip placement as [`taocache_forward`], filled by residual reuse instead.
pub fn tao_window_residual_forward(
    ctx: Sampling<'_>,
    x_t: Latent,
    seed: u64,
    plan: &SkipPlan,
) -> Result<PolicyRunReport> {
    plan.check_against(ctx.sched.steps())?;
    let mut run = Run::new(ctx, x_t, seed)?;
    while !run.done() {
        window_step(&mut run, None, plan, SkipFill::ResidualReuse)?;
    }
    Ok(run.finish("tao_skip_residual"))
}
