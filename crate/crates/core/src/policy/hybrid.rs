use super::baselines::{ResidualRule, ResidualState};
use super::tao::{stream_table, window_step, SkipFill};
use super::{PolicyRunReport, Run, Sampling, SkipPlan, StepAction};
use crate::calibration::CalibrationTable;
use crate::error::{Error, Result};
use crate::tensor::Latent;

/// Residual caching on early/mid steps, a forced-compute guard band, then
/// delta extrapolation inside the late window.
///
/// With `t_brk = max(window) + refresh_steps`: steps `t > t_brk` follow the
/// residual rule, `max(window) < t <= t_brk` always call the model, and
/// `t <= max(window)` follow the window plan.
pub fn hybrid_forward(
    ctx: Sampling<'_>,
    x_t: Latent,
    seed: u64,
    table: &CalibrationTable,
    plan: &SkipPlan,
    tea_rule: &ResidualRule,
    refresh_steps: usize,
) -> Result<PolicyRunReport> {
    let steps = ctx.sched.steps();
    plan.check_against(steps)?;
    let stream = stream_table(table, plan)?;
    let top = plan.top().unwrap_or(0);
    let t_brk = top + refresh_steps;
    if let Some(&t) = plan.skip_set.iter().find(|&&t| t > top) {
        return Err(Error::PlanInvalid(format!(
            "skip at t = {t} lies above the window top {top}"
        )));
    }

    let mut run = Run::new(ctx, x_t, seed)?;
    let mut tea = ResidualState::default();
    while !run.done() {
        let t = run.t();
        if t > t_brk {
            tea.step(&mut run, tea_rule, t == 1)?;
        } else if t > top {
            let eps = run.compute()?;
            run.advance(eps, StepAction::Refreshed, None)?;
        } else {
            window_step(&mut run, Some(stream), plan, SkipFill::DeltaExtrapolation)?;
        }
    }
    Ok(run.finish("hybrid"))
}
