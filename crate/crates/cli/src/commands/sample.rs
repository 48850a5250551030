use std::path::Path;

use anyhow::Context;
use rayon::prelude::*;
use serde::Serialize;
use taocache::policy::*;
use taocache::schedule::initial_noise;
use taocache::trace::write_trace_file;
use taocache::{CalibrationTable, DenoiserBackend, Latent, NoiseSchedule, Sampling};

use crate::config::{output_dir, thread_pool, PolicyConfig, PolicyName, RunConfig};
use crate::exit::ConfigError;
use crate::output::{cell, read_json, OutputDir};

pub const SAMPLES_DIR: &str = "samples";
pub const LEDGER_FILE: &str = "ledger.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Everything a single prompt run needs besides its backend and seed.
struct PolicySetup {
    cfg: PolicyConfig,
    table: Option<CalibrationTable>,
    plan: SkipPlan,
}

#[derive(Serialize)]
struct SampleRecord<'a> {
    prompt: &'a str,
    seed: u64,
    /// Baseline threshold actually used, after any budget search.
    threshold: Option<f64>,
    #[serde(flatten)]
    report: &'a PolicyRunReport,
}

impl PolicySetup {
    fn load(cfg: &PolicyConfig, steps: usize) -> anyhow::Result<Self> {
        let needs_table = matches!(
            cfg.name,
            PolicyName::Taocache | PolicyName::Magnitude | PolicyName::Hybrid
        );
        let table = match &cfg.table {
            Some(path) => Some(read_json::<CalibrationTable>(path)?),
            None if needs_table => {
                return Err(ConfigError(format!("policy {:?} needs policy.table", cfg.name)).into());
            }
            None => None,
        };
        let plan = match &cfg.plan {
            Some(path) => read_json::<SkipPlan>(path)?,
            None => SkipPlan::empty(steps),
        };
        plan.check_against(steps)
            .map_err(|e| ConfigError(format!("policy.plan: {e}")))?;
        if let Some(t) = &table {
            if t.steps() != steps {
                return Err(ConfigError(format!("table covers T = {}, schedule has T = {steps}", t.steps())).into());
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            table,
            plan,
        })
    }

    fn table(&self) -> &CalibrationTable {
        self.table.as_ref().expect("checked at load")
    }

    fn run(&self, ctx: Sampling<'_>, x: &Latent, seed: u64) -> taocache::Result<(PolicyRunReport, Option<f64>)> {
        let c = &self.cfg;
        let budget = c.budget;
        match c.name {
            PolicyName::Full => Ok((full_forward(ctx, x.clone(), seed)?, None)),
            PolicyName::Taocache => Ok((taocache_forward(ctx, x.clone(), seed, self.table(), &self.plan)?, None)),
            PolicyName::TaoResidual => Ok((tao_window_residual_forward(ctx, x.clone(), seed, &self.plan)?, None)),
            PolicyName::Residual => {
                let rule = |th: f64| ResidualRule {
                    rel_l1_thresh: th,
                    max_skips: budget.or(c.residual.max_skips),
                    ..c.residual.clone()
                };
                let run = |th| residual_forward(ctx, x.clone(), seed, &rule(th));
                tuned(budget, c.residual.rel_l1_thresh, run)
            }
            PolicyName::Magnitude => {
                let rule = |th: f64| MagnitudeRule {
                    mag_thresh: th,
                    max_skips: budget.or(c.magnitude.max_skips),
                    ..c.magnitude.clone()
                };
                let run = |th| magnitude_forward(ctx, x.clone(), seed, self.table(), &rule(th));
                tuned(budget, c.magnitude.mag_thresh, run)
            }
            PolicyName::Hybrid => {
                let n_tao = self.plan.n_skip();
                if budget.is_some_and(|b| b < n_tao) {
                    return Err(taocache::Error::Parameter(format!(
                        "budget {} is below the plan's {n_tao} window skips",
                        budget.unwrap_or(0)
                    )));
                }
                let rule = |th: f64| ResidualRule {
                    rel_l1_thresh: th,
                    max_skips: budget.map(|b| b - n_tao).or(c.residual.max_skips),
                    ..c.residual.clone()
                };
                let run = |th| {
                    hybrid_forward(
                        ctx,
                        x.clone(),
                        seed,
                        self.table(),
                        &self.plan,
                        &rule(th),
                        c.refresh_steps,
                    )
                };
                tuned(budget, c.residual.rel_l1_thresh, run)
            }
        }
    }
}

/// Runs at the configured threshold, or at the one that skips exactly `budget` steps.
fn tuned(
    budget: Option<usize>,
    configured: f64,
    run: impl Fn(f64) -> taocache::Result<PolicyRunReport>,
) -> taocache::Result<(PolicyRunReport, Option<f64>)> {
    let th = match budget {
        Some(b) => find_threshold_for_budget(b, |th| Ok(run(th)?.skipped))?,
        None => configured,
    };
    Ok((run(th)?, Some(th)))
}

pub fn run(cfg: &RunConfig, out_flag: Option<&Path>) -> anyhow::Result<()> {
    cfg.validate()?;
    cfg.validate_policy_files()?;
    let sched = cfg.schedule()?;
    let prompts = cfg.resolved_prompts();
    let setup = PolicySetup::load(&cfg.policy, sched.steps())?;
    let backends = cfg.build_backends(&sched, &prompts)?;
    let out = OutputDir::create(output_dir(out_flag, Some(&cfg.output_dir)))?;
    let samples = out.subdir(SAMPLES_DIR)?;
    let shape = cfg.shape(&backends);

    let results: Vec<_> = thread_pool(cfg.threads)?.install(|| {
        prompts
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let backend = backends.for_prompt(i, p);
                run_prompt(backend, &sched, cfg, &setup, &shape, p.seed)
            })
            .collect()
    });

    let mut ledger = out.csv(LEDGER_FILE)?;
    ledger.write_record(["prompt", "t", "action"])?;
    let mut summary = out.csv(SUMMARY_FILE)?;
    summary.write_record([
        "prompt",
        "policy",
        "seed",
        "model_calls",
        "skipped",
        "skip_fraction",
        "threshold",
    ])?;
    let mut failures = Vec::new();
    for ((i, p), result) in prompts.iter().enumerate().zip(results) {
        let (report, threshold) = match result {
            Ok(r) => r,
            Err(e) => {
                eprintln!("prompt {}: {e:#}", p.id);
                failures.push((p.id.clone(), e));
                continue;
            }
        };
        let record = SampleRecord {
            prompt: &p.id,
            seed: p.seed,
            threshold,
            report: &report,
        };
        crate::output::write_json(&samples.join(format!("{}.json", p.id)), &record)?;
        if cfg.record_traces {
            let trace = report.eps_trace(&backends.for_prompt(i, p).id(), p.seed)?;
            write_trace_file(&trace, samples.join(format!("{}.taot", p.id)))?;
        }
        for entry in &report.log {
            ledger.write_record([p.id.as_str(), &entry.t.to_string(), entry.action.as_str()])?;
        }
        summary.write_record([
            p.id.clone(),
            report.policy.clone(),
            p.seed.to_string(),
            report.model_calls.to_string(),
            report.skipped.to_string(),
            report.skip_fraction().to_string(),
            cell(threshold),
        ])?;
    }
    ledger.flush()?;
    summary.flush()?;

    if let Some((id, err)) = failures.into_iter().next() {
        return Err(err.context(format!("prompt {id} failed")));
    }
    eprintln!(
        "sampled {} prompts with policy {:?} into {}",
        prompts.len(),
        cfg.policy.name,
        samples.display()
    );
    Ok(())
}

fn run_prompt(
    backend: &dyn DenoiserBackend,
    sched: &NoiseSchedule,
    cfg: &RunConfig,
    setup: &PolicySetup,
    shape: &[usize],
    seed: u64,
) -> anyhow::Result<(PolicyRunReport, Option<f64>)> {
    let ctx = Sampling {
        backend,
        sched,
        mode: cfg.sampler,
    };
    let x = initial_noise(shape, seed);
    setup.run(ctx, &x, seed).context("sampling")
}
