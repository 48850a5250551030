use anyhow::Context;
use rayon::prelude::*;
use taocache::calibration::TableMeta;
use taocache::sampler::Trajectory;
use taocache::tensor::DEFAULT_ZERO_EPS;
use taocache::trace::write_trace_file;
use taocache::CalibrationTable;

use crate::config::{output_dir, thread_pool, RunConfig};
use crate::output::{cell, OutputDir};

pub const TABLE_FILE: &str = "calibration.json";
pub const CURVES_FILE: &str = "calibration_curves.csv";

pub fn run(cfg: &RunConfig, out_flag: Option<&std::path::Path>) -> anyhow::Result<()> {
    cfg.validate()?;
    let sched = cfg.schedule()?;
    let prompts = cfg.resolved_prompts();
    let backends = cfg.build_backends(&sched, &prompts)?;
    let out = OutputDir::create(output_dir(out_flag, Some(&cfg.output_dir)))?;

    let trajectories = thread_pool(cfg.threads)?.install(|| {
        prompts
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let b = backends.for_prompt(i, p);
                Trajectory::record(b, &sched, cfg.sampler, p.seed, &b.streams(), cfg.record_traces)
                    .with_context(|| format!("prompt {}", p.id))
            })
            .collect::<anyhow::Result<Vec<_>>>()
    })?;

    let first = backends.for_prompt(0, &prompts[0]);
    let meta = TableMeta {
        backend_id: first.id(),
        schedule_kind: sched.kind(),
        prompt_count: prompts.len(),
        created_unix: None,
    };
    let table = CalibrationTable::from_trajectories(&trajectories, meta, sched.steps(), DEFAULT_ZERO_EPS)?;

    if cfg.record_traces {
        let dir = out.subdir("traces")?;
        let shape = cfg.shape(&backends);
        for ((i, p), traj) in prompts.iter().enumerate().zip(&trajectories) {
            let trace = traj.to_trace(&backends.for_prompt(i, p).id(), sched.kind().as_str(), &shape)?;
            write_trace_file(&trace, dir.join(format!("{}.taot", p.id)))?;
        }
    }

    let path = out.write_json(TABLE_FILE, &table)?;
    write_curves(&out, &table)?;
    eprintln!(
        "calibrated {} prompts over T = {}: {}",
        prompts.len(),
        sched.steps(),
        path.display()
    );
    Ok(())
}

fn write_curves(out: &OutputDir, table: &CalibrationTable) -> anyhow::Result<()> {
    let mut w = out.csv(CURVES_FILE)?;
    w.write_record([
        "stream",
        "t",
        "n_valid",
        "cos_mean",
        "cos_std",
        "ratio_mean",
        "ratio_std",
    ])?;
    for stream in table.streams() {
        let st = table.stream(stream).expect("listed stream");
        for t in 1..table.steps() - 1 {
            w.write_record([
                stream.as_str().to_string(),
                t.to_string(),
                st.n_valid(t).to_string(),
                cell(st.c_cos(t)),
                cell(st.s_cos(t)),
                cell(st.c_ratio(t)),
                cell(st.s_ratio(t)),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
