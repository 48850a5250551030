use std::path::Path;

use taocache::policy::{select_window, window_scores};
use taocache::{CalibrationTable, WindowParams};

use crate::exit::ConfigError;
use crate::output::{read_json, OutputDir};

pub const PLAN_FILE: &str = "plan.json";
pub const SCORES_FILE: &str = "window_scores.csv";

pub fn run(table_path: &Path, params: &WindowParams, out: &OutputDir) -> anyhow::Result<()> {
    let table: CalibrationTable = read_json(table_path)?;
    let cols = table
        .stream(params.stream)
        .ok_or_else(|| ConfigError(format!("table has no {} stream", params.stream)))?
        .columns();
    let plan = select_window(&table, params)?;
    let scores = window_scores(&cols, params)?;

    let mut w = out.csv(SCORES_FILE)?;
    w.write_record([
        "t_lo",
        "t_hi",
        "mean_c_cos",
        "mean_s_cos",
        "mean_s_ratio",
        "score",
        "selected",
    ])?;
    for s in &scores {
        w.write_record([
            s.t_lo.to_string(),
            s.t_hi.to_string(),
            s.mean_c_cos.to_string(),
            s.mean_s_cos.to_string(),
            s.mean_s_ratio.to_string(),
            s.score.to_string(),
            (plan.window == Some((s.t_lo, s.t_hi))).to_string(),
        ])?;
    }
    w.flush()?;
    let path = out.write_json(PLAN_FILE, &plan)?;
    let (lo, hi) = plan.window.expect("selected plans have a window");
    eprintln!(
        "window [{lo}, {hi}] skips {} of {} steps ({} candidates scored): {}",
        plan.n_skip(),
        plan.steps,
        scores.len(),
        path.display()
    );
    Ok(())
}
